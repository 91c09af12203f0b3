"""Propensity-score matching within subgroups.

Pipeline: :func:`build_design_matrix` (mean imputation plus missingness
indicators) -> :func:`fit_propensity` (logistic MLE by IRLS) ->
:func:`trim_overlap` -> :func:`match` (optimal 1:k caliper matching with an
exact-match stratum) -> :func:`balance_table` / :func:`effective_sample_size`.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from dataturnover.cohort import Cohort, CovariateSpec

log = logging.getLogger(__name__)


class MatchingError(ValueError):
    pass


class SeparationError(MatchingError):
    pass


@dataclass(frozen=True)
class DesignMatrix:
    ids: tuple[str, ...]
    X: np.ndarray
    columns: tuple[str, ...]
    binary: np.ndarray  # per column: True -> balance on raw difference
    treated: np.ndarray
    subgroup: str
    n_indicators: int = 0
    sources: tuple[str, ...] = ()  # covariate each column came from

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def missingness_indicators(self) -> np.ndarray:
        return self.X[:, len(self.columns) - self.n_indicators:]

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.columns.index(name)]

    def index_of(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}


def design_from_columns(
    ids: Sequence[str],
    columns: Sequence[tuple[CovariateSpec, np.ndarray]],
    treated: np.ndarray,
    subgroup: str,
) -> DesignMatrix:
    """Mean-impute raw covariate columns (NaN = missing) and append missingness indicators.

    Categorical covariates are expanded to one indicator per declared level.
    """
    if len(ids) == 0:
        raise MatchingError(f"subgroup {subgroup!r} is empty")
    cols, names, binary, sources = [], [], [], []
    indicators, ind_names = [], []
    for spec, raw in columns:
        raw = np.asarray(raw, dtype=float)
        miss = np.isnan(raw)
        if miss.all():
            raise MatchingError(f"covariate {spec.name!r} is missing for every subject in {subgroup}")
        if spec.kind == "categorical":
            for lv in spec.levels:
                dummy = np.where(miss, np.nan, (raw == lv).astype(float))
                dummy[miss] = np.nanmean(dummy)
                cols.append(dummy)
                names.append(f"{spec.name}={_fmt_level(lv)}")
                binary.append(True)
                sources.append(spec.name)
        else:
            x = raw.copy()
            x[miss] = raw[~miss].mean()
            cols.append(x)
            names.append(spec.name)
            binary.append(spec.kind == "binary")
            sources.append(spec.name)
        if miss.any():
            indicators.append(miss.astype(float))
            ind_names.append(f"{spec.name} (missing)")
    X = np.column_stack(cols + indicators) if cols or indicators else np.zeros((len(ids), 0))
    return DesignMatrix(
        ids=tuple(ids),
        X=X,
        columns=tuple(names + ind_names),
        binary=np.array(binary + [True] * len(indicators), dtype=bool),
        treated=np.asarray(treated, dtype=bool),
        subgroup=subgroup,
        n_indicators=len(indicators),
        sources=tuple(sources + [n.split(" (")[0] for n in ind_names]),
    )


def _fmt_level(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(v)


def build_design_matrix(cohort: Cohort, subgroup: str, covariates: Sequence[str] | None = None) -> DesignMatrix:
    sub = [s for s in cohort.subjects if s.subgroup == subgroup]
    if not sub:
        raise MatchingError(f"subgroup {subgroup!r} is empty")
    if any(s.treated is None for s in sub):
        raise MatchingError("treatment status missing; run apply_eligibility first")
    specs = cohort.covariate_specs if covariates is None else [cohort.covariate_spec(c) for c in covariates]
    columns = []
    for spec in specs:
        vals = np.array([np.nan if (v := s.covariate(spec.name)) is None else v for s in sub], dtype=float)
        columns.append((spec, vals))
    return design_from_columns([s.id for s in sub], columns, np.array([bool(s.treated) for s in sub]), subgroup)


# ---------------------------------------------------------------------------
# Propensity model


@dataclass(frozen=True)
class PropensityFit:
    coefficients: np.ndarray  # intercept first, then one per design column (0 for dropped)
    logit_scores: np.ndarray
    pooled_sd_logit: float
    dropped: tuple[str, ...] = ()
    n_iter: int = 0
    converged: bool = True

    @property
    def propensity(self) -> np.ndarray:
        return expit(self.logit_scores)


def _independent_columns(Z: np.ndarray) -> list[int]:
    """Greedy left-to-right selection of columns that raise the rank of [1, Z]."""
    n = Z.shape[0]
    keep: list[int] = []
    basis = np.ones((n, 1)) / np.sqrt(n)
    for j in range(Z.shape[1]):
        col = Z[:, j]
        scale = np.linalg.norm(col)
        if scale == 0:
            continue
        resid = col - basis @ (basis.T @ col)
        resid = resid - basis @ (basis.T @ resid)
        r = np.linalg.norm(resid)
        if r > 1e-8 * scale:
            keep.append(j)
            basis = np.column_stack([basis, resid / r])
    return keep


def fit_propensity(
    dm: DesignMatrix,
    ridge: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> PropensityFit:
    """Logistic regression of treatment on the design columns by IRLS.

    Columns are centred and scaled internally; constant and collinear columns
    are dropped (reported in ``dropped``, coefficient 0). Iteration stops when
    the score-vector norm is below ``tol`` or after ``max_iter`` Newton steps.
    ``ridge`` adds an L2 penalty on the non-intercept coefficients.
    """
    y = dm.treated.astype(float)
    n1 = y.sum()
    if n1 == 0 or n1 == len(y):
        raise MatchingError("need at least one treated and one control subject")
    X = dm.X
    mu = X.mean(axis=0) if X.shape[1] else np.zeros(0)
    sd = X.std(axis=0) if X.shape[1] else np.zeros(0)
    safe = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / safe
    Z[:, sd == 0] = 0.0
    keep = _independent_columns(Z)
    dropped = tuple(dm.columns[j] for j in range(X.shape[1]) if j not in keep)
    A = np.column_stack([np.ones(len(y)), Z[:, keep]])
    p = A.shape[1]
    penalty = np.full(p, ridge)
    penalty[0] = 0.0
    gamma = np.zeros(p)
    gamma[0] = np.log(n1 / (len(y) - n1))

    def objective(g):
        eta = A @ g
        return np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(penalty * g * g)

    ll = objective(gamma)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu_hat = expit(A @ gamma)
        grad = A.T @ (y - mu_hat) - penalty * gamma
        if np.linalg.norm(grad) <= tol:
            converged = True
            it -= 1
            break
        w = mu_hat * (1 - mu_hat)
        H = (A * w[:, None]).T @ A + np.diag(penalty)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("singular information matrix; try ridge=1e-6") from exc
        t = 1.0
        while True:
            cand = gamma + t * step
            new_ll = objective(cand)
            if new_ll >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t /= 2
        gamma, ll = cand, new_ll
        if ridge == 0 and np.max(np.abs(gamma[1:]), initial=0.0) > 30:
            raise SeparationError(
                "coefficients diverging (perfect or quasi-perfect separation); refit with ridge=1e-6"
            )
    else:
        mu_hat = expit(A @ gamma)
        grad = A.T @ (y - mu_hat) - penalty * gamma
        converged = bool(np.linalg.norm(grad) <= tol)
    # a vanishing gradient with saturated probabilities is separation, not a fit
    if ridge == 0 and np.max(np.abs(gamma[1:]), initial=0.0) > 15:
        raise SeparationError("coefficients are implausibly large (separation); refit with ridge=1e-6")
    beta = np.zeros(X.shape[1] + 1)
    beta[[j + 1 for j in keep]] = gamma[1:] / safe[keep]
    beta[0] = gamma[0] - np.sum(gamma[1:] * mu[keep] / safe[keep])
    logits = A @ gamma
    if not np.all(np.isfinite(logits)):
        raise SeparationError("non-finite logit scores")
    return PropensityFit(beta, logits, pooled_sd(logits, dm.treated), dropped, it, converged)


def pooled_sd(scores: np.ndarray, treated: np.ndarray) -> float:
    a, b = scores[treated], scores[~treated]
    dof = len(a) + len(b) - 2
    if dof <= 0:
        return 0.0
    ss = (len(a) - 1) * a.var(ddof=1) if len(a) > 1 else 0.0
    ss += (len(b) - 1) * b.var(ddof=1) if len(b) > 1 else 0.0
    return float(np.sqrt(ss / dof))


def trim_overlap(fit: PropensityFit, dm: DesignMatrix, c: float = 0.5) -> frozenset[str]:
    """Ids of subjects whose logit lies within ``c`` pooled SDs of the other group's range."""
    s = fit.logit_scores
    t = dm.treated
    width = c * fit.pooled_sd_logit
    lo_t, hi_t = s[t].min(), s[t].max()
    lo_c, hi_c = s[~t].min(), s[~t].max()
    keep = np.where(t, (s >= lo_c - width) & (s <= hi_c + width), (s >= lo_t - width) & (s <= hi_t + width))
    if not (keep & t).any() or not (keep & ~t).any():
        raise MatchingError("overlap trimming left no treated or no control subjects")
    return frozenset(sid for sid, k in zip(dm.ids, keep) if k)


# ---------------------------------------------------------------------------
# Matching


@dataclass(frozen=True)
class MatchedSet:
    treated_id: str
    control_ids: tuple[str, ...]


@dataclass(frozen=True)
class MatchedDesign:
    sets: tuple[MatchedSet, ...]
    subgroup: str
    k: int
    dropped: tuple[str, ...] = ()  # treated ids left unmatched
    total_distance: float = 0.0

    def __len__(self) -> int:
        return len(self.sets)

    def member_ids(self) -> list[str]:
        return [sid for s in self.sets for sid in (s.treated_id, *s.control_ids)]

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["set_id", "subject_id", "role"])
            for i, s in enumerate(self.sets, start=1):
                w.writerow([i, s.treated_id, "treated"])
                for c in s.control_ids:
                    w.writerow([i, c, "control"])

    @classmethod
    def read_csv(cls, path: str | os.PathLike, subgroup: str) -> "MatchedDesign":
        groups: dict[int, list] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                entry = groups.setdefault(int(row["set_id"]), [None, []])
                if row["role"] == "treated":
                    entry[0] = row["subject_id"]
                else:
                    entry[1].append(row["subject_id"])
        sets = tuple(MatchedSet(t, tuple(c)) for _, (t, c) in sorted(groups.items()))
        k = max((len(s.control_ids) for s in sets), default=0)
        return cls(sets, subgroup, k)


def match(
    fit: PropensityFit,
    dm: DesignMatrix,
    k: int = 3,
    exact_on: str | None = "sex",
    caliper_mult: float = 0.2,
    retained: Iterable[str] | None = None,
    method: str = "optimal",
) -> MatchedDesign:
    """1:k matching on the logit propensity score without replacement.

    Candidate pairs must share the ``exact_on`` column value and lie within
    ``caliper_mult * pooled_sd_logit``. ``method="optimal"`` minimises the total
    absolute logit distance; ``"greedy"`` takes nearest available controls.
    Treated subjects that cannot receive ``k`` controls are dropped and listed
    in ``MatchedDesign.dropped``.
    """
    if k < 1:
        raise MatchingError("k must be at least 1")
    if method not in ("optimal", "greedy"):
        raise MatchingError(f"unknown matching method {method!r}")
    keep = np.ones(len(dm), dtype=bool)
    if retained is not None:
        r = set(retained)
        keep = np.array([sid in r for sid in dm.ids])
    caliper = caliper_mult * fit.pooled_sd_logit
    strata = dm.column(exact_on) if exact_on else np.zeros(len(dm))
    ids = np.asarray(dm.ids, dtype=object)
    order = np.argsort(ids, kind="stable")
    sets: list[tuple[int, list[int]]] = []
    dropped: list[int] = []
    total = 0.0
    for value in np.unique(strata[keep]):
        in_stratum = order[(strata[order] == value) & keep[order]]
        t_idx = in_stratum[dm.treated[in_stratum]]
        c_idx = in_stratum[~dm.treated[in_stratum]]
        if len(t_idx) == 0:
            continue
        st = fit.logit_scores[t_idx]
        sc = fit.logit_scores[c_idx]
        if method == "optimal":
            assigned, lost = _optimal_match(st, sc, k, caliper)
        else:
            assigned, lost = _greedy_match(st, sc, k, caliper)
        for ti, cs in assigned.items():
            sets.append((t_idx[ti], [c_idx[c] for c in cs]))
            total += float(np.abs(st[ti] - sc[cs]).sum())
        dropped.extend(t_idx[i] for i in lost)
    if dropped:
        log.warning("%s: %d treated subjects could not be matched and were dropped", dm.subgroup, len(dropped))
    sets.sort(key=lambda s: dm.ids[s[0]])
    out = tuple(
        MatchedSet(dm.ids[t], tuple(dm.ids[c] for c in sorted(cs, key=lambda c: dm.ids[c]))) for t, cs in sets
    )
    return MatchedDesign(out, dm.subgroup, k, tuple(sorted(dm.ids[i] for i in dropped)), total)


def _optimal_match(st: np.ndarray, sc: np.ndarray, k: int, caliper: float):
    """Min-cost assignment with each treated node replicated k times.

    Forbidden edges carry a cost larger than any feasible assignment, so a fully
    feasible optimum is found whenever one exists. Treated units left with a
    forbidden edge are dropped one at a time (fewest feasible controls first)
    and the problem is re-solved.
    """
    dist = np.abs(st[:, None] - sc[None, :])
    feasible = dist <= caliper
    active = [i for i in range(len(st)) if feasible[i].sum() >= k]
    lost = [i for i in range(len(st)) if feasible[i].sum() < k]
    while active:
        rows = np.repeat(active, k)
        n_rows, n_cols = len(rows), len(sc)
        big = n_rows * (caliper + 1.0) + 1.0
        cost = np.where(feasible[rows], dist[rows], big)
        if n_cols < n_rows:
            cost = np.hstack([cost, np.full((n_rows, n_rows - n_cols), big)])
        r, c = linear_sum_assignment(cost)
        bad = {rows[ri] for ri, ci in zip(r, c) if ci >= n_cols or not feasible[rows[ri], ci]}
        if not bad:
            assigned: dict[int, list[int]] = {i: [] for i in active}
            for ri, ci in zip(r, c):
                assigned[rows[ri]].append(ci)
            return assigned, lost
        worst = min(bad, key=lambda i: (feasible[i].sum(), i))
        active.remove(worst)
        lost.append(worst)
    return {}, lost


def _greedy_match(st: np.ndarray, sc: np.ndarray, k: int, caliper: float):
    available = np.ones(len(sc), dtype=bool)
    assigned, lost = {}, []
    for i in range(len(st)):
        d = np.abs(sc - st[i])
        cand = np.flatnonzero(available & (d <= caliper))
        if len(cand) < k:
            lost.append(i)
            continue
        pick = cand[np.argsort(d[cand], kind="stable")[:k]]
        available[pick] = False
        assigned[i] = list(pick)
    return assigned, lost


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class BalanceRow:
    name: str
    pre_match_diff: float
    post_match_diff: float
    metric: str
    flag: str = ""


@dataclass(frozen=True)
class BalanceTable:
    rows: tuple[BalanceRow, ...]
    subgroup: str = ""

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", "pre_match_diff", "post_match_diff", "metric", "flag"])
            for r in self.rows:
                w.writerow([r.name, repr(r.pre_match_diff), repr(r.post_match_diff), r.metric, r.flag])

    @classmethod
    def read_csv(cls, path: str | os.PathLike, subgroup: str = "") -> "BalanceTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [
                BalanceRow(r["covariate"], float(r["pre_match_diff"]), float(r["post_match_diff"]), r["metric"], r["flag"])
                for r in csv.DictReader(fh)
            ]
        return cls(tuple(rows), subgroup)


def balance_table(design: MatchedDesign, dm: DesignMatrix) -> BalanceTable:
    """Absolute raw (binary columns) or standardized (continuous) treated-control mean differences.

    Standardized differences divide by the pre-match pooled SD
    ``sqrt((var_t + var_c) / 2)`` both before and after matching.
    """
    if not design.sets:
        raise MatchingError("matched design is empty")
    index = dm.index_of()
    t_rows = [index[s.treated_id] for s in design.sets]
    c_rows = [index[c] for s in design.sets for c in s.control_ids]
    X, t = dm.X, dm.treated
    rows = []
    for j, name in enumerate(dm.columns):
        pre = float(X[t, j].mean() - X[~t, j].mean())
        post = float(X[t_rows, j].mean() - X[c_rows, j].mean())
        if dm.binary[j]:
            rows.append(BalanceRow(name, abs(pre), abs(post), "abs-raw-mean-diff"))
            continue
        scale = float(np.sqrt((_var(X[t, j]) + _var(X[~t, j])) / 2))
        if not scale > 0:
            rows.append(BalanceRow(name, abs(pre), abs(post), "abs-raw-mean-diff", "zero-variance"))
        else:
            rows.append(BalanceRow(name, abs(pre) / scale, abs(post) / scale, "abs-standardized-mean-diff"))
    return BalanceTable(tuple(rows), dm.subgroup)


def _var(x: np.ndarray) -> float:
    return float(x.var(ddof=1)) if len(x) > 1 else 0.0


def effective_sample_size(design: MatchedDesign) -> float:
    """Sum over sets of the harmonic mean of the treated (1) and control counts."""
    return float(sum(2.0 * len(s.control_ids) / (1 + len(s.control_ids)) for s in design.sets if s.control_ids))
