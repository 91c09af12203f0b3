"""Randomization inference within matched sets.

Continuous outcomes use a weighted M-statistic (Huber-type psi on scaled
within-set differences, sets weighted by the rank of their response range);
binary outcomes use McNemar's test, or its Mantel-Haenszel extension when sets
have more than one control. Null moments are exact under uniform
randomization of the treated label within each set; tail probabilities use
the normal approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import comb
from scipy.stats import binom, norm, rankdata

from dataturnover.cohort import Cohort
from dataturnover.matching import MatchedDesign

DEFAULT_WEIGHTS = (20, 12, 20)
DEFAULT_TRIM = 3.0


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class OutcomeSample:
    """Usable matched sets for one outcome: (treated value, available control values)."""

    outcome: str
    subgroup: str
    sets: tuple[tuple[float, tuple[float, ...]], ...]
    kind: str = "continuous"

    @property
    def I_k(self) -> int:
        return len(self.sets)

    def to_array(self) -> np.ndarray:
        """Treated value in column 0, controls after it, NaN padding."""
        width = 1 + max((len(c) for _, c in self.sets), default=0)
        Y = np.full((len(self.sets), width), np.nan)
        for i, (t, cs) in enumerate(self.sets):
            Y[i, 0] = t
            Y[i, 1 : 1 + len(cs)] = cs
        return Y

    @classmethod
    def from_array(cls, Y: np.ndarray, outcome: str = "", subgroup: str = "", kind: str = "continuous") -> "OutcomeSample":
        sets = []
        for row in np.asarray(Y, dtype=float):
            if np.isnan(row[0]):
                continue
            cs = tuple(float(v) for v in row[1:] if not np.isnan(v))
            if cs:
                sets.append((float(row[0]), cs))
        return cls(outcome, subgroup, tuple(sets), kind)

    def shifted(self, tau: float) -> "OutcomeSample":
        """Subtract ``tau`` from every treated response."""
        return replace(self, sets=tuple((t - tau, cs) for t, cs in self.sets))


def usable_rows(Y: np.ndarray) -> np.ndarray:
    """Rows with an observed treated value and at least one observed control."""
    return ~np.isnan(Y[:, 0]) & (~np.isnan(Y[:, 1:])).any(axis=1)


def extract_outcome_sample(design: MatchedDesign, cohort: Cohort, outcome: str) -> OutcomeSample:
    try:
        spec = cohort.outcome_spec(outcome)
    except KeyError:
        raise InferenceError(f"outcome {outcome!r} is not in the registry") from None
    by_id = cohort.by_id
    sets = []
    for s in design.sets:
        t = by_id[s.treated_id].outcomes.get(outcome)
        if t is None:
            continue
        cs = tuple(v for c in s.control_ids if (v := by_id[c].outcomes.get(outcome)) is not None)
        if cs:
            sets.append((float(t), tuple(float(v) for v in cs)))
    if not sets:
        raise InferenceError(f"no usable matched sets for outcome {outcome!r} in {design.subgroup}")
    return OutcomeSample(outcome, design.subgroup, tuple(sets), spec.kind)


@dataclass(frozen=True)
class OutcomeTest:
    p_right: float
    p_left: float
    statistic: float
    method: str
    z: float = 0.0
    degenerate: bool = False
    outcome: str = ""
    subgroup: str = ""
    n_sets: int = 0

    @property
    def p_min(self) -> float:
        return min(self.p_right, self.p_left)

    def one_sided(self, direction: int) -> float:
        return self.p_right if direction == 1 else self.p_left


def _degenerate(method: str, sample: OutcomeSample | None = None, n_sets: int = 0) -> OutcomeTest:
    return OutcomeTest(
        1.0, 1.0, 0.0, method, 0.0, True,
        sample.outcome if sample else "", sample.subgroup if sample else "", n_sets,
    )


# ---------------------------------------------------------------------------
# Weighted M-statistic


def range_weights(ranges: np.ndarray, weights: tuple[int, int, int] = DEFAULT_WEIGHTS) -> np.ndarray:
    """Set weights from the rank of each set's response range.

    With ``weights = (m, lo, hi)`` and ``u = rank / I`` the weight is
    ``sum_{l=lo}^{hi} l * C(m, l) * u**(l-1) * (1-u)**(m-l)``; ``(1, 1, 1)``
    gives equal weights.
    """
    m, lo, hi = weights
    if not (1 <= lo <= hi <= m):
        raise InferenceError(f"invalid weight triple {weights}")
    if (m, lo, hi) == (1, 1, 1):
        return np.ones(len(ranges))
    u = rankdata(ranges) / len(ranges)
    w = np.zeros(len(ranges))
    for l in range(lo, hi + 1):
        w += l * comb(m, l) * u ** (l - 1) * (1 - u) ** (m - l)
    return w


def huber_psi(x: np.ndarray, trim: float = DEFAULT_TRIM, inner: float = 0.0) -> np.ndarray:
    """Odd psi, linear between ``inner`` and ``trim`` and flat at +-1 beyond."""
    if trim <= inner:
        return np.sign(x) * (np.abs(x) > inner)
    return np.sign(x) * np.clip((np.abs(x) - inner) / (trim - inner), 0.0, 1.0)


def m_scores(Y: np.ndarray, trim: float = DEFAULT_TRIM, inner: float = 0.0, quantile: float = 0.5):
    """Per-subject scores ``(1/n_i) sum_{j'} psi((y_ij - y_ij') / h)``.

    ``h`` is the ``quantile`` of all absolute within-set differences; when that is
    zero the mean nonzero absolute difference is used. Returns ``(scores, h)``;
    ``h`` is 0 when every within-set difference is zero.
    """
    valid = ~np.isnan(Y)
    n = valid.sum(axis=1)
    D = Y[:, :, None] - Y[:, None, :]
    J = Y.shape[1]
    pair = valid[:, :, None] & valid[:, None, :] & ~np.eye(J, dtype=bool)[None]
    absd = np.abs(D[pair])
    if absd.size == 0 or not (absd > 0).any():
        return np.where(valid, 0.0, np.nan), 0.0
    h = float(np.quantile(absd, quantile))
    if h <= 0:
        h = float(absd[absd > 0].mean())
    psi = np.where(pair, huber_psi(np.where(pair, D, 0.0) / h, trim, inner), 0.0)
    S = psi.sum(axis=2) / n[:, None]
    return np.where(valid, S, np.nan), h


def m_moments(Y: np.ndarray, weights=DEFAULT_WEIGHTS, trim: float = DEFAULT_TRIM, inner: float = 0.0,
              quantile: float = 0.5) -> tuple[float, float, float]:
    """Observed weighted statistic with its exact randomization mean and variance."""
    S, h = m_scores(Y, trim, inner, quantile)
    if h == 0:
        return 0.0, 0.0, 0.0
    ranges = np.nanmax(Y, axis=1) - np.nanmin(Y, axis=1)
    w = range_weights(ranges, weights)
    mean = np.nanmean(S, axis=1)
    var = np.nanmean(S * S, axis=1) - mean**2
    T = float(np.sum(w * S[:, 0]))
    return T, float(np.sum(w * mean)), float(np.sum(w * w * np.maximum(var, 0.0)))


def m_statistic_pvalues(
    sample: OutcomeSample | np.ndarray,
    weights: tuple[int, int, int] = DEFAULT_WEIGHTS,
    trim: float = DEFAULT_TRIM,
    inner: float = 0.0,
    quantile: float = 0.5,
) -> OutcomeTest:
    """Right- and left-sided randomization p-values for the weighted M-statistic."""
    if isinstance(sample, OutcomeSample):
        Y = sample.to_array()
        meta = sample
    else:
        Y = np.asarray(sample, dtype=float)
        Y = Y[usable_rows(Y)]
        meta = None
    if len(Y) < 2:
        raise InferenceError("weighted M-statistic needs at least two usable matched sets")
    T, E, V = m_moments(Y, weights, trim, inner, quantile)
    if V <= 1e-14 * max(1.0, abs(T)):
        return _degenerate("weighted-M", meta, len(Y))
    z = (T - E) / math.sqrt(V)
    return OutcomeTest(
        float(norm.sf(z)), float(norm.cdf(z)), T, "weighted-M", float(z), False,
        meta.outcome if meta else "", meta.subgroup if meta else "", len(Y),
    )


# ---------------------------------------------------------------------------
# McNemar / Mantel-Haenszel


def mcnemar_pvalues(sample: OutcomeSample | np.ndarray, continuity: bool = True) -> OutcomeTest:
    """One-sided McNemar p-values.

    All-pairs samples use the exact binomial test on discordant pairs.
    Otherwise the treated-response total is compared with its hypergeometric
    null mean and variance summed over sets, with a normal approximation.
    The 0.5 continuity correction is on by default: without it the upper tail
    is clearly anti-conservative when events are rare.
    """
    if isinstance(sample, OutcomeSample):
        Y = sample.to_array()
        meta = sample
    else:
        Y = np.asarray(sample, dtype=float)
        Y = Y[usable_rows(Y)]
        meta = None
    if len(Y) == 0:
        raise InferenceError("no usable matched sets")
    vals = Y[~np.isnan(Y)]
    if not np.all((vals == 0) | (vals == 1)):
        raise InferenceError("McNemar test needs 0/1 responses")
    outcome = meta.outcome if meta else ""
    subgroup = meta.subgroup if meta else ""
    n = (~np.isnan(Y)).sum(axis=1)
    if np.all(n == 2):
        t = Y[:, 0]
        c = np.array([row[1:][~np.isnan(row[1:])][0] for row in Y])
        b = int(np.sum((t == 1) & (c == 0)))
        d = int(np.sum((t == 0) & (c == 1)))
        if b + d == 0:
            return _degenerate("mcnemar", meta, len(Y))
        return OutcomeTest(
            float(binom.sf(b - 1, b + d, 0.5)), float(binom.cdf(b, b + d, 0.5)), float(b), "mcnemar",
            float((b - d) / math.sqrt(b + d)), False, outcome, subgroup, len(Y),
        )
    a = np.nansum(Y, axis=1)
    T = float(np.sum(Y[:, 0]))
    E = float(np.sum(a / n))
    V = float(np.sum(a * (n - a) / n**2))
    if V <= 0:
        return _degenerate("mcnemar", meta, len(Y))
    cc = 0.5 if continuity else 0.0
    sd = math.sqrt(V)
    return OutcomeTest(
        float(norm.sf((T - E - cc) / sd)), float(norm.cdf((T - E + cc) / sd)), T, "mcnemar",
        float((T - E) / sd), False, outcome, subgroup, len(Y),
    )


def outcome_test(sample: OutcomeSample, weights=DEFAULT_WEIGHTS, **kw) -> OutcomeTest:
    """Dispatch on outcome kind: McNemar for binary, weighted M otherwise."""
    if sample.kind == "binary":
        return mcnemar_pvalues(sample, **kw)
    return m_statistic_pvalues(sample, weights, **kw)


# ---------------------------------------------------------------------------
# Confidence intervals by test inversion


@dataclass(frozen=True)
class EffectInterval:
    estimate: float
    lower: float
    upper: float
    level: float
    outcome: str = ""
    subgroup: str = ""
    diagnostic: str = ""

    def covers(self, tau: float) -> bool:
        return self.lower <= tau <= self.upper


def invert_ci(
    sample: OutcomeSample | np.ndarray,
    level: float = 0.95,
    weights: tuple[int, int, int] = DEFAULT_WEIGHTS,
    trim: float = DEFAULT_TRIM,
    tol: float = 1e-9,
    max_expand: int = 40,
) -> EffectInterval:
    """Interval for a constant additive effect by inverting the weighted M-test.

    The interval holds every ``tau`` whose two one-sided p-values on the
    adjusted responses (treated minus ``tau``) both exceed ``(1 - level) / 2``;
    the estimate is the ``tau`` where the standardized statistic crosses zero.
    """
    if not 0 < level < 1:
        raise InferenceError("level must lie in (0, 1)")
    if isinstance(sample, OutcomeSample):
        if sample.kind == "binary":
            raise InferenceError("effect intervals are only defined for continuous outcomes")
        Y = sample.to_array()
        outcome, subgroup = sample.outcome, sample.subgroup
    else:
        Y = np.asarray(sample, dtype=float)
        Y = Y[usable_rows(Y)]
        outcome = subgroup = ""
    if len(Y) < 2:
        raise InferenceError("need at least two usable matched sets")
    diffs = Y[:, :1] - Y[:, 1:]
    lo0, hi0 = float(np.nanmin(diffs)), float(np.nanmax(diffs))
    span = max(hi0 - lo0, float(np.nanmax(np.abs(Y))) * 1e-6, 1e-12)
    if m_moments(Y, weights, trim)[2] <= 0:
        raise InferenceError("degenerate sample: all within-set differences are zero")

    def z(tau: float) -> float:
        Yt = Y.copy()
        Yt[:, 0] -= tau
        T, E, V = m_moments(Yt, weights, trim)
        return 0.0 if V <= 0 else (T - E) / math.sqrt(V)

    crit = float(norm.isf((1 - level) / 2))
    notes: list[str] = []
    xtol = tol * span

    def solve(target: float, name: str) -> float:
        lo, hi = lo0 - span, hi0 + span
        f_lo, f_hi = z(lo), z(hi)
        expand = 0
        while not (f_lo >= target >= f_hi) and expand < max_expand:
            step = span * 2.0**expand
            if f_lo < target:
                lo -= step
                f_lo = z(lo)
            if f_hi > target:
                hi += step
                f_hi = z(hi)
            expand += 1
        if f_lo < target:
            notes.append(f"{name}: statistic never reaches {target:.3f}; unbounded below")
            return -math.inf
        if f_hi > target:
            notes.append(f"{name}: statistic never falls to {target:.3f}; unbounded above")
            return math.inf
        if expand:
            notes.append(f"{name}: bracket widened {expand}x")
        while hi - lo > xtol:
            mid = 0.5 * (lo + hi)
            if z(mid) >= target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    lower = solve(crit, "lower")
    estimate = solve(0.0, "estimate")
    upper = solve(-crit, "upper")
    if not lower <= estimate <= upper:
        notes.append("non-monotone p-value curve")
        lower, upper = min(lower, estimate), max(upper, estimate)
    return EffectInterval(estimate, lower, upper, level, outcome, subgroup, "; ".join(notes))


def result_row(test: OutcomeTest, interval: EffectInterval | None = None) -> dict:
    """Flat record for CSV export."""
    return {
        "outcome": test.outcome,
        "subgroup": test.subgroup,
        "p_right": repr(test.p_right),
        "p_left": repr(test.p_left),
        "method": test.method,
        "estimate": "" if interval is None else repr(interval.estimate),
        "lower": "" if interval is None else repr(interval.lower),
        "upper": "" if interval is None else repr(interval.upper),
        "level": "" if interval is None else repr(interval.level),
    }


RESULT_FIELDS = ("outcome", "subgroup", "p_right", "p_left", "method", "estimate", "lower", "upper", "level")


def sets_to_array(sets: Sequence[tuple[float, Sequence[float]]]) -> np.ndarray:
    return OutcomeSample("", "", tuple((t, tuple(c)) for t, c in sets)).to_array()
