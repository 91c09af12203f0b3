"""Monte Carlo checks of the turnover design: FWER, power, FCR and planner ordering.

Each replicate draws both subgroups from a :class:`GeneratorSpec`, matches
them, tests every outcome and runs the three turnover steps with a scripted
Step 2 (directions from the sign of the confirming subgroup's matched mean
difference, Holm at alpha/2 over the pre-specified outcomes). Replicate seeds
come from ``SeedSequence(seed).spawn``, so results do not depend on how many
worker processes run them.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from dataturnover.cohort import SUBGROUPS
from dataturnover.config import ConfigError, float_list, parse_bool, read_config
from dataturnover.inference import OutcomeSample, outcome_test
from dataturnover.matching import (
    MatchingError,
    SeparationError,
    design_from_columns,
    fit_propensity,
    match,
    trim_overlap,
)
from dataturnover.synthetic import GeneratorSpec, draw_subgroup
from dataturnover.turnover import (
    GuardedOutcomes,
    Hypothesis,
    StepTwoRegistration,
    TurnoverSession,
    bonferroni,
    screen_hypotheses,
    select_directions,
)


@dataclass(frozen=True)
class Scenario:
    generator: GeneratorSpec
    replicates: int = 1000
    seed: int = 0
    planner: str = "NHS"
    alpha: float = 0.05
    name: str = "scenario"
    intervals: bool = False
    k: int = 3
    caliper: float = 0.2
    trim: float = 0.5
    exact_on: str | None = "sex"

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.planner not in SUBGROUPS:
            raise ConfigError(f"planner must be one of {SUBGROUPS}")
        for g, (nc, nt) in self.generator.sizes.items():
            if nc <= 0 or nt <= 0:
                raise ConfigError(f"subgroup {g} sizes must be positive")

    @property
    def confirmer(self) -> str:
        return SUBGROUPS[1 - SUBGROUPS.index(self.planner)]

    @property
    def effects(self) -> dict[str, tuple[float, float]]:
        return self.generator.effects()

    def truth(self) -> dict[str, int]:
        """Number of subgroups in which each outcome is non-null."""
        return {k: int(a != 0) + int(b != 0) for k, (a, b) in self.effects.items()}

    def with_effects(self, effects: Mapping[str, tuple[float, float] | float]) -> "Scenario":
        return replace(self, generator=self.generator.with_effects(effects))

    @classmethod
    def from_config(cls, path: str | os.PathLike | None = None, text: str | None = None) -> "Scenario":
        cfg = read_config(path, text=text)
        sec = cfg["scenario"] if cfg.has_section("scenario") else {}
        gen_ref = sec.get("generator", "default")
        if gen_ref == "default":
            gen = GeneratorSpec.default()
        else:
            if path is not None and not os.path.isabs(gen_ref):
                gen_ref = os.path.join(os.path.dirname(os.fspath(path)), gen_ref)
            gen = GeneratorSpec.from_config(gen_ref)
        if cfg.has_section("sizes"):
            sizes = {}
            for g, v in cfg.items("sizes"):
                nums = float_list(v)
                if len(nums) != 2:
                    raise ConfigError(f"[sizes] {g} needs 'n_control, n_treated'")
                sizes[g] = (int(nums[0]), int(nums[1]))
            gen = gen.with_sizes(sizes)
        if cfg.has_section("effects"):
            eff = {}
            for name, v in cfg.items("effects"):
                nums = float_list(v)
                eff[name] = (nums[0], nums[-1])
            gen = gen.with_effects(eff)
        exact = sec.get("exact_on", "sex")
        return cls(
            generator=gen,
            replicates=int(sec.get("replicates", 1000)),
            seed=int(sec.get("seed", 0)),
            planner=sec.get("planner", "NHS"),
            alpha=float(sec.get("alpha", 0.05)),
            name=sec.get("name", "scenario"),
            intervals=parse_bool(sec.get("intervals", "no")),
            k=int(sec.get("k", 3)),
            caliper=float(sec.get("caliper", 0.2)),
            trim=float(sec.get("trim", 0.5)),
            exact_on=None if exact in ("", "none") else exact,
        )


# ---------------------------------------------------------------------------
# One replicate


def matched_samples(scenario: Scenario, rng: np.random.Generator) -> dict[str, dict[str, OutcomeSample]]:
    """Generate, match and extract outcome samples for both subgroups."""
    gen = scenario.generator
    out: dict[str, dict[str, OutcomeSample]] = {}
    kinds = {o.name: o.kind for o in gen.outcome_specs()}
    for g in gen.subgroups:
        draw = draw_subgroup(gen, g, rng)
        ids = [f"{i:06d}" for i in range(len(draw))]
        cols = [(c.spec(), draw.covariates[c.name]) for c in gen.covariates[g]]
        dm = design_from_columns(ids, cols, draw.treated, g)
        try:
            fit = fit_propensity(dm)
        except SeparationError:
            # small draws occasionally isolate a rare level in one arm
            fit = fit_propensity(dm, ridge=1e-6)
        keep = trim_overlap(fit, dm, scenario.trim)
        design = match(fit, dm, scenario.k, scenario.exact_on, scenario.caliper, retained=keep)
        if not design.sets:
            raise MatchingError(f"no matched sets in {g}")
        width = 1 + scenario.k
        rows = np.full((len(design), width), -1)
        for i, s in enumerate(design.sets):
            members = [int(s.treated_id)] + [int(c) for c in s.control_ids]
            rows[i, : len(members)] = members
        out[g] = {}
        for name, values in draw.outcomes.items():
            Y = np.where(rows >= 0, values[np.maximum(rows, 0)], np.nan)
            out[g][name] = OutcomeSample.from_array(Y, name, g, kinds[name])
    return out


def _mean_difference(sample: OutcomeSample) -> float:
    return float(np.mean([t - np.mean(c) for t, c in sample.sets])) if sample.sets else 0.0


@dataclass
class ReplicateOutcome:
    lower_bounds: np.ndarray  # per outcome
    replicable: np.ndarray
    noncover: dict[str, tuple[int, int]]  # subgroup -> (non-covering, constructed)
    baseline_bounds: np.ndarray


def run_turnover(samples: Mapping[str, Mapping[str, OutcomeSample]], outcomes: Sequence[str],
                 scenario: Scenario, planner: str | None = None) -> ReplicateOutcome:
    """Scripted turnover on already-matched samples."""
    planner = planner or scenario.planner
    confirmer = SUBGROUPS[1 - SUBGROUPS.index(planner)]
    session = TurnoverSession(outcomes, scenario.alpha, planner, confirmer)
    plan = GuardedOutcomes(session.state, planner, "planner", samples[planner])
    conf = GuardedOutcomes(session.state, confirmer, "confirmer", samples[confirmer])
    session.run_step1(plan, conf)
    hyps = []
    for k in outcomes:
        s = conf.sample(k, "explore")
        method = "mcnemar" if s.kind == "binary" else "weighted-M"
        hyps.append(Hypothesis(k, 1 if _mean_difference(s) > 0 else -1, method))
    session.run_step2(StepTwoRegistration(tuple(hyps), "scripted: signs of confirming-subgroup mean differences"), plan)
    intervals = session.fcr_intervals(plan, conf) if scenario.intervals else []
    report = session.report(intervals)
    effects = scenario.effects
    noncover: dict[str, tuple[int, int]] = {}
    for g in SUBGROUPS:
        ivs = [iv for iv in intervals if iv.subgroup == g]
        tau = [effects[iv.outcome][SUBGROUPS.index(g)] for iv in ivs]
        noncover[g] = (sum(not iv.covers(t) for iv, t in zip(ivs, tau)), len(ivs))
    lb = np.array([report.decision(k).lower_bound for k in outcomes])
    rep = np.array([report.decision(k).replicable for k in outcomes])
    base = cross_screening_bounds(samples, outcomes, scenario.alpha)
    return ReplicateOutcome(lb, rep, noncover, base)


def cross_screening_bounds(samples, outcomes: Sequence[str], alpha: float) -> np.ndarray:
    """Baseline: each subgroup screens (and orients) hypotheses for the other; Bonferroni at alpha/2."""
    tests = {g: {k: outcome_test(samples[g][k]) for k in outcomes} for g in SUBGROUPS}
    bounds = np.zeros(len(outcomes), dtype=int)
    for a, b in ((SUBGROUPS[0], SUBGROUPS[1]), (SUBGROUPS[1], SUBGROUPS[0])):
        directions = select_directions(tests[a])
        chosen = screen_hypotheses(tests[a], alpha)
        p = [tests[b][k].one_sided(directions[k]) for k in chosen]
        for i in bonferroni(p, alpha / 2):
            bounds[list(outcomes).index(chosen[i])] += 1
    return bounds


def _replicate(args) -> dict:
    scenario, seed_seq, planners = args
    rng = np.random.default_rng(seed_seq)
    outcomes = [o.name for o in scenario.generator.outcome_specs() if o.prespecified]
    # per-replicate "treated dropped" warnings would swamp the output
    mlog = logging.getLogger("dataturnover.matching")
    level = mlog.level
    mlog.setLevel(logging.ERROR)
    try:
        samples = matched_samples(scenario, rng)
        return {"ok": True, "results": {p: run_turnover(samples, outcomes, scenario, p) for p in planners}}
    except Exception as exc:  # noqa: BLE001 - a failed replicate is counted, not fatal
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
    finally:
        mlog.setLevel(level)


def _run(scenario: Scenario, planners: Sequence[str], n_jobs: int = 1) -> tuple[list[dict], float]:
    seeds = np.random.SeedSequence(scenario.seed).spawn(scenario.replicates)
    tasks = [(scenario, s, tuple(planners)) for s in seeds]
    start = time.perf_counter()
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replicate, tasks, chunksize=max(1, len(tasks) // (8 * n_jobs))))
    else:
        results = [_replicate(t) for t in tasks]
    return results, time.perf_counter() - start


# ---------------------------------------------------------------------------
# Results


def _se(p: float, n: int) -> float:
    return float(np.sqrt(p * (1 - p) / n)) if n else float("nan")


@dataclass
class SimResult:
    name: str
    outcomes: list[str]
    truth: dict[str, int]
    replicates: int
    failures: int
    fwer: float
    fwer_se: float
    power_any: dict[str, float]
    power_two: dict[str, float]
    replicable: dict[str, float]
    fcr: dict[str, float] = field(default_factory=dict)
    fcr_se: dict[str, float] = field(default_factory=dict)
    baseline_fwer: float = float("nan")
    baseline_power_two: dict[str, float] = field(default_factory=dict)
    runtime_seconds: float = 0.0
    errors: list[str] = field(default_factory=list, repr=False)
    # per-replicate series, kept for paired comparisons
    error_indicator: np.ndarray = field(default=None, repr=False)
    detections: np.ndarray = field(default=None, repr=False)

    @property
    def seconds_per_replicate(self) -> float:
        return self.runtime_seconds / max(self.replicates + self.failures, 1)

    def rows(self) -> list[dict]:
        out = [
            {"metric": "fwer", "outcome": "", "estimate": self.fwer, "se": self.fwer_se},
            {"metric": "baseline_fwer", "outcome": "", "estimate": self.baseline_fwer,
             "se": _se(self.baseline_fwer, self.replicates)},
        ]
        for k in self.outcomes:
            for metric, table in (("power_lb_ge1", self.power_any), ("power_lb_eq2", self.power_two),
                                  ("replicable", self.replicable), ("baseline_power_lb_eq2", self.baseline_power_two)):
                if k in table:
                    out.append({"metric": metric, "outcome": k, "estimate": table[k],
                                "se": _se(table[k], self.replicates)})
        for g, v in self.fcr.items():
            out.append({"metric": "fcr", "outcome": g, "estimate": v, "se": self.fcr_se.get(g, float("nan"))})
        out.append({"metric": "replicates", "outcome": "", "estimate": self.replicates, "se": ""})
        out.append({"metric": "failures", "outcome": "", "estimate": self.failures, "se": ""})
        out.append({"metric": "seconds_per_replicate", "outcome": "", "estimate": self.seconds_per_replicate, "se": ""})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["metric", "outcome", "estimate", "se"], lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"scenario {self.name}: {self.replicates} replicates ({self.failures} failed), "
            f"{self.seconds_per_replicate * 1000:.1f} ms/replicate",
            f"FWER  {self.fwer:.4f} (SE {self.fwer_se:.4f}); cross-screening baseline {self.baseline_fwer:.4f}",
            f"{'outcome':<14}{'truth':>6}{'P(lb>=1)':>10}{'P(lb=2)':>10}{'replic.':>9}{'baseline':>10}",
        ]
        for k in self.outcomes:
            lines.append(
                f"{k:<14}{self.truth[k]:>6}{self.power_any[k]:>10.3f}{self.power_two[k]:>10.3f}"
                f"{self.replicable[k]:>9.3f}{self.baseline_power_two.get(k, float('nan')):>10.3f}"
            )
        for g, v in self.fcr.items():
            lines.append(f"FCR {g:<8}{v:.4f} (SE {self.fcr_se[g]:.4f})")
        return "\n".join(lines) + "\n"


def _summarise(scenario: Scenario, results: list[dict], planner: str, runtime: float) -> SimResult:
    outcomes = [o.name for o in scenario.generator.outcome_specs() if o.prespecified]
    truth = scenario.truth()
    t = np.array([truth[k] for k in outcomes])
    good = [r["results"][planner] for r in results if r["ok"]]
    errors = [r["error"] for r in results if not r["ok"]]
    n = len(good)
    if n == 0:
        raise RuntimeError(f"every replicate failed; first error: {errors[0] if errors else 'n/a'}")
    lb = np.array([g.lower_bounds for g in good])
    rep = np.array([g.replicable for g in good])
    base = np.array([g.baseline_bounds for g in good])
    err = (lb > t).any(axis=1)
    fwer = float(err.mean())
    res = SimResult(
        name=f"{scenario.name} [{planner} plans]",
        outcomes=outcomes,
        truth=truth,
        replicates=n,
        failures=len(errors),
        fwer=fwer,
        fwer_se=_se(fwer, n),
        power_any={k: float((lb[:, i] >= 1).mean()) for i, k in enumerate(outcomes)},
        power_two={k: float((lb[:, i] == 2).mean()) for i, k in enumerate(outcomes)},
        replicable={k: float(rep[:, i].mean()) for i, k in enumerate(outcomes)},
        baseline_fwer=float((base > t).any(axis=1).mean()),
        baseline_power_two={k: float((base[:, i] == 2).mean()) for i, k in enumerate(outcomes)},
        runtime_seconds=runtime,
        errors=errors,
        error_indicator=err,
        detections=rep.sum(axis=1),
    )
    if scenario.intervals:
        total_v = np.zeros(n)
        total_r = np.zeros(n)
        for g in SUBGROUPS:
            v = np.array([x.noncover[g][0] for x in good], dtype=float)
            r = np.array([x.noncover[g][1] for x in good], dtype=float)
            ratio = v / np.maximum(r, 1)
            res.fcr[g] = float(ratio.mean())
            res.fcr_se[g] = float(ratio.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
            total_v += v
            total_r += r
        ratio = total_v / np.maximum(total_r, 1)
        res.fcr["overall"] = float(ratio.mean())
        res.fcr_se["overall"] = float(ratio.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return res


def run_scenario(s: Scenario, n_jobs: int = 1) -> SimResult:
    results, runtime = _run(s, (s.planner,), n_jobs)
    return _summarise(s, results, s.planner, runtime)


def fcr_coverage(s: Scenario, n_jobs: int = 1) -> SimResult:
    """Same as :func:`run_scenario` with selective intervals constructed and scored."""
    return run_scenario(replace(s, intervals=True), n_jobs)


@dataclass
class OrderingComparison:
    first: SimResult  # planner = NHS
    second: SimResult  # planner = HS
    difference: float  # mean replicable detections, NHS-planned minus HS-planned
    paired_se: float
    independent_se: float

    def summary(self) -> str:
        return (
            self.first.summary()
            + self.second.summary()
            + f"replicability detections per study, NHS-planned minus HS-planned: {self.difference:+.4f} "
            f"(paired SE {self.paired_se:.4f}; unpaired SE would be {self.independent_se:.4f})\n"
        )


def compare_orderings(s: Scenario, n_jobs: int = 1) -> OrderingComparison:
    """Both planner orders on common random numbers (same generated and matched data)."""
    results, runtime = _run(s, SUBGROUPS, n_jobs)
    a = _summarise(s, results, SUBGROUPS[0], runtime / 2)
    b = _summarise(s, results, SUBGROUPS[1], runtime / 2)
    d = a.detections.astype(float) - b.detections.astype(float)
    n = len(d)
    paired = float(d.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    indep = float(np.sqrt((a.detections.var(ddof=1) + b.detections.var(ddof=1)) / n)) if n > 1 else 0.0
    return OrderingComparison(a, b, float(d.mean()), paired, indep)
