"""Data turnover: one subpopulation plans the test of the other, and vice versa.

Step 1 uses the planning subpopulation (subpopulation 1) to choose alternative
directions and a hypothesis family for the confirming subpopulation
(subpopulation 2), which is then tested with Holm at alpha/2. Step 2 lets the
analyst explore subpopulation 2 and register any one-sided tests for
subpopulation 1, again run at alpha/2. Step 3 adds up rejections into lower
bounds on the number of non-null subpopulations per outcome.

Outcome values are only reachable through :class:`GuardedOutcomes`, which
checks the session stage before every read and writes the audit trail.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from dataturnover.config import read_config
from dataturnover.inference import (
    EffectInterval,
    InferenceError,
    OutcomeSample,
    OutcomeTest,
    invert_ci,
    mcnemar_pvalues,
    m_statistic_pvalues,
    outcome_test,
)
from dataturnover.stages import ChainError, StageLog

STAGES = ("init", "step1_committed", "step2_registered", "complete")
METHODS = ("weighted-M", "mcnemar")


class ProtocolViolation(RuntimeError):
    """Out-of-order access to outcome data or to a committed stage."""


class TurnoverError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Decision rules


def select_directions(tests: Mapping[str, OutcomeTest]) -> dict[str, int]:
    """+1 (right-sided) when the right p-value is strictly smaller, else -1."""
    return {k: 1 if t.p_right < t.p_left else -1 for k, t in tests.items()}


def screen_hypotheses(tests: Mapping[str, OutcomeTest], alpha: float) -> list[str]:
    """Outcomes whose smaller one-sided p-value is below alpha/2.

    Falls back to the single outcome with the smallest such p-value (first in
    order on ties) when none qualifies.
    """
    if not 0 < alpha < 1:
        raise TurnoverError("alpha must lie in (0, 1)")
    if not tests:
        raise TurnoverError("no outcomes to screen")
    pmin = {k: min(t.p_right, t.p_left) for k, t in tests.items()}
    chosen = [k for k, p in pmin.items() if p < alpha / 2]
    if chosen:
        return chosen
    best = min(pmin.values())
    return [next(k for k, p in pmin.items() if p == best)]


def holm(pvalues: Sequence[float], level: float) -> list[int]:
    """Holm's step-down procedure; returns sorted indices of rejected hypotheses."""
    if not 0 < level < 1:
        raise TurnoverError("level must lie in (0, 1)")
    if len(pvalues) == 0:
        raise TurnoverError("holm needs at least one p-value")
    for p in pvalues:
        if not 0 <= p <= 1 or math.isnan(p):
            raise TurnoverError(f"p-value {p!r} outside [0, 1]")
    m = len(pvalues)
    order = sorted(range(m), key=lambda i: pvalues[i])
    rejected = []
    for rank, i in enumerate(order):
        if pvalues[i] > level / (m - rank):
            break
        rejected.append(i)
    return sorted(rejected)


holm.controls_fwer = True  # type: ignore[attr-defined]


def bonferroni(pvalues: Sequence[float], level: float) -> list[int]:
    m = len(pvalues)
    return [i for i, p in enumerate(pvalues) if p <= level / m]


bonferroni.controls_fwer = True  # type: ignore[attr-defined]


def fcr_levels(h_tested: int, r_selected: int, alpha: float) -> float:
    """Confidence level ``1 - r * alpha / (2h)`` for intervals on selected parameters."""
    if h_tested < 1 or r_selected < 1:
        raise TurnoverError("need at least one tested and one selected parameter")
    if r_selected > h_tested:
        raise TurnoverError(f"selected count {r_selected} exceeds tested count {h_tested}")
    return 1 - r_selected * alpha / (2 * h_tested)


# ---------------------------------------------------------------------------
# Committed artifacts


@dataclass(frozen=True)
class StepOneCommitment:
    directions: Mapping[str, int]
    selected: tuple[str, ...]
    screening_pvalues: Mapping[str, float]
    alpha: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "directions": dict(self.directions),
            "selected": list(self.selected),
            "screening_pvalues": {k: repr(v) for k, v in self.screening_pvalues.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepOneCommitment":
        return cls(
            {k: int(v) for k, v in d["directions"].items()},
            tuple(d["selected"]),
            {k: float(v) for k, v in d["screening_pvalues"].items()},
            float(d["alpha"]),
        )


@dataclass(frozen=True)
class Hypothesis:
    name: str
    direction: int
    method: str = "weighted-M"
    novel: bool = False

    def __post_init__(self):
        if self.direction not in (1, -1):
            raise TurnoverError(f"{self.name}: direction must be +1 or -1")
        if self.method not in METHODS:
            raise TurnoverError(f"{self.name}: unknown test method {self.method!r}")


@dataclass(frozen=True)
class StepTwoRegistration:
    hypotheses: tuple[Hypothesis, ...]
    rationale: str = ""

    @property
    def m_novel(self) -> int:
        return sum(h.novel for h in self.hypotheses)

    def to_dict(self) -> dict:
        return {
            "rationale": self.rationale,
            "hypotheses": [
                {"name": h.name, "direction": h.direction, "method": h.method, "novel": h.novel}
                for h in self.hypotheses
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepTwoRegistration":
        return cls(tuple(Hypothesis(**h) for h in d["hypotheses"]), d.get("rationale", ""))

    @classmethod
    def from_config(cls, path: str | os.PathLike | None = None, text: str | None = None,
                    prespecified: Sequence[str] = (), kinds: Mapping[str, str] | None = None) -> "StepTwoRegistration":
        """Parse ``[hypothesis.<outcome>]`` sections with ``direction`` and ``method`` keys.

        Outcomes outside ``prespecified`` are registered as novel. Without a
        ``method`` key, binary outcomes (per ``kinds``) get McNemar and the
        rest the weighted M-statistic.
        """
        kinds = kinds or {}
        cfg = read_config(path, text=text)
        rationale = cfg.get("registration", "rationale", fallback="")
        hyps = []
        for sec in cfg.sections():
            kind, _, name = sec.partition(".")
            if kind != "hypothesis":
                continue
            raw = cfg.get(sec, "direction", fallback="")
            try:
                direction = int(raw.replace("right", "1").replace("left", "-1"))
            except ValueError:
                raise TurnoverError(f"{name}: direction must be +1/-1 or right/left, got {raw!r}") from None
            default = "mcnemar" if kinds.get(name) == "binary" else "weighted-M"
            method = cfg.get(sec, "method", fallback=default)
            hyps.append(Hypothesis(name, direction, method, name not in prespecified))
        return cls(tuple(hyps), rationale)


@dataclass(frozen=True)
class OutcomeDecision:
    outcome: str
    lower_bound: int
    replicable: bool
    global_null_rejected: bool
    direction_sub1: int | None
    direction_sub2: int | None
    rejected_sub1: bool
    rejected_sub2: bool
    novel: bool = False


@dataclass(frozen=True)
class DecisionReport:
    decisions: tuple[OutcomeDecision, ...]
    S_sub2: tuple[str, ...]
    S_sub1: tuple[str, ...]
    alpha: float
    planner: str = "NHS"
    confirmer: str = "HS"
    fcr_intervals: tuple[EffectInterval, ...] = ()

    def decision(self, outcome: str) -> OutcomeDecision:
        for d in self.decisions:
            if d.outcome == outcome:
                return d
        raise KeyError(outcome)

    @property
    def lower_bounds(self) -> dict[str, int]:
        return {d.outcome: d.lower_bound for d in self.decisions}

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "planner": self.planner,
            "confirmer": self.confirmer,
            "S_sub1": list(self.S_sub1),
            "S_sub2": list(self.S_sub2),
            "decisions": [d.__dict__.copy() for d in self.decisions],
            "fcr_intervals": [
                {k: (repr(v) if isinstance(v, float) else v) for k, v in iv.__dict__.items()}
                for iv in self.fcr_intervals
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([
            "outcome", "novel", "lower_bound", "replicable", "global_null_rejected",
            f"direction_{self.planner}", f"direction_{self.confirmer}",
            f"rejected_{self.planner}", f"rejected_{self.confirmer}",
        ])
        for d in self.decisions:
            w.writerow([
                d.outcome, int(d.novel), d.lower_bound, int(d.replicable), int(d.global_null_rejected),
                "" if d.direction_sub1 is None else d.direction_sub1,
                "" if d.direction_sub2 is None else d.direction_sub2,
                int(d.rejected_sub1), int(d.rejected_sub2),
            ])
        return buf.getvalue()

    def intervals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["outcome", "subgroup", "estimate", "lower", "upper", "level", "diagnostic"])
        for iv in self.fcr_intervals:
            w.writerow([iv.outcome, iv.subgroup, repr(iv.estimate), repr(iv.lower), repr(iv.upper),
                        repr(iv.level), iv.diagnostic])
        return buf.getvalue()

    def to_text(self) -> str:
        sign = {1: "+", -1: "-", None: "."}
        lines = [
            f"Data turnover report (alpha = {self.alpha:g}; plan on {self.planner}, confirm on {self.confirmer})",
            "",
            f"{'outcome':<24}{'l_hat':>6}  {'dir ' + self.planner:>8}{'dir ' + self.confirmer:>8}  verdict",
        ]
        for d in self.decisions:
            if d.replicable:
                verdict = "replicable"
            elif d.global_null_rejected:
                verdict = "global null rejected"
            else:
                verdict = "-"
            tag = " (novel)" if d.novel else ""
            lines.append(
                f"{d.outcome + tag:<24}{d.lower_bound:>6}  {sign[d.direction_sub1]:>8}{sign[d.direction_sub2]:>8}  {verdict}"
            )
        if self.fcr_intervals:
            lines += ["", "Selective (FCR-adjusted) intervals for the additive effect:"]
            for iv in self.fcr_intervals:
                note = f"  [{iv.diagnostic}]" if iv.diagnostic else ""
                lines.append(
                    f"  {iv.outcome:<20}{iv.subgroup:<5} {iv.estimate: .4g}  [{iv.lower: .4g}, {iv.upper: .4g}]"
                    f"  level {iv.level:.4f}{note}"
                )
        return "\n".join(lines) + "\n"


def assemble_report(
    S_sub2: Sequence[str],
    S_sub1: Sequence[str],
    directions_sub2: Mapping[str, int],
    directions_sub1: Mapping[str, int],
    alpha: float,
    outcomes: Sequence[str],
    novel: Sequence[str] = (),
    planner: str = "NHS",
    confirmer: str = "HS",
    intervals: Sequence[EffectInterval] = (),
) -> DecisionReport:
    """Lower bounds ``l_hat(k) = 1[k in S_sub1] + 1[k in S_sub2]`` and verdicts.

    ``directions_sub2`` are the Step-1 directions chosen for the confirming
    subpopulation; ``directions_sub1`` those registered in Step 2.
    """
    s1, s2 = set(S_sub1), set(S_sub2)
    names = list(outcomes) + [n for n in novel if n not in outcomes]
    decisions = []
    for k in names:
        is_novel = k not in outcomes
        in1, in2 = k in s1, (k in s2) and not is_novel
        lb = int(in1) + int(in2)
        d1, d2 = directions_sub1.get(k), directions_sub2.get(k)
        decisions.append(OutcomeDecision(k, lb, lb == 2 and d1 == d2, lb >= 1, d1, d2, in1, in2, is_novel))
    return DecisionReport(
        tuple(decisions),
        tuple(k for k in outcomes if k in s2),
        tuple(k for k in names if k in s1),
        alpha,
        planner,
        confirmer,
        tuple(intervals),
    )


# ---------------------------------------------------------------------------
# Stage machine and guarded data access


class TurnoverState:
    """Forward-only stage machine over a :class:`StageLog`."""

    def __init__(self, log: StageLog | None = None):
        self.log = log if log is not None else StageLog()
        self.stage = "init"
        for name in self.log.names:
            if name in STAGES:
                self.stage = name

    def advance(self, new: str, payload: dict, artifacts: dict[str, str] | None = None) -> str:
        if STAGES.index(new) != STAGES.index(self.stage) + 1:
            self.log.audit("stage-transition", False, frm=self.stage, to=new)
            raise ProtocolViolation(f"cannot move from stage {self.stage!r} to {new!r}")
        try:
            digest = self.log.commit(new, payload, artifacts)
        except ChainError as exc:
            self.log.audit("stage-rewrite", False, stage=new)
            raise ProtocolViolation(str(exc)) from exc
        self.stage = new
        return digest

    def at_least(self, stage: str) -> bool:
        return STAGES.index(self.stage) >= STAGES.index(stage)

    @property
    def hashes(self) -> dict[str, str]:
        return {n: self.log.hash_of(n) for n in self.log.names}

    @property
    def audit_log(self) -> list[dict]:
        return self.log.audit_entries


class GuardedOutcomes:
    """Stage-checked access to one subpopulation's matched outcome samples.

    ``role="planner"`` (subpopulation 1) is readable during Step 1 and again
    once Step 2 is registered; ``role="confirmer"`` (subpopulation 2) only after
    the Step-1 commitment.
    """

    def __init__(self, state: TurnoverState, subgroup: str, role: str,
                 loader: Callable[[str], OutcomeSample] | Mapping[str, OutcomeSample]):
        if role not in ("planner", "confirmer"):
            raise ValueError(f"unknown role {role!r}")
        self.state = state
        self.subgroup = subgroup
        self.role = role
        self._loader = loader if callable(loader) else loader.__getitem__

    def allowed(self) -> bool:
        st = self.state.stage
        if self.role == "confirmer":
            return st != "init"
        return st != "step1_committed"

    def sample(self, outcome: str, purpose: str = "read") -> OutcomeSample:
        ok = self.allowed()
        self.state.log.audit(
            "outcome-read", ok, subgroup=self.subgroup, role=self.role, outcome=outcome,
            stage=self.state.stage, purpose=purpose,
        )
        if not ok:
            if self.role == "confirmer":
                msg = f"{self.subgroup} outcomes are sealed until the Step-1 commitment"
            else:
                msg = f"{self.subgroup} outcomes are sealed until the Step-2 registration is committed"
            raise ProtocolViolation(msg)
        return self._loader(outcome)


def _run_test(sample: OutcomeSample, method: str | None = None) -> OutcomeTest:
    if method is None:
        return outcome_test(sample)
    if method == "mcnemar":
        return mcnemar_pvalues(sample)
    return m_statistic_pvalues(sample)


class TurnoverSession:
    """Drives Steps 1-3 for one study.

    ``outcomes`` is the ordered list of pre-specified outcomes. ``planner`` is
    the subpopulation used for Step-1 planning (subpopulation 1).
    """

    def __init__(self, outcomes: Sequence[str], alpha: float = 0.05, planner: str = "NHS",
                 confirmer: str = "HS", state: TurnoverState | None = None,
                 step2_rule: Callable[[Sequence[float], float], list[int]] = holm):
        if not 0 < alpha < 1:
            raise TurnoverError("alpha must lie in (0, 1)")
        if not getattr(step2_rule, "controls_fwer", False):
            raise TurnoverError("Step-2 rule must declare FWER control at its level (controls_fwer = True)")
        self.outcomes = list(outcomes)
        self.alpha = alpha
        self.planner = planner
        self.confirmer = confirmer
        self.state = state or TurnoverState()
        self.step2_rule = step2_rule
        self.commitment: StepOneCommitment | None = None
        self.S_sub2: tuple[str, ...] = ()
        self.tested_sub2: dict[str, float] = {}
        self.registration: StepTwoRegistration | None = None
        self.S_sub1: tuple[str, ...] = ()
        self.tested_sub1: dict[str, float] = {}

    # -- Step 1 -------------------------------------------------------------
    def plan(self, planner_data: GuardedOutcomes) -> dict[str, OutcomeTest]:
        """Pre-specified tests on the planning subpopulation."""
        return {k: _run_test(planner_data.sample(k, "step1-plan")) for k in self.outcomes}

    def commit_step1(self, tests_sub1: Mapping[str, OutcomeTest],
                     artifacts: dict[str, str] | None = None) -> StepOneCommitment:
        if self.state.stage != "init":
            self.state.log.audit("step1-commit", False, stage=self.state.stage)
            raise ProtocolViolation(f"Step 1 already committed (stage {self.state.stage!r})")
        missing = [k for k in self.outcomes if k not in tests_sub1]
        if missing:
            raise TurnoverError(f"missing planning tests for {missing}")
        tests = {k: tests_sub1[k] for k in self.outcomes}
        commitment = StepOneCommitment(
            select_directions(tests),
            tuple(screen_hypotheses(tests, self.alpha)),
            {k: t.p_min for k, t in tests.items()},
            self.alpha,
        )
        self.state.advance("step1_committed", commitment.to_dict(), artifacts)
        self.commitment = commitment
        return commitment

    def test_step1(self, confirmer_data: GuardedOutcomes) -> tuple[str, ...]:
        """Holm at alpha/2 on the confirming subpopulation over the selected outcomes."""
        c = self.commitment
        if c is None:
            raise ProtocolViolation("Step 1 has not been committed")
        pvals = {}
        for k in c.selected:
            test = _run_test(confirmer_data.sample(k, "step1-confirm"))
            pvals[k] = test.one_sided(c.directions[k])
        keys = list(c.selected)
        rejected = holm([pvals[k] for k in keys], self.alpha / 2)
        self.tested_sub2 = pvals
        self.S_sub2 = tuple(keys[i] for i in rejected)
        self.state.log.audit("step1-result", True, rejected=list(self.S_sub2))
        return self.S_sub2

    def run_step1(self, tests_sub1: Mapping[str, OutcomeTest] | GuardedOutcomes,
                  confirmer_data: GuardedOutcomes) -> tuple[StepOneCommitment, tuple[str, ...]]:
        if isinstance(tests_sub1, GuardedOutcomes):
            tests_sub1 = self.plan(tests_sub1)
        commitment = self.commit_step1(tests_sub1)
        return commitment, self.test_step1(confirmer_data)

    # -- Step 2 -------------------------------------------------------------
    def register_step2(self, registration: StepTwoRegistration, available: Sequence[str] | None = None,
                       artifacts: dict[str, str] | None = None) -> None:
        if self.state.stage != "step1_committed":
            self.state.log.audit("step2-register", False, stage=self.state.stage)
            raise ProtocolViolation(f"Step 2 can only be registered after Step 1 (stage {self.state.stage!r})")
        if not registration.hypotheses:
            raise TurnoverError("Step-2 registration is empty")
        names = [h.name for h in registration.hypotheses]
        if len(set(names)) != len(names):
            raise TurnoverError("duplicate hypotheses in registration")
        if available is not None:
            absent = [n for n in names if n not in available]
            if absent:
                raise TurnoverError(f"registered outcomes not in the cohort: {absent}")
        self.state.advance("step2_registered", registration.to_dict(), artifacts)
        self.registration = registration

    def test_step2(self, planner_data: GuardedOutcomes) -> tuple[str, ...]:
        reg = self.registration
        if reg is None:
            raise ProtocolViolation("Step 2 has not been registered")
        pvals = {}
        for h in reg.hypotheses:
            test = _run_test(planner_data.sample(h.name, "step2-test"), h.method)
            pvals[h.name] = test.one_sided(h.direction)
        keys = [h.name for h in reg.hypotheses]
        rejected = self.step2_rule([pvals[k] for k in keys], self.alpha / 2)
        self.tested_sub1 = pvals
        self.S_sub1 = tuple(keys[i] for i in rejected)
        self.state.log.audit("step2-result", True, rejected=list(self.S_sub1))
        return self.S_sub1

    def run_step2(self, registration: StepTwoRegistration, planner_data: GuardedOutcomes,
                  available: Sequence[str] | None = None) -> tuple[str, ...]:
        self.register_step2(registration, available)
        return self.test_step2(planner_data)

    # -- Step 3 -------------------------------------------------------------
    def fcr_intervals(self, planner_data: GuardedOutcomes | None = None,
                      confirmer_data: GuardedOutcomes | None = None) -> list[EffectInterval]:
        """Intervals at level ``1 - r alpha / (2h)`` for rejected continuous outcomes in each subgroup."""
        out: list[EffectInterval] = []
        c, reg = self.commitment, self.registration
        if confirmer_data is not None and c is not None and self.S_sub2:
            level = fcr_levels(len(c.selected), len(self.S_sub2), self.alpha)
            out += self._intervals(confirmer_data, self.S_sub2, level)
        if planner_data is not None and reg is not None and self.S_sub1:
            level = fcr_levels(len(reg.hypotheses), len(self.S_sub1), self.alpha)
            out += self._intervals(planner_data, self.S_sub1, level)
        return out

    @staticmethod
    def _intervals(data: GuardedOutcomes, names: Sequence[str], level: float) -> list[EffectInterval]:
        out = []
        for k in names:
            sample = data.sample(k, "fcr-interval")
            if sample.kind != "continuous":
                continue
            try:
                out.append(invert_ci(sample, level))
            except InferenceError:
                continue
        return out

    def report(self, intervals: Sequence[EffectInterval] = (), artifacts: dict[str, str] | None = None) -> DecisionReport:
        if self.state.stage != "step2_registered":
            raise ProtocolViolation(f"report requires a completed Step 2 (stage {self.state.stage!r})")
        reg = self.registration
        assert reg is not None and self.commitment is not None
        rep = assemble_report(
            self.S_sub2,
            self.S_sub1,
            self.commitment.directions,
            {h.name: h.direction for h in reg.hypotheses},
            self.alpha,
            self.outcomes,
            [h.name for h in reg.hypotheses if h.novel],
            self.planner,
            self.confirmer,
            intervals,
        )
        self.state.advance("complete", rep.to_dict(), artifacts)
        return rep
