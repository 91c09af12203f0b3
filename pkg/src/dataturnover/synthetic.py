"""Synthetic cohorts resembling the study's baseline covariates, for testing and simulation.

A generator config has one ``[covariate.<name>]`` section per covariate, one
``[outcome.<name>]`` section per outcome and a ``[subgroup.<label>]`` section
with the eligible control/treated sizes. Any key may be overridden for one
subgroup by suffixing it, e.g. ``mean.HS = 12.5`` or ``effect.NHS = 0.3``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Mapping

import numpy as np
from scipy.special import expit, logit

from dataturnover.cohort import (
    SUBGROUPS,
    Cohort,
    Covariate,
    CovariateSpec,
    OutcomeSpec,
    Subject,
)
from dataturnover.config import ConfigError, float_list, parse_bool, read_config, split_list


@dataclass(frozen=True)
class CovariateModel:
    name: str
    kind: str
    mean: float = 0.0
    sd: float = 1.0
    p: float = 0.5
    levels: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()
    assign: tuple[float, ...] = (0.0,)
    missing: float = 0.0
    balanced: bool = False
    digits: int | None = None

    def spec(self) -> CovariateSpec:
        return CovariateSpec(self.name, self.kind, self.levels)


@dataclass(frozen=True)
class OutcomeModel:
    name: str
    kind: str
    mean: float = 0.0
    sd: float = 1.0
    p: float = 0.5
    covariate_effect: float = 0.0
    effect: float = 0.0
    missing: float = 0.0
    codes: tuple[str, ...] = ()
    prespecified: bool = True

    def spec(self) -> OutcomeSpec:
        return OutcomeSpec(self.name, self.kind, self.codes, self.prespecified)


@dataclass(frozen=True)
class GeneratorSpec:
    """Per-subgroup resolved generator parameters."""

    sizes: Mapping[str, tuple[int, int]]
    covariates: Mapping[str, tuple[CovariateModel, ...]]
    outcomes: Mapping[str, tuple[OutcomeModel, ...]]
    ineligible: float = 0.0

    @property
    def subgroups(self) -> tuple[str, ...]:
        return tuple(g for g in SUBGROUPS if g in self.sizes)

    def covariate_specs(self) -> tuple[CovariateSpec, ...]:
        return tuple(c.spec() for c in self.covariates[self.subgroups[0]])

    def outcome_specs(self) -> tuple[OutcomeSpec, ...]:
        return tuple(o.spec() for o in self.outcomes[self.subgroups[0]])

    def outcome_names(self) -> list[str]:
        return [o.name for o in self.outcomes[self.subgroups[0]]]

    def with_effects(self, effects: Mapping[str, tuple[float, float] | float]) -> "GeneratorSpec":
        """Set treatment effects; values are ``(tau_NHS, tau_HS)`` or one shared tau."""
        outs = {}
        for g, models in self.outcomes.items():
            new = []
            for o in models:
                if o.name in effects:
                    tau = effects[o.name]
                    if isinstance(tau, tuple):
                        tau = tau[SUBGROUPS.index(g)]
                    o = replace(o, effect=float(tau))
                new.append(o)
            outs[g] = tuple(new)
        return replace(self, outcomes=outs)

    def with_sizes(self, sizes: Mapping[str, tuple[int, int]]) -> "GeneratorSpec":
        merged = dict(self.sizes)
        merged.update(sizes)
        return replace(self, sizes=merged)

    def effects(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in self.outcome_names():
            taus = []
            for g in SUBGROUPS:
                models = {o.name: o for o in self.outcomes.get(g, ())}
                taus.append(models[name].effect if name in models else 0.0)
            out[name] = tuple(taus)
        return out

    @classmethod
    def from_config(cls, path: str | os.PathLike | None = None, text: str | None = None) -> "GeneratorSpec":
        cfg = read_config(path, text=text)
        sizes = {}
        for g in SUBGROUPS:
            sec = f"subgroup.{g}"
            if cfg.has_section(sec):
                try:
                    sizes[g] = (cfg.getint(sec, "n_control"), cfg.getint(sec, "n_treated"))
                except (ValueError, KeyError) as exc:
                    raise ConfigError(f"[{sec}] needs integer n_control and n_treated") from exc
                if min(sizes[g]) < 0:
                    raise ConfigError(f"[{sec}] sizes must be non-negative")
        if not sizes:
            raise ConfigError("generator config declares no [subgroup.*] sections")
        ineligible = cfg.getfloat("generator", "ineligible", fallback=0.0)
        if ineligible < 0:
            raise ConfigError("ineligible fraction must be non-negative")
        covs = {g: [] for g in sizes}
        outs = {g: [] for g in sizes}
        for sec in cfg.sections():
            kind, _, name = sec.partition(".")
            if kind not in ("covariate", "outcome"):
                continue
            for g in sizes:
                get = _getter(cfg[sec], g)
                if kind == "covariate":
                    covs[g].append(_covariate_model(name, get))
                else:
                    outs[g].append(_outcome_model(name, get))
        return cls(
            sizes=sizes,
            covariates={g: tuple(v) for g, v in covs.items()},
            outcomes={g: tuple(v) for g, v in outs.items()},
            ineligible=ineligible,
        )

    @classmethod
    def default(cls) -> "GeneratorSpec":
        text = resources.files("dataturnover").joinpath("data/synthetic_wls.ini").read_text("utf-8")
        return cls.from_config(text=text)


def _getter(section, subgroup: str):
    def get(key: str, default=None):
        for k in (f"{key}.{subgroup}", key):
            if k in section:
                return section[k]
        return default

    return get


def _rate(name: str, key: str, value) -> float:
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise ConfigError(f"{name}: {key} = {v} is outside [0, 1]")
    return v


def _covariate_model(name: str, get) -> CovariateModel:
    kind = get("kind", "continuous")
    missing = _rate(name, "missing", get("missing", 0))
    assign = tuple(float_list(get("assign", "0")))
    digits = get("digits")
    if kind == "continuous":
        return CovariateModel(
            name, kind, mean=float(get("mean", 0)), sd=float(get("sd", 1)), assign=assign[:1],
            missing=missing, digits=None if digits is None else int(digits),
        )
    if kind == "binary":
        return CovariateModel(
            name, kind, p=_rate(name, "p", get("p", 0.5)), assign=assign[:1], missing=missing,
            balanced=parse_bool(get("balanced", "no")),
        )
    if kind == "categorical":
        levels = tuple(float_list(get("levels", "")))
        probs = tuple(_rate(name, "probs", p) for p in float_list(get("probs", "")))
        if not levels or len(probs) != len(levels):
            raise ConfigError(f"{name}: categorical needs matching levels and probs")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"{name}: probs must sum to 1")
        if len(assign) == 1:
            assign = assign * len(levels)
        if len(assign) != len(levels):
            raise ConfigError(f"{name}: assign needs one coefficient per level")
        return CovariateModel(name, kind, levels=levels, probs=probs, assign=assign, missing=missing)
    raise ConfigError(f"{name}: unknown covariate kind {kind!r}")


def _outcome_model(name: str, get) -> OutcomeModel:
    kind = get("kind", "continuous")
    if kind not in ("continuous", "binary"):
        raise ConfigError(f"{name}: unknown outcome kind {kind!r}")
    return OutcomeModel(
        name,
        kind,
        mean=float(get("mean", 0)),
        sd=float(get("sd", 1)),
        p=_rate(name, "p", get("p", 0.5)),
        covariate_effect=float(get("covariate_effect", 0)),
        effect=float(get("effect", 0)),
        missing=_rate(name, "missing", get("missing", 0)),
        codes=tuple(split_list(get("codes", ""))),
        prespecified=parse_bool(get("prespecified", "yes")),
    )


@dataclass
class SubgroupDraw:
    """Array form of one generated subgroup. NaN marks a missing value."""

    subgroup: str
    covariates: dict[str, np.ndarray]
    treated: np.ndarray
    outcomes: dict[str, np.ndarray]
    score: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.treated)


def draw_subgroup(spec: GeneratorSpec, subgroup: str, rng: np.random.Generator, n: int | None = None,
                  n_treated: int | None = None) -> SubgroupDraw:
    """Draw covariates, an exact-size treated set and potential-outcome-based responses."""
    n_control, n_t = spec.sizes[subgroup]
    if n_treated is not None:
        n_t = n_treated
    n = n_control + n_t if n is None else n
    models = spec.covariates[subgroup]
    covs: dict[str, np.ndarray] = {}
    index = np.zeros(n)
    for m in models:
        if m.kind == "continuous":
            x = rng.normal(m.mean, m.sd, n)
            if m.digits is not None:
                x = np.round(x, m.digits)
            if m.sd > 0:
                index += m.assign[0] * (x - m.mean) / m.sd
        elif m.kind == "binary":
            if m.balanced:
                x = np.zeros(n)
                x[: int(round(n * m.p))] = 1.0
                x = rng.permutation(x)
            else:
                x = (rng.random(n) < m.p).astype(float)
            index += m.assign[0] * (x - m.p)
        else:
            pos = rng.choice(len(m.levels), size=n, p=np.asarray(m.probs))
            x = np.asarray(m.levels)[pos]
            index += np.asarray(m.assign)[pos]
        covs[m.name] = x
    weights = np.exp(index - index.max())
    treated = np.zeros(n, dtype=bool)
    if n_t:
        treated[rng.choice(n, size=n_t, replace=False, p=weights / weights.sum())] = True
    sd = index.std()
    score = (index - index.mean()) / sd if sd > 0 else np.zeros(n)
    outs: dict[str, np.ndarray] = {}
    z = treated.astype(float)
    for o in spec.outcomes[subgroup]:
        if o.kind == "continuous":
            y = o.mean + o.covariate_effect * score + o.sd * rng.standard_normal(n) + o.effect * z
        else:
            u = rng.random(n)
            y = (u < expit(logit(o.p) + o.covariate_effect * score + o.effect * z)).astype(float)
        if o.missing > 0:
            y = np.where(rng.random(n) < o.missing, np.nan, y)
        outs[o.name] = y
    for m in models:
        if m.missing > 0:
            covs[m.name] = np.where(rng.random(n) < m.missing, np.nan, covs[m.name])
    return SubgroupDraw(subgroup, covs, treated, outs, score)


def generate_synthetic(spec: GeneratorSpec | str | os.PathLike, seed: int) -> Cohort:
    """Generate a full cohort, including records that fail eligibility.

    Eligible subjects come out in the exact configured control/treated counts;
    ``ineligible`` adds that fraction again as records violating one
    eligibility rule each.
    """
    if not isinstance(spec, GeneratorSpec):
        spec = GeneratorSpec.from_config(spec)
    rng = np.random.default_rng(seed)
    subjects: list[Subject] = []
    cov_specs = spec.covariate_specs()
    out_specs = spec.outcome_specs()
    counter = 0
    for g in spec.subgroups:
        n_control, n_t = spec.sizes[g]
        n_elig = n_control + n_t
        n_bad = int(round(spec.ineligible * n_elig))
        draw = draw_subgroup(spec, g, rng)
        extra = draw_subgroup(spec, g, rng, n=n_bad, n_treated=0) if n_bad else None
        reasons = rng.integers(0, 5, n_bad)
        for block, bad in ((draw, False), (extra, True)):
            if block is None:
                continue
            for i in range(len(block)):
                counter += 1
                subgroup, phone, mail = g, True, True
                if block.treated[i]:
                    relation, drinkers = "father", 1
                else:
                    relation, drinkers = "none", 0
                if bad:
                    r = reasons[i]
                    if r == 0:
                        phone = False
                    elif r == 1:
                        mail = False
                    elif r == 2:
                        relation, drinkers = "father", 2
                    elif r == 3:
                        relation, drinkers = "other", 1
                    else:
                        subgroup = None
                subjects.append(
                    Subject(
                        id=f"{counter:06d}",
                        subgroup=subgroup,
                        treated=None,
                        covariates=tuple(
                            Covariate(c.name, c.kind, _opt(block.covariates[c.name][i])) for c in cov_specs
                        ),
                        outcomes={o.name: _opt(block.outcomes[o.name][i]) for o in out_specs},
                        completed_phone=phone,
                        completed_mail=mail,
                        reported_drinkers=drinkers,
                        reported_relation=relation,
                    )
                )
    return Cohort(tuple(subjects), cov_specs, out_specs)


def _opt(v) -> float | None:
    v = float(v)
    return None if np.isnan(v) else v
