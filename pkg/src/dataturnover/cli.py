"""Staged command-line front end.

One study lives in one run directory. Each command checks the stage hash
chain, takes an exclusive lock, runs one step and commits its artifacts.
Outcome data are kept in ``sealed/`` and reach analysis code only through
stage-checked readers.

Exit codes: 0 success, 1 user error (bad input, missing prerequisite stage),
2 protocol violation (out-of-order outcome access, rewriting a committed
stage, broken hash chain).
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import replace
from importlib.resources import files
from pathlib import Path
from typing import Sequence

import numpy as np

from dataturnover import __version__
from dataturnover.cohort import (
    SUBGROUPS,
    Cohort,
    CohortError,
    OutcomeSpec,
    Schema,
    apply_eligibility,
    impute_from_siblings,
    ingest_csv,
    write_csv,
)
from dataturnover.config import ConfigError, format_list, parse_bool, read_config, split_list
from dataturnover.inference import RESULT_FIELDS, InferenceError, OutcomeSample, result_row
from dataturnover.matching import (
    BalanceTable,
    MatchedDesign,
    MatchingError,
    balance_table,
    build_design_matrix,
    effective_sample_size,
    fit_propensity,
    match,
    trim_overlap,
)
from dataturnover.plotting import LovePlotSpec, PlotError, render_intervals, render_love_plot
from dataturnover.simulation import Scenario, compare_orderings, run_scenario
from dataturnover.stages import ChainError, StageLog, append_audit, audit_entry, sha256_file
from dataturnover.synthetic import GeneratorSpec, generate_synthetic
from dataturnover.turnover import (
    GuardedOutcomes,
    ProtocolViolation,
    StepOneCommitment,
    StepTwoRegistration,
    TurnoverError,
    TurnoverSession,
    TurnoverState,
)

EXIT_OK, EXIT_USER, EXIT_PROTOCOL = 0, 1, 2
ENV_RUN_DIR = "DATATURNOVER_RUN_DIR"

DEFAULT_SETTINGS = {
    "alpha": "0.05",
    "planner": "NHS",
    "k": "3",
    "caliper": "0.2",
    "trim": "0.5",
    "exact_on": "sex",
    "method": "optimal",
    "seed": "0",
    "timestamps": "yes",
}

log = logging.getLogger("dataturnover")


class UserError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run directory


class RunDir:
    def __init__(self, root: str | os.PathLike, timestamps: bool | None = None):
        self.root = Path(root)
        ini = self.root / "run.ini"
        if not ini.exists():
            raise UserError(f"{self.root} is not an initialized run directory (run `dataturnover init` first)")
        cfg = read_config(ini)
        self.settings = dict(DEFAULT_SETTINGS)
        if cfg.has_section("run"):
            self.settings.update(cfg.items("run"))
        if timestamps is None:
            timestamps = parse_bool(self.settings["timestamps"])
        self.log = StageLog(self.root, timestamps=timestamps)

    # settings
    @property
    def alpha(self) -> float:
        return float(self.settings["alpha"])

    @property
    def planner(self) -> str:
        return self.settings["planner"]

    @property
    def confirmer(self) -> str:
        return SUBGROUPS[1 - SUBGROUPS.index(self.planner)]

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, stage: str, command: str, producer: str) -> None:
        if not self.log.has(stage):
            raise UserError(f"`{command}` needs the '{stage}' stage; run `dataturnover {producer}` first")

    def refuse_rerun(self, stage: str, command: str) -> None:
        if self.log.has(stage):
            self.log.audit("stage-rewrite", False, stage=stage, command=command)
            raise ProtocolViolation(f"stage '{stage}' is already committed; `{command}` cannot be re-run")

    def artifacts(self, paths: Sequence[Path]) -> dict[str, str]:
        return {p.relative_to(self.root).as_posix(): sha256_file(p) for p in paths}

    def commit(self, stage: str, payload: dict, paths: Sequence[Path] = ()) -> None:
        self.log.commit(stage, payload, self.artifacts(paths))

    # sealed outcome data
    def registry(self) -> list[OutcomeSpec]:
        cfg = read_config(self.root / "cohort" / "outcomes.ini")
        out = []
        for section, pre in (("outcomes", True), ("novel", False)):
            if cfg.has_section(section):
                for name, decl in cfg.items(section):
                    kind, _, codes = decl.partition("|")
                    out.append(OutcomeSpec(name, kind.strip(), tuple(split_list(codes)), pre))
        return out

    def design(self, g: str) -> MatchedDesign:
        return MatchedDesign.read_csv(self.root / "design" / f"{g}-sets.csv", g)

    def loader(self, g: str):
        kinds = {o.name: o.kind for o in self.registry()}
        cache: dict[str, dict[str, float]] = {}

        def load(outcome: str) -> OutcomeSample:
            if outcome not in kinds:
                raise UserError(f"unknown outcome {outcome!r}")
            if not cache:
                with open(self.root / "sealed" / f"outcomes-{g}.csv", newline="", encoding="utf-8") as fh:
                    for row in csv.DictReader(fh):
                        cache[row["id"]] = {k: (np.nan if v == "" else float(v)) for k, v in row.items() if k != "id"}
            design = self.design(g)
            width = 1 + max((len(s.control_ids) for s in design.sets), default=0)
            Y = np.full((len(design), width), np.nan)
            for i, s in enumerate(design.sets):
                for j, sid in enumerate((s.treated_id, *s.control_ids)):
                    Y[i, j] = cache[sid][outcome]
            return OutcomeSample.from_array(Y, outcome, g, kinds[outcome])

        return load

    def session(self) -> tuple[TurnoverSession, GuardedOutcomes, GuardedOutcomes]:
        outcomes = [o.name for o in self.registry() if o.prespecified]
        state = TurnoverState(self.log)
        sess = TurnoverSession(outcomes, self.alpha, self.planner, self.confirmer, state)
        lg = self.log
        if lg.has("step1_committed"):
            sess.commitment = StepOneCommitment.from_dict(lg.get("step1_committed"))
        if lg.has("step1_results"):
            p = lg.get("step1_results")
            sess.S_sub2 = tuple(p["rejected"])
            sess.tested_sub2 = {k: float(v) for k, v in p["pvalues"].items()}
        if lg.has("step2_registered"):
            sess.registration = StepTwoRegistration.from_dict(lg.get("step2_registered"))
        if lg.has("step2_results"):
            p = lg.get("step2_results")
            sess.S_sub1 = tuple(p["rejected"])
            sess.tested_sub1 = {k: float(v) for k, v in p["pvalues"].items()}
        plan = GuardedOutcomes(state, self.planner, "planner", self.loader(self.planner))
        conf = GuardedOutcomes(state, self.confirmer, "confirmer", self.loader(self.confirmer))
        return sess, plan, conf


@contextmanager
def _locked(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    fh = open(root / ".lock", "a+")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise UserError(f"another dataturnover command is running in {root}") from None
        fh.seek(0)
        fh.truncate()
        fh.write(f"{os.getpid()}\n")
        fh.flush()
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def _write_rows(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v))


# ---------------------------------------------------------------------------
# Commands


def cmd_init(args) -> int:
    root = Path(args.run_dir)
    if (root / "stages").exists() and any((root / "stages").iterdir()):
        lg = StageLog(root)
        lg.audit("stage-rewrite", False, stage="init", command="init")
        raise ProtocolViolation(f"{root} is already initialized")
    settings = dict(DEFAULT_SETTINGS)
    if args.config:
        cfg = read_config(args.config)
        if cfg.has_section("run"):
            unknown = set(dict(cfg.items("run"))) - set(DEFAULT_SETTINGS)
            if unknown:
                raise ConfigError(f"unknown [run] settings: {sorted(unknown)}")
            settings.update(cfg.items("run"))
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    if args.no_timestamp:
        settings["timestamps"] = "no"
    if settings["planner"] not in SUBGROUPS:
        raise ConfigError(f"planner must be one of {SUBGROUPS}")
    alpha = float(settings["alpha"])
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    root.mkdir(parents=True, exist_ok=True)
    ini = root / "run.ini"
    ini.write_text("[run]\n" + "".join(f"{k} = {v}\n" for k, v in settings.items()), encoding="utf-8")
    run = RunDir(root)
    run.commit("init", {"settings": settings, "version": __version__}, [ini])
    print(f"initialized {root}")
    return EXIT_OK


def cmd_generate(args) -> int:
    spec = GeneratorSpec.from_config(args.config) if args.config else GeneratorSpec.default()
    effects = {}
    for item in args.effect or ():
        name, _, vals = item.partition("=")
        nums = [float(v) for v in split_list(vals)]
        if name not in spec.outcome_names() or len(nums) not in (1, 2):
            raise UserError(f"--effect expects outcome=tau or outcome=tau_NHS,tau_HS; got {item!r}")
        effects[name] = (nums[0], nums[-1])
    spec = spec.with_effects(effects)
    cohort = generate_synthetic(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schema = write_csv(cohort, out / "cohort.csv")
    schema.write(out / "schema.ini")
    truth = "[effects]\n" + "".join(f"{k} = {a!r}, {b!r}\n" for k, (a, b) in spec.effects().items())
    (out / "truth.ini").write_text(truth, encoding="utf-8")
    print(f"wrote {len(cohort)} records to {out / 'cohort.csv'} (schema {out / 'schema.ini'})")
    return EXIT_OK


def cmd_ingest(args, run: RunDir) -> int:
    run.require("init", "ingest", "init")
    run.refuse_rerun("cohort", "ingest")
    schema = Schema.from_config(args.schema)
    raw = ingest_csv(args.data, schema)
    fields = [] if args.impute_siblings == "none" else (
        [c.name for c in raw.covariate_specs] + ["subgroup", "treatment"]
        if args.impute_siblings == "all" else split_list(args.impute_siblings)
    )
    imputed = impute_from_siblings(raw, fields) if fields else raw
    cohort = apply_eligibility(imputed)
    if not cohort.outcome_registry:
        raise UserError("schema declares no outcomes")
    public = Cohort(tuple(replace(s, outcomes={}) for s in cohort.subjects), cohort.covariate_specs, ())
    cov_path = run.path("cohort", "covariates.csv")
    cov_schema = write_csv(public, cov_path)
    schema_path = run.path("cohort", "schema.ini")
    cov_schema.write(schema_path)
    reg_lines = []
    for section, pre in (("outcomes", True), ("novel", False)):
        group = [o for o in cohort.outcome_registry if o.prespecified == pre]
        if group:
            reg_lines.append(f"[{section}]")
            reg_lines += [f"{o.name} = {o.kind}" + (f" | {format_list(o.codes)}" if o.codes else "") for o in group]
            reg_lines.append("")
    reg_path = run.path("cohort", "outcomes.ini")
    reg_path.write_text("\n".join(reg_lines), encoding="utf-8")
    paths = [cov_path, schema_path, reg_path]
    names = [o.name for o in cohort.outcome_registry]
    for g in SUBGROUPS:
        p = run.path("sealed", f"outcomes-{g}.csv")
        rows = ([s.id] + [_fmt(s.outcomes.get(k)) for k in names] for s in cohort.subjects if s.subgroup == g)
        paths.append(_write_rows(p, ["id"] + names, rows))
    counts = cohort.counts()
    run.commit("cohort", {"records": len(raw), "eligible": len(cohort), "counts": counts,
                          "imputed_fields": fields, "source_sha256": sha256_file(args.data)}, paths)
    print(f"ingested {len(raw)} records; {len(cohort)} eligible")
    for g in SUBGROUPS:
        print(f"  {g}: {counts[g]['treated']} treated, {counts[g]['control']} control")
    return EXIT_OK


def _cohort(run: RunDir) -> Cohort:
    schema = Schema.from_config(run.root / "cohort" / "schema.ini")
    return ingest_csv(run.root / "cohort" / "covariates.csv", schema)


def _design_matrix(run: RunDir, cohort: Cohort, g: str):
    return build_design_matrix(cohort, g)


def cmd_match(args, run: RunDir) -> int:
    run.require("cohort", "match", "ingest")
    run.refuse_rerun("matched", "match")
    st = run.settings
    k = args.k if args.k is not None else int(st["k"])
    caliper = args.caliper if args.caliper is not None else float(st["caliper"])
    trim_c = args.trim if args.trim is not None else float(st["trim"])
    method = args.method or st["method"]
    exact_on = st["exact_on"] or None
    cohort = _cohort(run)
    payload = {"k": k, "caliper_mult": caliper, "trim_c": trim_c, "method": method, "exact_on": exact_on,
               "subgroups": {}}
    paths = []
    for g in SUBGROUPS:
        dm = _design_matrix(run, cohort, g)
        fit = fit_propensity(dm, ridge=args.ridge)
        keep = trim_overlap(fit, dm, trim_c)
        design = match(fit, dm, k, exact_on, caliper, retained=keep, method=method)
        sets_path = run.path("design", f"{g}-sets.csv")
        design.write_csv(sets_path)
        score_rows = ([sid, int(t), repr(float(s)), int(sid in keep)]
                      for sid, t, s in zip(dm.ids, dm.treated, fit.logit_scores))
        paths += [sets_path, _write_rows(run.path("design", f"{g}-scores.csv"),
                                         ["id", "treated", "logit", "retained"], score_rows)]
        ess = effective_sample_size(design)
        payload["subgroups"][g] = {
            "sets": len(design), "dropped_treated": list(design.dropped), "effective_sample_size": ess,
            "retained": len(keep), "converged": fit.converged, "iterations": fit.n_iter,
            "dropped_columns": list(fit.dropped), "total_distance": repr(design.total_distance),
        }
        print(f"{g}: {len(design)} matched sets (1:{k}), {len(design.dropped)} treated dropped, "
              f"effective sample size {ess:.1f}")
    run.commit("matched", payload, paths)
    return EXIT_OK


def cmd_balance(args, run: RunDir) -> int:
    run.require("matched", "balance", "match")
    run.refuse_rerun("balance", "balance")
    cohort = _cohort(run)
    paths = []
    worst = {}
    for g in SUBGROUPS:
        dm = _design_matrix(run, cohort, g)
        table = balance_table(run.design(g), dm)
        csv_path = run.path("balance", f"{g}-balance.csv")
        table.write_csv(csv_path)
        # the figure is drawn from the file just written so both carry identical numbers
        svg_path = run.path("balance", f"{g}-love.svg")
        render_love_plot(LovePlotSpec(BalanceTable.read_csv(csv_path, g), svg_path,
                                      title=f"Covariate balance, {g}"))
        paths += [csv_path, svg_path]
        worst[g] = max(r.post_match_diff for r in table.rows)
        print(f"{g}: largest post-match difference {worst[g]:.3f} ({csv_path}, {svg_path})")
    run.commit("balance", {"max_post_match_diff": {g: repr(v) for g, v in worst.items()}}, paths)
    return EXIT_OK


def cmd_step1(args, run: RunDir) -> int:
    run.require("matched", "step1", "match")
    run.refuse_rerun("step1_committed", "step1")
    sess, plan, conf = run.session()
    tests = sess.plan(plan)
    p_tests = _write_rows(run.path("step1", "planner-tests.csv"), RESULT_FIELDS,
                          ([result_row(t)[f] for f in RESULT_FIELDS] for t in tests.values()))
    c = sess.commit_step1(tests, run.artifacts([p_tests]))
    rejected = sess.test_step1(conf)
    p_res = _write_rows(
        run.path("step1", "confirmer-results.csv"), ["outcome", "direction", "p_one_sided", "rejected"],
        ([k, c.directions[k], repr(sess.tested_sub2[k]), int(k in rejected)] for k in c.selected),
    )
    run.commit("step1_results", {"rejected": list(rejected),
                                 "pvalues": {k: repr(v) for k, v in sess.tested_sub2.items()}}, [p_res])
    print(f"Step 1: planned on {run.planner}; selected {list(c.selected)}; "
          f"rejected on {run.confirmer}: {list(rejected) or 'none'}")
    return EXIT_OK


def cmd_explore_extract(args, run: RunDir) -> int:
    run.require("matched", "explore-extract", "match")
    g = args.subgroup
    if g not in SUBGROUPS:
        raise UserError(f"--subgroup must be one of {SUBGROUPS}")
    state = TurnoverState(run.log)
    role = "planner" if g == run.planner else "confirmer"
    guard = GuardedOutcomes(state, g, role, run.loader(g))
    names = split_list(args.outcomes) if args.outcomes else [o.name for o in run.registry()]
    out = Path(args.out) if args.out else run.path("explore", f"{g}-extract.csv")
    rows = []
    for name in names:
        sample = guard.sample(name, "explore")
        for i, (t, cs) in enumerate(sample.sets, start=1):
            rows.append([name, i, "treated", repr(t)])
            rows += [[name, i, "control", repr(v)] for v in cs]
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(out, ["outcome", "set", "role", "value"], rows)
    print(f"wrote {g} outcome extract to {out}")
    return EXIT_OK


def cmd_step2_register(args, run: RunDir) -> int:
    run.require("step1_results", "step2-register", "step1")
    registry = run.registry()
    reg = StepTwoRegistration.from_config(
        args.registration, prespecified=[o.name for o in registry if o.prespecified],
        kinds={o.name: o.kind for o in registry},
    )
    sess, _, _ = run.session()
    if sess.state.stage != "step1_committed":
        run.refuse_rerun("step2_registered", "step2-register")
    dest = run.path("step2", "registration.ini")
    shutil.copyfile(args.registration, dest)
    sess.register_step2(reg, [o.name for o in registry], run.artifacts([dest]))
    print(f"registered {len(reg.hypotheses)} Step-2 hypotheses ({reg.m_novel} novel)")
    return EXIT_OK


def cmd_step2_run(args, run: RunDir) -> int:
    run.require("step2_registered", "step2-run", "step2-register")
    run.refuse_rerun("step2_results", "step2-run")
    sess, plan, _ = run.session()
    rejected = sess.test_step2(plan)
    reg = sess.registration
    p = _write_rows(
        run.path("step2", "results.csv"), ["outcome", "direction", "method", "novel", "p_one_sided", "rejected"],
        ([h.name, h.direction, h.method, int(h.novel), repr(sess.tested_sub1[h.name]), int(h.name in rejected)]
         for h in reg.hypotheses),
    )
    run.commit("step2_results", {"rejected": list(rejected),
                                 "pvalues": {k: repr(v) for k, v in sess.tested_sub1.items()}}, [p])
    print(f"Step 2: rejected on {run.planner}: {list(rejected) or 'none'}")
    return EXIT_OK


def cmd_report(args, run: RunDir) -> int:
    run.require("step2_results", "report", "step2-run")
    run.refuse_rerun("complete", "report")
    sess, plan, conf = run.session()
    intervals = [] if args.no_intervals else sess.fcr_intervals(plan, conf)
    rep = sess.report(intervals)
    chain = [f"  {n:<18}{run.log.hash_of(n)}" for n in run.log.names]
    text = rep.to_text() + "\nStage chain (sha256 of each committed record):\n" + "\n".join(chain) + "\n"
    paths = [
        _write(run.path("report", "report.txt"), text),
        _write(run.path("report", "decisions.csv"), rep.to_csv()),
        _write(run.path("report", "intervals.csv"), rep.intervals_csv()),
    ]
    if intervals:
        paths.append(Path(render_intervals(intervals, run.path("report", "intervals.svg"))))
    run.commit("report_files", {"complete_record": run.log.hash_of("complete")}, paths)
    sys.stdout.write(text)
    return EXIT_OK


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def cmd_status(args, run: RunDir) -> int:
    for n in run.log.names:
        print(f"{n:<18}{run.log.hash_of(n)}")
    bad = run.log.violations()
    print(f"hash chain OK; {len(bad)} refused access attempt(s) in the audit log")
    return EXIT_OK


def cmd_simulate(args) -> int:
    s = Scenario.from_config(args.scenario)
    if args.replicates is not None:
        s = replace(s, replicates=args.replicates)
    if args.seed is not None:
        s = replace(s, seed=args.seed)
    if args.intervals:
        s = replace(s, intervals=True)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.compare_orderings:
        cmp = compare_orderings(s, args.jobs)
        text = cmp.summary()
        if out:
            _write(out / f"{s.name}-NHS-plans.csv", cmp.first.to_csv())
            _write(out / f"{s.name}-HS-plans.csv", cmp.second.to_csv())
    else:
        res = run_scenario(s, args.jobs)
        text = res.summary()
        if out:
            _write(out / f"{s.name}.csv", res.to_csv())
    if out:
        _write(out / f"{s.name}.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", default=os.environ.get(ENV_RUN_DIR),
                        help=f"study run directory (default: ${ENV_RUN_DIR})")
    common.add_argument("--no-timestamp", action="store_true", help="omit timestamps from stage and audit records")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dataturnover", description="Data-turnover analysis of matched observational data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", parents=[common], help="create a run directory")
    s.add_argument("--config", help="ini file with a [run] section (alpha, planner, k, caliper, trim, ...)")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("generate", parents=[common], help="write a synthetic cohort CSV and schema")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="generator ini (default: bundled study-shaped generator)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--effect", action="append", metavar="OUTCOME=TAU[,TAU_HS]")

    s = sub.add_parser("ingest", parents=[common], help="load, impute and filter the cohort; seal outcomes")
    s.add_argument("data")
    s.add_argument("--schema", required=True)
    s.add_argument("--impute-siblings", default="all", help="'all', 'none' or a comma list of fields")

    s = sub.add_parser("match", parents=[common], help="propensity fit, overlap trimming and 1:k matching")
    s.add_argument("--k", type=int)
    s.add_argument("--caliper", type=float, help="caliper as a multiple of the pooled logit SD")
    s.add_argument("--trim", type=float, help="overlap trimming margin in pooled logit SDs")
    s.add_argument("--method", choices=("optimal", "greedy"))
    s.add_argument("--ridge", type=float, default=0.0)

    sub.add_parser("balance", parents=[common], help="balance tables and Love plots")
    sub.add_parser("step1", parents=[common], help="plan on subpopulation 1, commit, test on subpopulation 2")

    s = sub.add_parser("explore-extract", parents=[common], help="export one subgroup's matched outcomes")
    s.add_argument("--subgroup", required=True)
    s.add_argument("--outcomes", help="comma list (default: all registered outcomes)")
    s.add_argument("--out")

    s = sub.add_parser("step2-register", parents=[common], help="commit the Step-2 hypotheses")
    s.add_argument("registration", help="ini with [registration] rationale and [hypothesis.<outcome>] sections")

    sub.add_parser("step2-run", parents=[common], help="test the registered hypotheses on subpopulation 1")

    s = sub.add_parser("report", parents=[common], help="lower bounds, verdicts and selective intervals")
    s.add_argument("--no-intervals", action="store_true")

    sub.add_parser("status", parents=[common], help="verify the hash chain and list stages")

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo FWER / power / FCR study")
    s.add_argument("scenario", help="scenario ini, or the name of a bundled scenario (e.g. complete_null)")
    s.add_argument("--replicates", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--intervals", action="store_true")
    s.add_argument("--compare-orderings", action="store_true")
    return p


RUN_COMMANDS = {
    "ingest": cmd_ingest,
    "match": cmd_match,
    "balance": cmd_balance,
    "step1": cmd_step1,
    "explore-extract": cmd_explore_extract,
    "step2-register": cmd_step2_register,
    "step2-run": cmd_step2_run,
    "report": cmd_report,
    "status": cmd_status,
}

USER_ERRORS = (UserError, ConfigError, CohortError, MatchingError, InferenceError, TurnoverError, PlotError,
               FileNotFoundError, IsADirectoryError, ValueError)


def _bundled_scenario(name: str) -> str:
    if os.path.exists(name):
        return name
    candidate = files("dataturnover") / "data" / f"scenario_{name.replace('-', '_')}.ini"
    if candidate.is_file():
        return os.fspath(candidate)
    raise UserError(f"scenario {name!r} not found")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    run: RunDir | None = None
    root: Path | None = None
    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "simulate":
            args.scenario = _bundled_scenario(args.scenario)
            return cmd_simulate(args)
        if not args.run_dir:
            raise UserError(f"no run directory: pass --run-dir or set {ENV_RUN_DIR}")
        root = Path(args.run_dir)
        with _locked(root):
            if args.command == "init":
                return cmd_init(args)
            run = RunDir(root, timestamps=False if args.no_timestamp else None)
            run.log.verify()
            return RUN_COMMANDS[args.command](args, run)
    except ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except ChainError as exc:
        details = {"command": args.command, "error": str(exc)}
        if run is not None:
            run.log.audit("chain-verification", False, **details)
        elif root is not None and root.is_dir():
            append_audit(root, audit_entry("chain-verification", False, not args.no_timestamp, **details))
        print(f"integrity failure: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
