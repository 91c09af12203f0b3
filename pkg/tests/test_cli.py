import fcntl
import json
import re
import subprocess
import sys
from importlib.resources import files

import pytest

from dataturnover.cli import ENV_RUN_DIR, EXIT_OK, EXIT_PROTOCOL, EXIT_USER, main
from dataturnover.matching import BalanceTable
from dataturnover.plotting import read_love_plot

REG = """[registration]
rationale = directions chosen after exploring the confirmer subgroup
[hypothesis.health]
direction = right
[hypothesis.income]
direction = left
[hypothesis.alcohol]
direction = 1
"""

# (command, extra args) in pipeline order
STEPS = [
    ("ingest", ["{data}/cohort.csv", "--schema", "{data}/schema.ini"]),
    ("match", []),
    ("balance", []),
    ("step1", []),
    ("step2-register", ["{reg}"]),
    ("step2-run", []),
    ("report", []),
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A smaller synthetic cohort with a shared health effect."""
    d = tmp_path_factory.mktemp("data")
    text = (files("dataturnover") / "data" / "synthetic_wls.ini").read_text()
    text = re.sub(r"n_control = 2382\nn_treated = 435", "n_control = 500\nn_treated = 95", text)
    text = re.sub(r"n_control = 1623\nn_treated = 223", "n_control = 380\nn_treated = 60", text)
    (d / "gen.ini").write_text(text)
    (d / "reg.ini").write_text(REG)
    code = main(["generate", "--out", str(d), "--config", str(d / "gen.ini"), "--seed", "5",
                 "--effect", "health=0.7", "--effect", "income=0.5,0"])
    assert code == EXIT_OK
    return d


def cli(run, *args):
    return main([args[0], "--run-dir", str(run), "--no-timestamp", *args[1:]])


def pipeline(run, dataset, upto=None, seed=3):
    assert cli(run, "init", "--seed", str(seed)) == EXIT_OK
    for name, extra in STEPS:
        if name == upto:
            return
        args = [a.format(data=dataset, reg=dataset / "reg.ini") for a in extra]
        assert cli(run, name, *args) == EXIT_OK, name


def audit(run):
    return [json.loads(line) for line in (run / "audit.log").read_text().splitlines() if line.strip()]


@pytest.fixture(scope="module")
def full_run(tmp_path_factory, dataset):
    run = tmp_path_factory.mktemp("run")
    pipeline(run, dataset)
    return run


# -- legitimate pipeline ------------------------------------------------------------------


def test_full_pipeline_artifacts(full_run):
    for rel in ("cohort/covariates.csv", "design/NHS-sets.csv", "balance/HS-love.svg", "step1/planner-tests.csv",
                "step1/confirmer-results.csv", "step2/registration.ini", "step2/results.csv",
                "report/report.txt", "report/decisions.csv", "report/intervals.csv", "HEAD"):
        assert (full_run / rel).exists(), rel
    assert cli(full_run, "status") == EXIT_OK


def test_no_false_lock_triggers(tmp_path, dataset):
    run = tmp_path / "clean"
    pipeline(run, dataset)
    assert cli(run, "explore-extract", "--subgroup", "HS") == EXIT_OK
    assert cli(run, "explore-extract", "--subgroup", "NHS") == EXIT_OK
    entries = audit(run)
    assert entries and all(e["allowed"] for e in entries)


def test_report_finds_shared_effect(full_run):
    rows = (full_run / "report/decisions.csv").read_text().splitlines()
    health = next(r for r in rows if r.startswith("health,"))
    header = rows[0].split(",")
    cells = dict(zip(header, health.split(",")))
    assert cells["lower_bound"] == "2"


def test_love_plot_matches_csv(full_run):
    for g in ("NHS", "HS"):
        table = BalanceTable.read_csv(full_run / "balance" / f"{g}-balance.csv")
        emb = read_love_plot(full_run / "balance" / f"{g}-love.svg")
        assert [e["covariate"] for e in emb] == [r.name for r in table.rows]
        assert [float(e["pre"]) for e in emb] == [r.pre_match_diff for r in table.rows]
        assert [float(e["post"]) for e in emb] == [r.post_match_diff for r in table.rows]


def test_seeded_runs_are_byte_identical(tmp_path, dataset, full_run):
    run = tmp_path / "again"
    pipeline(run, dataset)
    for rel in ("report/report.txt", "report/decisions.csv", "report/intervals.csv", "HEAD",
                "balance/NHS-love.svg"):
        assert (run / rel).read_bytes() == (full_run / rel).read_bytes(), rel


def test_env_var_run_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_RUN_DIR, str(tmp_path / "envrun"))
    assert main(["init", "--no-timestamp"]) == EXIT_OK
    assert (tmp_path / "envrun" / "run.ini").exists()


def test_console_script_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "dataturnover.cli", "status", "--run-dir", str(tmp_path / "none")],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_USER
    assert "not an initialized run directory" in r.stderr


# -- user errors (exit 1) -------------------------------------------------------------------


def test_step1_before_match_names_missing_stage(tmp_path, dataset, capsys):
    run = tmp_path / "r"
    pipeline(run, dataset, upto="match")
    assert cli(run, "step1") == EXIT_USER
    assert "'matched'" in capsys.readouterr().err


def test_missing_run_dir(monkeypatch, capsys):
    monkeypatch.delenv(ENV_RUN_DIR, raising=False)
    assert main(["status"]) == EXIT_USER
    assert ENV_RUN_DIR in capsys.readouterr().err


def test_step2_run_before_registration(tmp_path, dataset):
    run = tmp_path / "r"
    pipeline(run, dataset, upto="step2-register")
    assert cli(run, "step2-run") == EXIT_USER


def test_busy_lock(tmp_path, dataset, capsys):
    run = tmp_path / "r"
    assert cli(run, "init") == EXIT_OK
    with open(run / ".lock", "a+") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        assert cli(run, "status") == EXIT_USER
        fcntl.flock(fh, fcntl.LOCK_UN)
    assert "another dataturnover command" in capsys.readouterr().err
    assert cli(run, "status") == EXIT_OK


def test_bad_effect_flag(tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--effect", "nonsense=1"]) == EXIT_USER


# -- protocol violations (exit 2 + audit entry) -------------------------------------------------


def expect_violation(run, *args):
    before = len(audit(run)) if (run / "audit.log").exists() else 0
    assert cli(run, *args) == EXIT_PROTOCOL
    entries = audit(run)[before:]
    assert entries and not entries[-1]["allowed"]
    return entries[-1]


def test_confirmer_extract_before_step1(tmp_path, dataset):
    run = tmp_path / "r"
    pipeline(run, dataset, upto="step1")
    e = expect_violation(run, "explore-extract", "--subgroup", "HS")
    assert e["subgroup"] == "HS" and e["event"] == "outcome-read"


def test_planner_extract_between_commit_and_registration(tmp_path, dataset):
    run = tmp_path / "r"
    pipeline(run, dataset, upto="step2-register")
    assert cli(run, "explore-extract", "--subgroup", "HS") == EXIT_OK
    e = expect_violation(run, "explore-extract", "--subgroup", "NHS")
    assert e["subgroup"] == "NHS"


@pytest.mark.parametrize("cmd", ["ingest", "match", "balance", "step1", "step2-register", "step2-run", "report"])
def test_rerun_refused(full_run, dataset, cmd):
    extra = dict(STEPS)[cmd]
    args = [a.format(data=dataset, reg=dataset / "reg.ini") for a in extra]
    expect_violation(full_run, cmd, *args)


def test_reinit_refused(full_run):
    assert cli(full_run, "init") == EXIT_PROTOCOL


@pytest.mark.parametrize("target", ["stage", "last-stage", "head", "artifact", "sealed", "audit", "delete"])
def test_tampering_blocks_every_later_command(tmp_path, dataset, target):
    run = tmp_path / "r"
    pipeline(run, dataset, upto="step2-register")
    stages = sorted((run / "stages").glob("*.json"))
    if target == "stage":
        p = stages[1]
        p.write_text(p.read_text().replace('"cohort"', '"cohort" ', 1))
    elif target == "last-stage":
        p = stages[-1]
        rec = json.loads(p.read_text())
        rec["payload"]["tampered"] = True
        p.write_text(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    elif target == "head":
        (run / "HEAD").write_text("3 " + "0" * 64 + "\n")
    elif target == "artifact":
        with open(run / "step1" / "planner-tests.csv", "a") as fh:
            fh.write("health,0.5,0.5\n")
    elif target == "sealed":
        p = run / "sealed" / "outcomes-HS.csv"
        p.write_text(p.read_text().replace("1", "2", 1))
    elif target == "audit":
        with open(run / "audit.log", "a") as fh:
            fh.write("{not json\n")
    else:
        stages[-1].unlink()
    for cmd, extra in (("status", []), ("step2-register", [str(dataset / "reg.ini")]),
                       ("explore-extract", ["--subgroup", "HS"])):
        assert cli(run, cmd, *extra) == EXIT_PROTOCOL, (target, cmd)
    lines = (run / "audit.log").read_text().splitlines()
    assert any('"chain-verification"' in line for line in lines)


# -- simulate ---------------------------------------------------------------------------------


def test_simulate_small(tmp_path, capsys):
    scen = tmp_path / "s.ini"
    scen.write_text("[scenario]\nname = tiny\nreplicates = 3\nseed = 1\n[sizes]\nNHS = 120, 24\nHS = 90, 18\n"
                    "[effects]\nhealth = 0.5, 0.5\n")
    out = tmp_path / "out"
    assert main(["simulate", str(scen), "--out", str(out), "--compare-orderings"]) == EXIT_OK
    assert (out / "tiny-NHS-plans.csv").read_text().startswith("metric,outcome")
    assert (out / "tiny.txt").exists()
    assert "paired SE" in capsys.readouterr().out


def test_simulate_unknown_scenario():
    assert main(["simulate", "no_such_scenario"]) == EXIT_USER
