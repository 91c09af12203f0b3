import csv
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import DATA
from dataturnover.cohort import Cohort, Covariate, CovariateSpec, Subject
from dataturnover.matching import (
    MatchedDesign,
    MatchedSet,
    MatchingError,
    PropensityFit,
    SeparationError,
    balance_table,
    build_design_matrix,
    design_from_columns,
    effective_sample_size,
    fit_propensity,
    match,
    trim_overlap,
)

CONT = CovariateSpec("x", "continuous")


def dm_from(treated, **cols):
    specs = []
    for name, values in cols.items():
        v = np.asarray(values, dtype=float)
        kind = "binary" if set(v[~np.isnan(v)]) <= {0.0, 1.0} else "continuous"
        specs.append((CovariateSpec(name, kind), v))
    ids = [f"{i:03d}" for i in range(len(treated))]
    return design_from_columns(ids, specs, np.asarray(treated, dtype=bool), "NHS")


def fit_with_scores(scores, sd):
    scores = np.asarray(scores, dtype=float)
    return PropensityFit(np.zeros(1), scores, sd)


def load_mle(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    z = np.array([int(r["treated"]) for r in rows], dtype=float)
    names = [c for c in rows[0] if c != "treated"]
    X = np.array([[float(r[c]) for c in names] for r in rows])
    return X, z, names


# -- design matrix ----------------------------------------------------------


def test_mean_imputation_and_indicator():
    dm = dm_from([1, 0, 0], a=[1.0, 2.0, np.nan])
    assert dm.column("a").tolist() == [1.0, 2.0, 1.5]
    assert dm.columns == ("a", "a (missing)")
    assert dm.missingness_indicators[:, 0].tolist() == [0.0, 0.0, 1.0]


def test_no_missingness_no_indicators():
    dm = dm_from([1, 0, 0], a=[1.0, 2.0, 3.0])
    assert dm.n_indicators == 0 and dm.missingness_indicators.shape == (3, 0)


def test_binary_imputed_with_proportion():
    dm = dm_from([1, 0, 0, 1, 0], b=[1, 0, 0, 1, np.nan])
    assert dm.column("b")[4] == pytest.approx(0.5)
    assert bool(dm.binary[0])


def test_categorical_expansion():
    spec = CovariateSpec("occ", "categorical", (1.0, 2.0, 3.0))
    dm = design_from_columns(["a", "b", "c"], [(spec, np.array([1.0, 3.0, np.nan]))], np.array([1, 0, 0], bool), "HS")
    assert dm.columns[:3] == ("occ=1", "occ=2", "occ=3")
    assert dm.X[:, 0].tolist() == [1.0, 0.0, 0.5]
    assert dm.columns[3] == "occ (missing)"


def test_all_missing_is_an_error():
    with pytest.raises(MatchingError, match="missing for every subject"):
        dm_from([1, 0], a=[np.nan, np.nan])


def test_build_design_matrix_from_cohort():
    specs = (CovariateSpec("age", "continuous"), CovariateSpec("sex", "binary"))
    subj = [
        Subject(str(i), "NHS", bool(i % 2), (Covariate("age", "continuous", a), Covariate("sex", "binary", 1.0)))
        for i, a in enumerate([30.0, None, 40.0, 50.0])
    ]
    cohort = Cohort(tuple(subj), specs)
    dm = build_design_matrix(cohort, "NHS")
    assert dm.column("age")[1] == pytest.approx(40.0)
    assert dm.columns[-1] == "age (missing)"
    with pytest.raises(MatchingError):
        build_design_matrix(cohort, "HS")


# -- propensity model ---------------------------------------------------------


@pytest.mark.parametrize("path", sorted((DATA / "mle").glob("*.csv")), ids=lambda p: p.stem)
def test_irls_matches_grid_mle(path):
    X, z, names = load_mle(path)
    dm = dm_from(z, **{n: X[:, j] for j, n in enumerate(names)})
    fit = fit_propensity(dm)
    ref = oracles.grid_mle(X, z)
    assert fit.converged
    assert np.max(np.abs(fit.coefficients - ref)) < 1e-4


def test_balanced_covariate_gives_flat_fit():
    x = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
    z = [1, 1, 1, 0, 0, 0, 0, 0, 0]
    fit = fit_propensity(dm_from(z, x=x))
    assert fit.coefficients[1] == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(fit.logit_scores, math.log(3 / 6))


def test_duplicate_column_is_dropped():
    rng = np.random.default_rng(5)
    x = rng.normal(0, 1, 40)
    z = rng.random(40) < 0.4
    one = fit_propensity(dm_from(z, x=x))
    two = fit_propensity(dm_from(z, x=x, y=2 * x + 1))
    assert two.dropped == ("y",)
    assert np.allclose(one.logit_scores, two.logit_scores, atol=1e-10)


def test_constant_column_is_dropped():
    z = [1, 0, 1, 0, 0, 1, 0]
    fit = fit_propensity(dm_from(z, x=[0.3, 1.2, -0.4, 2.2, 0.9, 1.6, 0.0], c=[1.0] * 7))
    assert "c" in fit.dropped


def test_separation_raises_and_ridge_recovers():
    x = [0.1, 0.2, 0.3, 1.1, 1.2, 1.3]
    z = [0, 0, 0, 1, 1, 1]
    dm = dm_from(z, x=x)
    with pytest.raises(SeparationError, match="ridge"):
        fit_propensity(dm)
    fit = fit_propensity(dm, ridge=1e-6)
    assert np.all(np.isfinite(fit.logit_scores))


def test_needs_both_groups():
    with pytest.raises(MatchingError):
        fit_propensity(dm_from([1, 1, 1], x=[1.0, 2.0, 3.0]))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(-1000, 1000), st.integers(0, 10_000))
def test_logits_invariant_to_rescaling(a, b, seed):
    rng = np.random.default_rng(seed)
    x1 = rng.normal(0, 1, 60)
    x2 = rng.normal(0, 1, 60)
    z = rng.random(60) < 1 / (1 + np.exp(-(0.5 * x1 - 0.3 * x2)))
    if z.all() or not z.any():
        return
    base = fit_propensity(dm_from(z, x1=x1, x2=x2))
    scaled = fit_propensity(dm_from(z, x1=a * x1 + b, x2=x2))
    assert np.max(np.abs(base.logit_scores - scaled.logit_scores)) < 1e-6


def test_pooled_sd_hand_value():
    dm = dm_from([1, 1, 0, 0, 0], x=[0.0, 1.0, 2.0, 3.0, 4.0])
    fit = fit_with_scores([1.0, 3.0, 0.0, 1.0, 2.0], 0.0)
    from dataturnover.matching import pooled_sd

    # within-group sums of squares 2 and 2, pooled over 3 degrees of freedom
    assert pooled_sd(fit.logit_scores, dm.treated) == pytest.approx(math.sqrt(4 / 3))


# -- overlap trimming -------------------------------------------------------------


def test_trim_all_equal_keeps_everyone():
    dm = dm_from([1, 0, 0, 1], x=[0.0, 1.0, 2.0, 3.0])
    fit = fit_with_scores([0.2] * 4, 0.0)
    assert trim_overlap(fit, dm) == frozenset(dm.ids)


def test_trim_removes_far_control():
    z = [1, 1, 1, 0, 0, 0, 0]
    scores = [-0.8, 0.1, 0.9, -1.0, 0.0, 1.0, -10.0]
    dm = dm_from(z, x=list(range(7)))
    kept = trim_overlap(fit_with_scores(scores, 0.5), dm)
    assert dm.ids[6] not in kept
    assert len(kept) == 6


def test_treated_inside_control_range_kept():
    z = [1, 1, 0, 0, 0]
    dm = dm_from(z, x=list(range(5)))
    kept = trim_overlap(fit_with_scores([0.0, 0.5, -1.0, 1.0, 0.2], 0.3), dm)
    assert {dm.ids[0], dm.ids[1]} <= kept


def test_trim_monotone_in_c():
    rng = np.random.default_rng(8)
    z = rng.random(80) < 0.3
    s = rng.normal(0, 1, 80) + 1.5 * z
    dm = dm_from(z, x=s)
    fit = fit_with_scores(s, 0.9)
    sizes = [len(trim_overlap(fit, dm, c)) for c in (0.0, 0.25, 0.5, 1.0, 2.0)]
    assert sizes == sorted(sizes)


# -- matching -------------------------------------------------------------------------


def instance(rng, nt, nc):
    st_ = rng.normal(0.4, 1, nt)
    sc = rng.normal(0, 1, nc)
    sex_t = rng.integers(0, 2, nt)
    sex_c = rng.integers(0, 2, nc)
    return st_, sc, sex_t, sex_c


def run_match(st_, sc, sex_t, sex_c, k, sd, method="optimal"):
    nt = len(st_)
    dm = dm_from(np.r_[np.ones(nt), np.zeros(len(sc))], sex=np.r_[sex_t, sex_c])
    fit = fit_with_scores(np.r_[st_, sc], sd)
    return dm, fit, match(fit, dm, k=k, exact_on="sex", caliper_mult=0.2, method=method)


def check_constraints(design, dm, fit, caliper, k):
    idx = dm.index_of()
    sex = dm.column("sex")
    used = []
    for s in design.sets:
        t = idx[s.treated_id]
        assert dm.treated[t]
        assert len(s.control_ids) == k
        for c in s.control_ids:
            ci = idx[c]
            assert not dm.treated[ci]
            assert sex[ci] == sex[t]
            assert abs(fit.logit_scores[ci] - fit.logit_scores[t]) <= caliper + 1e-12
        used += [s.treated_id, *s.control_ids]
    assert len(used) == len(set(used))


def feasible_instances(count, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        nt = int(rng.integers(1, 7))
        k = int(rng.integers(1, 4))
        nc = int(rng.integers(nt * k, 25))
        st_, sc, sex_t, sex_c = instance(rng, nt, nc)
        sd = float(rng.uniform(2.0, 6.0))
        cost, plan = oracles.exhaustive_matching(st_, sc, sex_t, sex_c, k, 0.2 * sd)
        if plan is not None:
            out.append((st_, sc, sex_t, sex_c, k, sd, cost))
    return out


def test_optimal_equals_exhaustive():
    for st_, sc, sex_t, sex_c, k, sd, cost in feasible_instances(30, 21):
        dm, fit, design = run_match(st_, sc, sex_t, sex_c, k, sd)
        assert not design.dropped
        assert design.total_distance == pytest.approx(cost, abs=1e-9)
        check_constraints(design, dm, fit, 0.2 * sd, k)


def test_hand_two_treated_four_controls():
    # treated at 0 and 1; controls at -0.1, 0.45, 0.55, 1.2; 1:2 without caliper pressure
    st_, sc = np.array([0.0, 1.0]), np.array([-0.1, 0.45, 0.55, 1.2])
    zeros = np.zeros(2, int), np.zeros(4, int)
    cost, plan = oracles.exhaustive_matching(st_, sc, *zeros, 2, 10.0)
    dm, fit, design = run_match(st_, sc, *zeros, 2, 50.0)
    assert design.total_distance == pytest.approx(cost)
    assert design.total_distance == pytest.approx(0.1 + 0.45 + 0.45 + 0.2)
    assert design.sets[0].control_ids == ("002", "003")


def test_single_treated_three_controls():
    dm, fit, design = run_match(np.array([0.0]), np.array([0.1, -0.1, 0.05]), [1], [1, 1, 1], 3, 5.0)
    assert len(design) == 1 and len(design.member_ids()) == 4


def test_unmatchable_treated_dropped(caplog):
    with caplog.at_level(logging.WARNING, logger="dataturnover.matching"):
        dm, fit, design = run_match(np.array([0.0, 5.0]), np.array([0.1, 0.2]), [0, 0], [0, 0], 1, 1.0)
    assert design.dropped == ("001",)
    assert len(design) == 1
    assert "could not be matched" in caplog.text


def test_exact_match_separates_strata():
    # the nearest control has the other sex and must not be used
    dm, fit, design = run_match(np.array([0.0]), np.array([0.01, 0.3]), [1], [0, 1], 1, 10.0)
    assert design.sets[0].control_ids == ("002",)


def test_optimal_never_worse_than_greedy():
    rng = np.random.default_rng(33)
    for _ in range(40):
        nt = int(rng.integers(2, 8))
        st_, sc, sex_t, sex_c = instance(rng, nt, int(rng.integers(3 * nt, 40)))
        *_, opt = run_match(st_, sc, sex_t, sex_c, 2, 8.0)
        *_, gr = run_match(st_, sc, sex_t, sex_c, 2, 8.0, method="greedy")
        if len(opt) == len(gr) == nt:
            assert opt.total_distance <= gr.total_distance + 1e-9


def test_ties_resolved_deterministically():
    st_, sc = np.array([0.0, 0.0]), np.array([0.5, -0.5, 0.5, -0.5])
    a = run_match(st_, sc, [0, 0], [0] * 4, 2, 10.0)[2]
    b = run_match(st_, sc, [0, 0], [0] * 4, 2, 10.0)[2]
    assert a == b


def test_bad_k_and_method():
    dm = dm_from([1, 0], sex=[0, 0])
    fit = fit_with_scores([0.0, 0.0], 1.0)
    with pytest.raises(MatchingError):
        match(fit, dm, k=0)
    with pytest.raises(MatchingError):
        match(fit, dm, method="random")


def test_design_csv_roundtrip(tmp_path):
    d = MatchedDesign((MatchedSet("t1", ("c1", "c2")), MatchedSet("t2", ("c3", "c4"))), "HS", 2)
    d.write_csv(tmp_path / "d.csv")
    back = MatchedDesign.read_csv(tmp_path / "d.csv", "HS")
    assert back.sets == d.sets and back.k == 2
    assert (tmp_path / "d.csv").read_text().splitlines()[:2] == ["set_id,subject_id,role", "1,t1,treated"]


# -- balance and ESS --------------------------------------------------------------------


def test_ess_values():
    def design(n, k):
        return MatchedDesign(tuple(MatchedSet(f"t{i}", tuple(f"c{i}_{j}" for j in range(k))) for i in range(n)), "NHS", k)

    assert effective_sample_size(design(434, 3)) == 651.0
    assert effective_sample_size(design(223, 3)) == 334.5
    assert effective_sample_size(design(17, 1)) == 17.0
    assert effective_sample_size(design(0, 3)) == 0.0


def test_balance_hand_computation():
    # treated rows 0,1 ; controls 2..5 ; matched: (0; 2,3) (1; 4,5) minus control 5 unused via k=1
    b = [1, 1, 1, 0, 0, 1]
    x = [2.0, 4.0, 1.0, 3.0, 0.0, 6.0]
    dm = dm_from([1, 1, 0, 0, 0, 0], b=b, x=x)
    design = MatchedDesign((MatchedSet("000", ("003",)), MatchedSet("001", ("002",))), "NHS", 1)
    tab = balance_table(design, dm)
    rb, rx = tab.rows
    assert rb.metric == "abs-raw-mean-diff"
    assert rb.pre_match_diff == pytest.approx(abs(1.0 - 0.5))
    assert rb.post_match_diff == pytest.approx(abs(1.0 - 0.5))
    sd = math.sqrt((np.var([2.0, 4.0], ddof=1) + np.var([1.0, 3.0, 0.0, 6.0], ddof=1)) / 2)
    assert rx.metric == "abs-standardized-mean-diff"
    assert rx.pre_match_diff == pytest.approx(abs(3.0 - 2.5) / sd)
    assert rx.post_match_diff == pytest.approx(abs(3.0 - 2.0) / sd)


def test_balance_binary_point_one():
    z = [1] * 10 + [0] * 10
    b = [1] * 6 + [0] * 4 + [1] * 5 + [0] * 5
    dm = dm_from(z, b=b)
    design = MatchedDesign(tuple(MatchedSet(f"{i:03d}", (f"{i + 10:03d}",)) for i in range(10)), "NHS", 1)
    assert balance_table(design, dm).rows[0].post_match_diff == pytest.approx(0.1)


def test_balance_identical_samples_zero():
    x = [0.3, 1.7, 2.2]
    dm = dm_from([1, 1, 1, 0, 0, 0], x=x + x, b=[1, 0, 1, 1, 0, 1])
    design = MatchedDesign(tuple(MatchedSet(f"{i:03d}", (f"{i + 3:03d}",)) for i in range(3)), "NHS", 1)
    assert all(r.post_match_diff == 0 for r in balance_table(design, dm).rows)


def test_balance_zero_variance_flag():
    dm = dm_from([1, 0, 0], x=[2.5, 2.5, 2.5])
    design = MatchedDesign((MatchedSet("000", ("001",)),), "NHS", 1)
    row = balance_table(design, dm).rows[0]
    assert row.flag == "zero-variance" and row.metric == "abs-raw-mean-diff"


def test_balance_empty_design():
    with pytest.raises(MatchingError):
        balance_table(MatchedDesign((), "NHS", 3), dm_from([1, 0], x=[0.0, 1.0]))


def test_matching_improves_balance_on_synthetic():
    from dataturnover.synthetic import GeneratorSpec, draw_subgroup

    spec = GeneratorSpec.default()
    gains = []
    for seed in range(5):
        d = draw_subgroup(spec, "NHS", np.random.default_rng(seed), n=600, n_treated=110)
        cols = [(c, d.covariates[c.name]) for c in spec.covariate_specs()]
        dm = design_from_columns([f"{i:04d}" for i in range(len(d))], cols, d.treated, "NHS")
        fit = fit_propensity(dm)
        design = match(fit, dm, k=3, retained=trim_overlap(fit, dm))
        tab = balance_table(design, dm)
        gains += [r.pre_match_diff - r.post_match_diff for r in tab.rows]
    assert np.median(gains) > 0
