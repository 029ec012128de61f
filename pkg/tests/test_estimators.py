import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from natmed.eif import EifColumn
from natmed.estimators import (
    REPORT_PAIRS,
    PsiEstimate,
    UnsupportedInputError,
    build_report,
    effect_report,
    estimate_psi,
    joint_covariance,
    log_ratio_variance,
    prop_mediated,
    prop_mediated_gradient,
)
from natmed.nuisance import OUTCOME, PROJECTION, NuisanceFitter, TargetPair
from natmed.regress import LearnerSpec
from natmed.simulate import Dgp1Spec, Dgp2Spec, gen_dgp1, gen_dgp2, strategy_preset

from conftest import full_sampling_dgp1
from oracles import sequential_aipw

PAIR = TargetPair(1, 0)
SAT_ID = LearnerSpec("saturated", "identity")


@pytest.fixture(scope="module")
def d1():
    return gen_dgp1(Dgp1Spec(2000, seed=8))


@pytest.mark.parametrize("variant", ["classic", "alternative", "density_ratio"])
def test_one_step_and_variance_identities(d1, variant):
    est = estimate_psi(d1, PAIR, strategy_preset("discrete", "all"), variant)
    v = est.eif.values
    assert_allclose(est.one_step, est.plug_in + v.mean(), rtol=0, atol=1e-12)
    assert_allclose(est.variance_n, np.var(v), rtol=1e-12)
    assert_allclose(est.se, np.sqrt(np.var(v) / d1.n), rtol=1e-12)
    lo, hi = est.ci(0.95)
    assert_allclose((hi - lo) / 2, 1.959963984540054 * est.se, rtol=1e-12)


@pytest.mark.parametrize("arm", [0, 1])
@pytest.mark.parametrize("variant", ["classic", "alternative"])
def test_equal_arms_match_sequential_aipw(arm, variant):
    d = full_sampling_dgp1(6000, seed=arm + 30)
    est = estimate_psi(d, TargetPair(arm, arm), strategy_preset("discrete", "saturated"), variant)
    plug, one = sequential_aipw(d.w, d.a, d.s, d.c, d.cy, arm)
    assert_allclose(est.plug_in, plug, rtol=1e-10)
    assert_allclose(est.one_step, one, rtol=1e-10)


def _identity_outcomes(strategy):
    return strategy.with_entries(**{k: SAT_ID for k in OUTCOME + PROJECTION})


@pytest.mark.parametrize("kappa", [2.0, 3.0, 17.0])
def test_scale_equivariance(d1, kappa):
    s = _identity_outcomes(strategy_preset("discrete", "saturated"))
    base = effect_report(d1.with_outcome(d1.cy * 1.0), s, "classic")
    scaled = effect_report(d1.with_outcome(d1.cy * kappa), s, "classic")
    for p in REPORT_PAIRS:
        assert_allclose(scaled.psi[p].one_step, kappa * base.psi[p].one_step, rtol=1e-10)
        assert_allclose(scaled.psi[p].se, kappa * base.psi[p].se, rtol=1e-10)
    for c0, c1 in zip(base.contrasts(), scaled.contrasts()):
        assert_allclose([c1.estimate, c1.lower, c1.upper], [c0.estimate, c0.lower, c0.upper], rtol=1e-9)


def test_saturated_estimators_share_plug_in(d1):
    s = strategy_preset("discrete", "saturated")
    f = NuisanceFitter(d1, s)
    ests = {v: estimate_psi(d1, PAIR, s, v, fitter=f) for v in ("classic", "alternative", "density_ratio")}
    assert_allclose(ests["density_ratio"].plug_in, ests["alternative"].plug_in, rtol=0, atol=1e-10)
    assert_allclose(ests["classic"].plug_in, ests["alternative"].plug_in, rtol=0, atol=1e-10)


def test_continuous_mediator_rejected_by_density_ratio():
    d = gen_dgp2(Dgp2Spec(n=30000, seed=3))
    with pytest.raises(UnsupportedInputError, match="discrete"):
        estimate_psi(d, PAIR, strategy_preset("covid", "glm-main"), "density_ratio")


def test_unknown_estimator(d1):
    with pytest.raises(ValueError, match="unknown estimator"):
        estimate_psi(d1, PAIR, strategy_preset("discrete", "all"), "tmle")


def test_fitter_from_other_dataset(d1):
    s = strategy_preset("discrete", "all")
    other = gen_dgp1(Dgp1Spec(200, seed=1))
    with pytest.raises(ValueError, match="different dataset"):
        estimate_psi(d1, PAIR, s, "classic", fitter=NuisanceFitter(other, s))


def test_zero_outcome_gives_zero(d1):
    d = d1.with_outcome(np.zeros(d1.n))
    for v in ("classic", "alternative"):
        est = estimate_psi(d, PAIR, strategy_preset("discrete", "all"), v)
        assert_allclose([est.plug_in, est.one_step], 0.0, atol=1e-10)


@given(st.integers(0, 10_000))
def test_joint_covariance_psd(seed):
    d = gen_dgp1(Dgp1Spec(300, seed=seed))
    rep = effect_report(d, strategy_preset("discrete", "all"), "alternative", include_01=True)
    C = rep.covariance
    assert_allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() >= -1e-14
    for k, p in enumerate(rep.psi):
        assert_allclose(C[k, k], rep.psi[p].se ** 2, rtol=1e-10)


def _fake(pair, value, eif_values):
    col = EifColumn("classic", pair, np.asarray(eif_values, float), value, np.arange(len(eif_values)))
    m = float(np.mean(col.values))
    return PsiEstimate(pair, "classic", value - m, value, float(np.var(col.values)), col)


def _fake_report(x00, x10, x11, seed=0, n=500):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 3)) @ np.array([[1, 0.4, 0.3], [0, 1, 0.5], [0, 0, 1]]) * 0.05
    psi = {p: _fake(p, x, z[:, k]) for k, (p, x) in enumerate(zip(REPORT_PAIRS, (x00, x10, x11)))}
    return build_report("classic", psi)


def test_contrast_values():
    rep = _fake_report(0.2, 0.12, 0.08)
    assert_allclose(rep.vaccine_efficacy.estimate, 1 - 0.08 / 0.2)
    assert_allclose(rep.indirect.estimate, 0.08 / 0.12)
    assert_allclose(rep.direct.estimate, 0.12 / 0.2)
    assert_allclose(rep.prop_mediated.estimate, 1 - np.log(0.12 / 0.2) / np.log(0.08 / 0.2))
    # intervals are built on the log scale, so the estimate is their geometric centre
    ind = rep.indirect
    assert_allclose(np.sqrt(ind.lower * ind.upper), ind.estimate, rtol=1e-12)
    ve = rep.vaccine_efficacy
    assert_allclose(np.sqrt((1 - ve.lower) * (1 - ve.upper)), 1 - ve.estimate, rtol=1e-12)


def test_negative_estimate_gives_undefined_contrasts():
    rep = _fake_report(0.2, -0.01, 0.08)
    assert not rep.indirect.defined and not rep.direct.defined and not rep.prop_mediated.defined
    assert rep.vaccine_efficacy.defined
    assert "negative_estimate" in rep.flags
    assert "nan" in rep.to_text()


def test_degenerate_mediator():
    rep = _fake_report(0.2, 0.08, 0.08)
    assert_allclose(rep.indirect.estimate, 1.0)
    assert_allclose(rep.prop_mediated.estimate, 0.0, atol=1e-15)


def test_no_total_effect_flagged():
    rep = _fake_report(0.1, 0.1, 0.1)
    assert not rep.prop_mediated.defined
    assert "numerical_instability" in rep.prop_mediated.flags


def test_log_ratio_variance_matches_sampling():
    rng = np.random.default_rng(2)
    cov = np.array([[4e-4, 1e-4], [1e-4, 2e-4]])
    draws = rng.multivariate_normal([0.3, 0.2], cov, size=400_000)
    emp = np.var(np.log(draws[:, 0] / draws[:, 1]))
    assert_allclose(log_ratio_variance(0.3, 0.2, cov), emp, rtol=0.02)


@given(st.floats(0.05, 0.5), st.floats(0.05, 0.5), st.floats(0.05, 0.5))
def test_prop_mediated_gradient(x0, x1, x2):
    if abs(np.log(x1 / x0)) < 0.05:
        return
    h = 1e-6
    num = np.empty(3)
    for k in range(3):
        up, dn = [x0, x1, x2], [x0, x1, x2]
        up[k] += h
        dn[k] -= h
        num[k] = (prop_mediated(*up) - prop_mediated(*dn)) / (2 * h)
    assert_allclose(prop_mediated_gradient(x0, x1, x2), num, rtol=1e-5, atol=1e-6)


def test_report_row_and_text(d1):
    rep = effect_report(d1, strategy_preset("discrete", "all"), "classic")
    row = rep.to_row()
    assert row["n"] == d1.n and row["variant"] == "classic"
    assert_allclose(row["psi10"], rep.psi[PAIR].one_step)
    assert "prop_mediated" in rep.to_text()
    assert_allclose(joint_covariance(list(rep.psi.values())), rep.covariance)


def test_empty_phase_two_cell_breaks_saturated_equality():
    # W=(1,0), A=0, C=0 has no sampled rows here, so the empirical sampling
    # probability is zero and the two plug-ins no longer coincide
    d = gen_dgp1(Dgp1Spec(2000, seed=2))
    s = strategy_preset("discrete", "saturated")
    f = NuisanceFitter(d, s)
    c = estimate_psi(d, PAIR, s, "classic", fitter=f)
    a = estimate_psi(d, PAIR, s, "alternative", fitter=f)
    assert {"empty_cell", "clipped_nuisance"} <= c.flags
    assert abs(c.plug_in - a.plug_in) > 1e-6
