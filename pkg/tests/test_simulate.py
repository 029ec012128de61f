import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, stats
from scipy.special import expit

from natmed.config import ScenarioConfig
from natmed.nuisance import TargetPair
from natmed.simulate import (
    METRIC_COLUMNS,
    Dgp1Spec,
    Dgp2Spec,
    ReplicationResult,
    TruthRecord,
    gen_dgp1,
    gen_dgp2,
    replication_rng,
    run_replications,
    summarize,
    truth_dgp1,
    truth_dgp2,
)

P10 = TargetPair(1, 0)


def _psi_dgp1_oracle(a1, a2):
    total = 0.0
    for w1 in (0, 1):
        for w2 in (0, 1):
            ps = expit(-1 + w1 / 4 - w2 / 3 + a2 / 2)
            for s in range(3):
                total += 0.25 * stats.binom.pmf(s, 2, ps) * expit(-2 + a1 / 2 + w1 / 2 - s / 2)
    return total


def test_dgp1_truth_against_enumeration_oracle():
    t = truth_dgp1()
    for pair, v in t.psi.items():
        assert_allclose(v, _psi_dgp1_oracle(pair.a1, pair.a2), rtol=1e-12)


def test_dgp1_truth_reported_values():
    # true value approximately 0.187 with efficient variance bound 0.509
    t = truth_dgp1()
    assert abs(t.psi[P10] - 0.187) <= 0.001
    assert abs(t.efficient_variance[P10] - 0.509) <= 0.005
    assert abs(t.extra["eif_mean10"]) < 1e-12
    assert t.efficient_variance[P10] > t.extra["full_data_variance10"]


def test_dgp1_truth_against_monte_carlo():
    rng = np.random.default_rng(99)
    n = 2_000_000
    w1, w2 = rng.binomial(1, 0.5, (2, n))
    s0 = rng.binomial(2, expit(-1 + w1 / 4 - w2 / 3))
    y = rng.binomial(1, expit(-2 + 0.5 + w1 / 2 - s0 / 2))
    assert abs(y.mean() - truth_dgp1().psi[P10]) < 4 * y.std() / np.sqrt(n)


def test_dgp1_determinism():
    a = gen_dgp1(Dgp1Spec(500, seed=3))
    b = gen_dgp1(Dgp1Spec(500, seed=3))
    assert a.equals(b)
    assert not a.equals(gen_dgp1(Dgp1Spec(500, seed=4)))


def test_replication_streams_are_distinct():
    x = replication_rng(1, 0).random(5)
    assert_allclose(replication_rng(1, 0).random(5), x)
    assert not np.allclose(replication_rng(1, 1).random(5), x)
    assert not np.allclose(replication_rng(2, 0).random(5), x)


def test_dgp1_sampler_marginals():
    n = 200_000
    d = gen_dgp1(Dgp1Spec(n, seed=17))
    pa = np.mean(expit(np.array([0, 1, -1, 0])))
    assert abs(d.a.mean() - pa) < 4 * np.sqrt(pa * (1 - pa) / n)
    p_case = d.cy.mean()
    pr = 0.25 + 0.75 * p_case
    assert abs(d.r.mean() - pr) < 4 * np.sqrt(pr * (1 - pr) / n)
    assert np.all(d.r[d.cy == 1] == 1)
    assert np.all(np.isnan(d.s[d.r == 0])) and not np.any(np.isnan(d.s[d.r == 1]))
    assert set(np.unique(d.s[d.r == 1])) == {0.0, 1.0, 2.0}


def test_dgp2_sampler():
    d = gen_dgp2(Dgp2Spec(n=30000, alpha=-5.0, seed=6))
    assert np.all(d.s[(d.a == 0) & (d.r == 1)] == 0.0)
    assert np.all(d.s[(d.a == 1) & (d.r == 1)] >= 0.0)
    assert np.all(d.c == 1)
    nc = d.cy == 0
    strata = d.w[:, 0] + 2 * d.w[:, 1] + 4 * d.w[:, 2]
    for k in range(8):
        for arm, quota in ((1, 113), (0, 15)):
            m = (strata == k) & (d.a == arm)
            # the quota is drawn from all arm members, so non-case sampled counts are at most the quota
            assert 0 < np.sum(d.r[m & nc]) <= quota
            assert np.sum(d.r[m]) >= quota


def _quadrature_psi(alpha, a1, a2):
    total = 0.0
    for w1, p1 in ((0, 0.6), (1, 0.4)):
        for w2, p2 in ((0, 0.75), (1, 0.25)):
            for w3, p3 in ((0, 0.75), (1, 0.25)):
                base = alpha - 1.8 * a1 + 0.2 * w1 + 0.1 * w2 + 0.7 * w3
                if a2 == 0:
                    val = expit(base)
                else:
                    mu = 2 - 0.5 * w1
                    val = stats.norm.cdf(0, mu) * expit(base)
                    val += integrate.quad(lambda s: expit(base - 0.5 * s) * stats.norm.pdf(s, mu), 0, np.inf,
                                          epsabs=1e-13)[0]
                total += p1 * p2 * p3 * val
    return total


@pytest.mark.parametrize("alpha", [-5.0, -3.1])
def test_dgp2_truth_against_quadrature(alpha):
    t = truth_dgp2(alpha, draws=400_000)
    for pair, v in t.psi.items():
        ref = _quadrature_psi(alpha, pair.a1, pair.a2)
        assert abs(v - ref) < 4 * t.psi_se[pair], (pair, v, ref)


def test_dgp2_expected_vaccine_cases():
    # about 10.6 vaccine-arm cases per trial when alpha = -5
    assert abs(15000 * _quadrature_psi(-5.0, 1, 1) - 10.6) < 0.3
    counts = []
    for r in range(20):
        d = gen_dgp2(Dgp2Spec(n=30000, alpha=-5.0), replication_rng(5, r))
        counts.append(d.cy[d.a == 1].sum())
    assert abs(np.mean(counts) - 10.6) < 4 * 3.2 / np.sqrt(20)


def _truth(p10=0.2):
    return TruthRecord({P10: p10}, {P10: 0.25}, 0.0, 1.0, 1.0, 0.0, "enumeration")


def test_summarize_counts_coverage():
    scen = ScenarioConfig(dgp="discrete", n=100, reps=4, estimators=("classic",))
    recs = [
        (0, "classic", "psi10", 0.21, 0.15, 0.27, 0.03, False),
        (1, "classic", "psi10", 0.30, 0.25, 0.35, 0.03, False),
        (2, "classic", "psi10", 0.18, 0.12, 0.24, 0.03, False),
        (3, "classic", "psi10", np.nan, np.nan, np.nan, np.nan, True),
    ]
    row, = summarize(ReplicationResult(recs, [(4, "boom")], _truth(), 0.0), scen)
    assert set(row) == set(METRIC_COLUMNS)
    est = np.array([0.21, 0.30, 0.18])
    assert row["used"] == 3 and row["failures"] == 1
    assert_allclose(row["coverage"], 2 / 3)
    assert_allclose(row["bias"], est.mean() - 0.2)
    assert_allclose(row["sqrt_n_bias"], 10 * (est.mean() - 0.2))
    assert_allclose(row["sqrt_n_se"], 10 * est.std(ddof=1))
    assert_allclose(row["ratio"], 10 * est.std(ddof=1) / 0.5)
    assert_allclose(row["prop_negative"], 0.25)
    assert_allclose(row["se_ratio"], 0.03 / est.std(ddof=1))


def test_run_replications_reproducible_across_workers():
    base = dict(dgp="discrete", n=400, reps=4, seed=7, estimators=("classic", "alternative"))
    one = run_replications(ScenarioConfig(threads=1, **base))
    two = run_replications(ScenarioConfig(threads=2, **base))
    assert one.failures == two.failures == []
    assert len(one.records) == 8
    assert_allclose(np.array([r[3:7] for r in one.records], float), np.array([r[3:7] for r in two.records], float),
                    rtol=0, atol=0)
