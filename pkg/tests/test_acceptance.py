"""End-to-end acceptance checks.

Stochastic checks run on the default seed first. When that passes, the
alternative seeds are tried until two of them pass or two of them fail.
Every check prints one PASS or FAIL line, collected again in the terminal
summary.
"""

import time

import numpy as np
import pytest
from numpy.testing import assert_allclose

import conftest
from natmed import cli
from natmed.config import ScenarioConfig
from natmed.eif import eval_classic, eval_full_data
from natmed.estimators import estimate_psi
from natmed.nuisance import NuisanceFitter, TargetPair
from natmed.simulate import (
    DGP2_ALPHAS,
    Dgp1Spec,
    gen_dgp1,
    replication_rng,
    run_replications,
    strategy_preset,
    summarize,
    truth_dgp1,
    truth_dgp2,
)

from conftest import full_sampling_dgp1

DEFAULT_SEED = 1
ALT_SEEDS = (2, 3, 4)
P10 = TargetPair(1, 0)
BOUND = 0.509

# true contrasts by alpha: VE, indirect, direct, proportion mediated
TABLE2 = {
    -5.0: (0.92, 0.46, 0.17, 0.30),
    -4.1: (0.92, 0.46, 0.17, 0.30),
    -3.6: (0.92, 0.46, 0.17, 0.31),
    -3.3: (0.92, 0.46, 0.17, 0.31),
    -3.1: (0.92, 0.46, 0.17, 0.31),
}

pytestmark = pytest.mark.slow


def report(label, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    return ok


def over_seeds(check):
    """Run ``check(seed) -> (ok, detail)`` on the default seed, then on the alternatives."""
    ok, detail = check(DEFAULT_SEED)
    details = [f"seed {DEFAULT_SEED} {'ok' if ok else 'failed'} ({detail})"]
    if not ok:
        return False, "; ".join(details)
    passed = failed = 0
    for seed in ALT_SEEDS:
        if passed >= 2 or failed >= 2:
            break
        s_ok, s_detail = check(seed)
        passed += s_ok
        failed += not s_ok
        details.append(f"seed {seed} {'ok' if s_ok else 'failed'} ({s_detail})")
    return passed >= 2, "; ".join(details)


def metrics(dgp, setting, n, reps, seed, estimators, alpha=-3.1, truth=None):
    cfg = ScenarioConfig(dgp=dgp, strategy_name=setting, n=n, reps=reps, seed=seed, alpha=alpha,
                         estimators=estimators, threads=1)
    res = run_replications(cfg, truth=truth)
    return {(r["estimator"], r["parameter"]): r for r in summarize(res, cfg)}, res


def test_criterion_1_exact_truth(tmp_path):
    t0 = time.perf_counter()
    code = cli.main(["truth", "--dgp", "discrete", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    t = truth_dgp1()
    psi, bound = t.psi[P10], t.efficient_variance[P10]
    ok = code == 0 and abs(psi - 0.187) <= 0.001 and abs(bound - 0.509) <= 0.005 and elapsed < 1.0
    assert report(1, ok, f"psi10={psi:.6f} bound={bound:.6f} runtime={elapsed:.3f}s")


def test_criterion_2_monte_carlo_truth():
    rows, ok = [], True
    for alpha in DGP2_ALPHAS:
        t0 = time.perf_counter()
        t = truth_dgp2(alpha, draws=1_000_000)
        elapsed = time.perf_counter() - t0
        ve, ind, dire, pm = TABLE2[alpha]
        good = (abs(t.vaccine_efficacy - ve) <= 0.01 and abs(t.indirect - ind) <= 0.02
                and abs(t.direct - dire) <= 0.01 and abs(t.prop_mediated - pm) <= 0.02 and elapsed < 60)
        ok &= good
        rows.append(f"a={alpha}: VE={t.vaccine_efficacy:.3f} ind={t.indirect:.3f} dir={t.direct:.3f} "
                    f"PM={t.prop_mediated:.3f} {elapsed:.1f}s")
    assert report(2, ok, "; ".join(rows))


def test_criterion_3_all_consistent():
    truth = truth_dgp1()

    def check(seed):
        m, res = metrics("discrete", "all", 4000, 300, seed, ("classic", "alternative"), truth=truth)
        ok, parts = not res.failures, []
        for est in ("classic", "alternative"):
            r = m[(est, "psi10")]
            ok &= abs(r["sqrt_n_bias"]) <= 0.20 and 0.91 <= r["coverage"] <= 0.97 and 0.95 <= r["ratio"] <= 1.20
            parts.append(f"{est} bias={r['sqrt_n_bias']:.3f} cov={r['coverage']:.3f} ratio={r['ratio']:.3f}")
        parts.append(f"{res.wall_time:.0f}s")
        return ok, ", ".join(parts)

    ok, detail = over_seeds(check)
    assert report(3, ok, detail)


def test_criterion_4_outcome_regressions_consistent():
    truth = truth_dgp1()

    def check(seed):
        ok, parts = True, []
        for n in (500, 4000):
            m, res = metrics("discrete", "qy-qqy", n, 300, seed, ("classic", "alternative"), truth=truth)
            c, a = m[("classic", "psi10")], m[("alternative", "psi10")]
            good = (abs(c["sqrt_n_bias"]) <= 0.25 and c["coverage"] >= 0.95
                    and a["sqrt_n_se"] > c["sqrt_n_se"] and not res.failures)
            ok &= good
            parts.append(f"n={n} classic bias={c['sqrt_n_bias']:.3f} cov={c['coverage']:.3f} "
                         f"se={c['sqrt_n_se']:.3f} alt se={a['sqrt_n_se']:.3f}")
        return ok, ", ".join(parts)

    ok, detail = over_seeds(check)
    assert report(4, ok, detail)


def test_criterion_5_structural_identities():
    ok, parts = True, []
    d = full_sampling_dgp1(3000, seed=1)
    b = NuisanceFitter(d, strategy_preset("discrete", "all")).bundle(P10, "classic")
    gap = np.max(np.abs(eval_classic(d, b, P10, 0.2).values - eval_full_data(d, b, P10, 0.2).values))
    ok &= gap <= 1e-12
    parts.append(f"(a) gap={gap:.1e}")
    worst_plug = worst_one = worst_var = 0.0
    worst_defined, empty = 0.0, 0
    for seed in range(5):
        d = gen_dgp1(Dgp1Spec(2000, seed=seed))
        s = strategy_preset("discrete", "saturated")
        f = NuisanceFitter(d, s)
        c = estimate_psi(d, P10, s, "classic", fitter=f)
        a = estimate_psi(d, P10, s, "alternative", fitter=f)
        gap = abs(c.plug_in - a.plug_in)
        worst_plug = max(worst_plug, gap)
        if "empty_cell" in c.flags:
            empty += 1
        else:
            worst_defined = max(worst_defined, gap)
        for e in (c, a):
            worst_one = max(worst_one, abs(e.one_step - e.plug_in - np.mean(e.eif.values)))
            worst_var = max(worst_var, abs(e.variance_n - np.var(e.eif.values)))
    ok &= worst_plug <= 1e-10 and worst_one <= 1e-12 and worst_var == 0.0
    parts += [f"(b) {worst_plug:.1e} over 5 datasets ({worst_defined:.1e} on the {5 - empty} "
              f"without an empty phase-two cell)", f"(c) {worst_one:.1e}", f"(d) {worst_var:.1e}"]
    assert report(5, ok, " ".join(parts))


def test_criterion_6_covid_scale():
    truths = {a: truth_dgp2(a, 1_000_000) for a in (-3.1, -5.0)}

    def check(seed):
        ok, parts, cov = True, [], {}
        for alpha in (-3.1, -5.0):
            m, res = metrics("covid", "glm-inter", 30000, 100, seed, ("classic", "alternative"), alpha,
                             truths[alpha])
            ok &= len(res.failures) <= 10
            for est in ("classic", "alternative"):
                ind, pm = m[(est, "indirect")], m[(est, "prop_mediated")]
                cov[alpha, est] = ind["coverage"]
                if alpha == -3.1:
                    ok &= 0.90 <= ind["coverage"] <= 0.98 and abs(pm["bias"]) <= 0.03
                parts.append(f"a={alpha} {est} ind cov={ind['coverage']:.3f} PM bias={pm['bias']:.3f}")
        for est in ("classic", "alternative"):
            ok &= cov[-5.0, est] < cov[-3.1, est]
        return ok, ", ".join(parts)

    ok, detail = over_seeds(check)
    assert report(6, ok, detail)


def test_criterion_7_negative_estimates():
    truth = truth_dgp2(-3.1, 1_000_000)

    def check(seed):
        m, res = metrics("covid", "glm-main", 30000, 100, seed, ("classic", "alternative"), -3.1, truth)
        pc = m[("classic", "psi10")]["prop_negative"]
        pa = m[("alternative", "psi10")]["prop_negative"]
        return pc >= 0.10 and pa <= 0.02, f"classic {pc:.2f}, alternative {pa:.2f}"

    ok, detail = over_seeds(check)
    assert report(7, ok, detail)


def test_criterion_8_density_ratio():
    psi = truth_dgp1().psi[P10]
    s = strategy_preset("discrete", "saturated")
    worst, worst_defined, empty = 0.0, 0.0, 0
    est = {"alternative": [], "density_ratio": []}
    for r in range(100):
        d = gen_dgp1(Dgp1Spec(2000, DEFAULT_SEED), replication_rng(DEFAULT_SEED, r))
        f = NuisanceFitter(d, s)
        a = estimate_psi(d, P10, s, "alternative", fitter=f)
        dr = estimate_psi(d, P10, s, "density_ratio", fitter=f)
        gap = abs(a.plug_in - dr.plug_in)
        worst = max(worst, gap)
        if "empty_cell" in a.flags | dr.flags:
            empty += 1
        else:
            worst_defined = max(worst_defined, gap)
        est["alternative"].append(a.one_step)
        est["density_ratio"].append(dr.one_step)
    bias = {k: np.mean(v) - psi for k, v in est.items()}
    sd = {k: np.std(v, ddof=1) for k, v in est.items()}
    ok = (worst <= 1e-10
          and abs(bias["density_ratio"] - bias["alternative"]) <= 0.2 * abs(bias["alternative"]) + 1e-12
          and abs(sd["density_ratio"] - sd["alternative"]) <= 0.2 * sd["alternative"])
    assert report(8, ok, f"max plug-in gap={worst:.1e} ({worst_defined:.1e} on the {100 - empty} "
                         f"replications without an empty phase-two cell), bias {bias['density_ratio']:.5f} vs "
                         f"{bias['alternative']:.5f}, SD {sd['density_ratio']:.5f} vs {sd['alternative']:.5f}")
