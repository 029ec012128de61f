"""Data-generating processes, case-cohort samplers, ground truths and replications.

``discrete`` (DGP-1): two binary covariates, a three-level mediator, right
censoring, and a Bernoulli(1/4) subcohort plus all cases. Its truth and
efficiency bound are computed by exact enumeration over the finite support.

``covid`` (DGP-2): a vaccine-trial shaped process with three binary covariates,
a mediator that is zero in the placebo arm, no censoring, and a stratified
subcohort of fixed size per covariate stratum and arm plus all cases. Its truth
is computed by Monte Carlo.
"""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import binom, norm

from . import regress
from .data import Dataset
from .nuisance import Known, Nuisance, NuisanceBundle, NuisanceFitter, NuisanceStrategy, TargetPair
from .regress import LearnerSpec, ensemble_spec

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# DGP-1
# ---------------------------------------------------------------------------

SUBCOHORT_FRACTION = 0.25


@dataclass(frozen=True)
class Dgp1Spec:
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")


def _dgp1_pa(w1, w2):
    return expit(w1 - w2)


def _dgp1_ps(a, w1, w2):
    return expit(-1 + w1 / 4 - w2 / 3 + a / 2)


def _dgp1_py(a, w1, w2, s):
    return expit(-2 + a / 2 + w1 / 2 - s / 2)


def _dgp1_pc(w1, w2):
    return expit(2 + w1 / 2 - w2 / 3)


def gen_dgp1(spec: Dgp1Spec, rng: np.random.Generator | None = None) -> Dataset:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.n
    w1 = rng.binomial(1, 0.5, n).astype(float)
    w2 = rng.binomial(1, 0.5, n).astype(float)
    a = rng.binomial(1, _dgp1_pa(w1, w2))
    s = rng.binomial(2, _dgp1_ps(a, w1, w2)).astype(float)
    y = rng.binomial(1, _dgp1_py(a, w1, w2, s))
    c = rng.binomial(1, _dgp1_pc(w1, w2))
    cy = c * y
    sub = rng.random(n) < SUBCOHORT_FRACTION
    case = cy == 1
    r = (sub | case).astype(int)
    gr = np.where(case, 1.0, SUBCOHORT_FRACTION)
    return Dataset(np.column_stack([w1, w2]), a, r, np.where(r == 1, s, np.nan), c, cy,
                   covariate_names=("W1", "W2"), meta={"dgp": "discrete", "n": n}, design_gr=gr)


@dataclass(frozen=True)
class TruthRecord:
    psi: dict
    efficient_variance: dict
    vaccine_efficacy: float
    indirect: float
    direct: float
    prop_mediated: float
    method: str
    draws: int | None = None
    psi_se: dict = field(default_factory=dict)
    contrast_se: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_rows(self) -> list[tuple[str, float, float]]:
        """(quantity, value, standard error) rows; exact values carry precision 1e-12."""
        exact = self.method == "enumeration"
        prec = 1e-12
        rows = []
        for p, v in sorted(self.psi.items(), key=lambda kv: (kv[0].a1, kv[0].a2)):
            rows.append((f"psi{p.a1}{p.a2}", v, prec if exact else self.psi_se.get(p, np.nan)))
        for p, v in sorted(self.efficient_variance.items(), key=lambda kv: (kv[0].a1, kv[0].a2)):
            rows.append((f"efficient_variance{p.a1}{p.a2}", v, prec if exact else np.nan))
        for name in ("vaccine_efficacy", "indirect", "direct", "prop_mediated"):
            rows.append((name, getattr(self, name), prec if exact else self.contrast_se.get(name, np.nan)))
        for k, v in self.extra.items():
            rows.append((k, v, prec if exact else np.nan))
        return rows


def _contrasts(p00, p10, p11):
    return {
        "vaccine_efficacy": 1 - p11 / p00,
        "indirect": p11 / p10,
        "direct": p10 / p00,
        "prop_mediated": 1 - np.log(p10 / p00) / np.log(p11 / p00),
    }


class _Dgp1Law:
    """Exact conditional laws of DGP-1, vectorized over covariate rows."""

    S_VALUES = np.array([0.0, 1.0, 2.0])

    @staticmethod
    def q(s, a, w1, w2):
        return binom.pmf(s, 2, _dgp1_ps(a, w1, w2))

    def qy(self, a1, w1, w2, s):
        return _dgp1_py(a1, w1, w2, s)

    def psi(self, a1, a2):
        tot = 0.0
        for w1, w2 in itertools.product((0.0, 1.0), repeat=2):
            for s in self.S_VALUES:
                tot += 0.25 * self.q(s, a2, w1, w2) * self.qy(a1, w1, w2, s)
        return float(tot)

    def qqy(self, a1, a2, w1, w2):
        return sum(self.q(s, a2, w1, w2) * self.qy(a1, w1, w2, s) for s in self.S_VALUES)

    def p_a_given_ws(self, a, w1, w2, s):
        p1 = _dgp1_pa(w1, w2) * self.q(s, 1, w1, w2)
        p0 = (1 - _dgp1_pa(w1, w2)) * self.q(s, 0, w1, w2)
        return (p1 if a == 1 else p0) / (p1 + p0)

    def s_given_v(self, w1, w2, a, c, cy):
        """Rows of P(S = 0, 1, 2 | W, A, C, CY); S is independent of C given (W, A)."""
        w1, w2, a, c, cy = (np.asarray(x, dtype=float) for x in (w1, w2, a, c, cy))
        P = np.column_stack([self.q(s, a, w1, w2) for s in self.S_VALUES])
        lik = np.column_stack([
            np.where(c == 1, np.where(cy == 1, _dgp1_py(a, w1, w2, s), 1 - _dgp1_py(a, w1, w2, s)), 1.0)
            for s in self.S_VALUES
        ])
        P = P * lik
        return P / P.sum(axis=1, keepdims=True)

    def dx_terms(self, pair, w1, w2, a, s, c, cy):
        """(t1, t2, QQY) of the full-data EIF with exact nuisances."""
        a1, a2 = pair.a1, pair.a2
        ga2 = _dgp1_pa(w1, w2) if a2 == 1 else 1 - _dgp1_pa(w1, w2)
        gc = _dgp1_pc(w1, w2)
        qy = self.qy(a1, w1, w2, s)
        ratio = self.p_a_given_ws(a2, w1, w2, s) / self.p_a_given_ws(a1, w1, w2, s)
        t1 = ((a == a1) & (c == 1)) / (ga2 * gc) * ratio * (cy - qy)
        qqy = self.qqy(a1, a2, w1, w2)
        t2 = (a == a2) / ga2 * (qy - qqy)
        return t1, t2, qqy


def _dgp1_support():
    """Enumerate (w1, w2, a, s, c, cy) with their probabilities under DGP-1."""
    law = _Dgp1Law()
    rows, probs = [], []
    for w1, w2, a, s, c, y in itertools.product((0, 1), (0, 1), (0, 1), (0, 1, 2), (0, 1), (0, 1)):
        pa = _dgp1_pa(w1, w2) if a == 1 else 1 - _dgp1_pa(w1, w2)
        pc = _dgp1_pc(w1, w2) if c == 1 else 1 - _dgp1_pc(w1, w2)
        py = _dgp1_py(a, w1, w2, s) if y == 1 else 1 - _dgp1_py(a, w1, w2, s)
        rows.append((w1, w2, a, s, c, c * y))
        probs.append(0.25 * pa * law.q(s, a, w1, w2) * pc * py)
    rows = np.array(rows, dtype=float)
    # merge the two censored rows that share cy = 0
    key = [tuple(r) for r in rows]
    merged: dict = {}
    for k, p in zip(key, probs):
        merged[k] = merged.get(k, 0.0) + p
    return np.array(list(merged.keys())), np.array(list(merged.values()))


def _dgp1_gr(c, cy):
    return np.where((c == 1) & (cy == 1), 1.0, SUBCOHORT_FRACTION)


def truth_dgp1(pairs=(TargetPair(1, 0),)) -> TruthRecord:
    """Exact truth and efficiency bounds for DGP-1 by enumeration."""
    law = _Dgp1Law()
    psi = {TargetPair(a1, a2): law.psi(a1, a2) for a1, a2 in ((0, 0), (1, 0), (1, 1), (0, 1))}
    rows, prob = _dgp1_support()
    w1, w2, a, s, c, cy = rows.T
    bounds, extra = {}, {}
    for pair in pairs:
        t1, t2, qqy = law.dx_terms(pair, w1, w2, a, s, c, cy)
        dx = t1 + t2 + qqy - psi[pair]
        # E[D_X | V] by summing over the mediator given V
        P = law.s_given_v(w1, w2, a, c, cy)
        qd = np.zeros_like(dx)
        for k, sv in enumerate(law.S_VALUES):
            u1, u2, uq = law.dx_terms(pair, w1, w2, a, np.full_like(s, sv), c, cy)
            qd += P[:, k] * (u1 + u2 + uq - psi[pair])
        g = _dgp1_gr(c, cy)
        # R = 1 with probability g, R = 0 otherwise
        d1 = dx / g + (1 - 1 / g) * qd
        d0 = qd
        bounds[pair] = float(np.sum(prob * (g * d1 ** 2 + (1 - g) * d0 ** 2)))
        tag = f"{pair.a1}{pair.a2}"
        extra[f"eif_mean{tag}"] = float(np.sum(prob * (g * d1 + (1 - g) * d0)))
        extra[f"full_data_variance{tag}"] = float(np.sum(prob * dx ** 2))
    con = _contrasts(psi[TargetPair(0, 0)], psi[TargetPair(1, 0)], psi[TargetPair(1, 1)])
    return TruthRecord(psi, bounds, method="enumeration", extra=extra, **con)


def dgp1_support_dataset():
    """Phase-two-expanded support of DGP-1 with probabilities, for population expectations.

    Every (w, a, s, c, cy) support point appears once with ``r = 1`` (weight
    ``P * gR``); every (w, a, c, cy) appears once with ``r = 0`` (weight
    ``P(v) * (1 - gR)``). Returns ``(Dataset, weights)``.
    """
    rows, prob = _dgp1_support()
    w1, w2, a, s, c, cy = rows.T
    g = _dgp1_gr(c, cy)
    r1_w = prob * g
    vkey: dict = {}
    for i in range(len(rows)):
        k = (w1[i], w2[i], a[i], c[i], cy[i])
        vkey[k] = vkey.get(k, 0.0) + prob[i]
    vrows = np.array(list(vkey.keys()))
    vprob = np.array(list(vkey.values()))
    g0 = _dgp1_gr(vrows[:, 3], vrows[:, 4])
    keep0 = g0 < 1
    vrows, vprob, g0 = vrows[keep0], vprob[keep0], g0[keep0]
    n1, n0 = len(rows), len(vrows)
    d = Dataset(
        w=np.vstack([np.column_stack([w1, w2]), vrows[:, :2]]),
        a=np.concatenate([a, vrows[:, 2]]).astype(int),
        r=np.concatenate([np.ones(n1), np.zeros(n0)]).astype(int),
        s=np.concatenate([s, np.full(n0, np.nan)]),
        c=np.concatenate([c, vrows[:, 3]]).astype(int),
        cy=np.concatenate([cy, vrows[:, 4]]),
        covariate_names=("W1", "W2"),
        meta={"dgp": "discrete-support"},
        design_gr=np.concatenate([g, g0]),
    )
    return d, np.concatenate([r1_w, vprob * (1 - g0)])


def dgp1_exact_bundle(pair: TargetPair, d: Dataset) -> NuisanceBundle:
    """NuisanceBundle holding the true DGP-1 nuisances (gR from the design)."""
    law = _Dgp1Law()
    a1, a2 = pair.a1, pair.a2

    def gA(W):
        return _dgp1_pa(W[:, 0], W[:, 1])

    def gC(W):
        return _dgp1_pc(W[:, 0], W[:, 1])

    def gAWS(W, S):
        return law.p_a_given_ws(1, W[:, 0], W[:, 1], S)

    def QY(W, S):
        return law.qy(a1, W[:, 0], W[:, 1], S)

    def QQY(W):
        return law.qqy(a1, a2, W[:, 0], W[:, 1])

    def _cond(V, fn):
        P = law.s_given_v(V[:, 0], V[:, 1], V[:, 2], V[:, 3], V[:, 4])
        out = np.zeros(V.shape[0])
        for k, sv in enumerate(law.S_VALUES):
            out += P[:, k] * fn(V, np.full(V.shape[0], sv))
        return out

    def QtQY(V):
        return _cond(V, lambda V, s: law.qy(a1, V[:, 0], V[:, 1], s))

    def QD(V):
        def f(V, s):
            t1, t2, qqy = law.dx_terms(pair, V[:, 0], V[:, 1], V[:, 2], s, V[:, 3], V[:, 4])
            return t1 + t2 + qqy

        return _cond(V, f)

    def QtD(V):
        return _cond(V, lambda V, s: law.dx_terms(pair, V[:, 0], V[:, 1], V[:, 2], s, V[:, 3], V[:, 4])[0])

    wrap = lambda f: Nuisance(f, "exact")  # noqa: E731
    return NuisanceBundle(pair, wrap(gA), wrap(gC), np.asarray(d.design_gr, dtype=float), wrap(gAWS),
                          wrap(QY), wrap(QQY), wrap(QtQY), wrap(QQY), wrap(QD), wrap(QtD),
                          provenance={"all": "exact"})


# ---------------------------------------------------------------------------
# DGP-2
# ---------------------------------------------------------------------------

DGP2_ALPHAS = (-5.0, -4.1, -3.6, -3.3, -3.1)


@dataclass(frozen=True)
class Dgp2Spec:
    n: int = 30000
    alpha: float = -5.0
    seed: int = 0
    per_stratum_vaccine: int = 113
    per_stratum_placebo: int = 15

    def __post_init__(self):
        if self.n < 8 * (self.per_stratum_vaccine + self.per_stratum_placebo):
            raise ValueError("n too small for the stratified subcohort")


def _dgp2_py(alpha, s, a, w1, w2, w3):
    return expit(alpha - 0.5 * s - 1.8 * a + 0.2 * w1 + 0.1 * w2 + 0.7 * w3)


def gen_dgp2(spec: Dgp2Spec, rng: np.random.Generator | None = None) -> Dataset:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.n
    w1 = rng.binomial(1, 0.4, n).astype(float)
    w2 = rng.binomial(1, 0.25, n).astype(float)
    w3 = rng.binomial(1, 0.25, n).astype(float)
    a = rng.binomial(1, 0.5, n)
    s_star = rng.normal(2 - 0.5 * w1, 1.0)
    s = a * (s_star > 0) * s_star
    y = rng.binomial(1, _dgp2_py(spec.alpha, s, a, w1, w2, w3))
    stratum = (w1 + 2 * w2 + 4 * w3).astype(int)
    r = np.zeros(n, dtype=int)
    gr = np.ones(n)
    shortfall = []
    for k in range(8):
        for arm, quota in ((1, spec.per_stratum_vaccine), (0, spec.per_stratum_placebo)):
            members = np.flatnonzero((stratum == k) & (a == arm))
            if members.size <= quota:
                if members.size < quota:
                    shortfall.append((k, arm))
                r[members] = 1
                gr[members] = 1.0
                continue
            r[rng.choice(members, size=quota, replace=False)] = 1
            gr[members] = quota / members.size
    case = y == 1
    r[case] = 1
    gr[case] = 1.0
    meta = {"dgp": "covid", "n": n, "alpha": spec.alpha}
    if shortfall:
        meta["stratum_shortfall"] = shortfall
    return Dataset(np.column_stack([w1, w2, w3]), a, r, np.where(r == 1, s, np.nan), np.ones(n, dtype=int), y,
                   covariate_names=("W1", "W2", "W3"), meta=meta, design_gr=gr)


def truth_dgp2(alpha: float, draws: int = 1_000_000, seed: int = 20211) -> TruthRecord:
    """Monte-Carlo truth for DGP-2: average the arm-a1 risk over the arm-a2 mediator law."""
    if draws < 1:
        raise ValueError("draws must be positive")
    rng = np.random.default_rng(seed)
    w1 = rng.binomial(1, 0.4, draws).astype(float)
    w2 = rng.binomial(1, 0.25, draws).astype(float)
    w3 = rng.binomial(1, 0.25, draws).astype(float)
    s_star = rng.normal(2 - 0.5 * w1, 1.0)
    s1 = np.maximum(s_star, 0.0)
    m = {
        TargetPair(0, 0): _dgp2_py(alpha, 0.0, 0, w1, w2, w3),
        TargetPair(1, 0): _dgp2_py(alpha, 0.0, 1, w1, w2, w3),
        TargetPair(1, 1): _dgp2_py(alpha, s1, 1, w1, w2, w3),
        TargetPair(0, 1): _dgp2_py(alpha, s1, 0, w1, w2, w3),
    }
    psi = {p: float(v.mean()) for p, v in m.items()}
    psi_se = {p: float(v.std(ddof=1) / np.sqrt(draws)) for p, v in m.items()}
    p00, p10, p11 = psi[TargetPair(0, 0)], psi[TargetPair(1, 0)], psi[TargetPair(1, 1)]
    con = _contrasts(p00, p10, p11)
    # delta-method MC standard errors of the contrasts
    M = np.column_stack([m[TargetPair(0, 0)], m[TargetPair(1, 1)], m[TargetPair(1, 0)]])
    cov = np.cov(M, rowvar=False) / draws
    x0, x1, x2 = p00, p11, p10
    u, v = np.log(x2 / x0), np.log(x1 / x0)
    grads = {
        "vaccine_efficacy": np.array([x1 / x0 ** 2, -1 / x0, 0.0]),
        "indirect": np.array([0.0, 1 / x2, -x1 / x2 ** 2]),
        "direct": np.array([-x2 / x0 ** 2, 0.0, 1 / x0]),
        "prop_mediated": np.array([(v - u) / (v ** 2 * x0), u / (v ** 2 * x1), -1 / (v * x2)]),
    }
    cse = {k: float(np.sqrt(g @ cov @ g)) for k, g in grads.items()}
    return TruthRecord(psi, {}, method="monte_carlo", draws=draws, psi_se=psi_se, contrast_se=cse,
                       extra={"alpha": alpha, "expected_placebo_cases": 15000 * p00,
                              "expected_vaccine_cases": 15000 * p11}, **con)


# ---------------------------------------------------------------------------
# Strategy presets
# ---------------------------------------------------------------------------

GLM_MAIN = LearnerSpec("glm_main_terms")
GLM_INTER = LearnerSpec("glm_all_interactions")
SATURATED = LearnerSpec("saturated")
INTERCEPT = LearnerSpec("intercept_only")

# Table-1 settings, named by the nuisances that are estimated consistently.
DISCRETE_PRESETS = {
    "all": {"QY", "QQY", "QD", "gA", "gC", "gAWS"},
    "qy-qqy": {"QY", "QQY"},
    "qy-qqy-qd": {"QY", "QQY", "QD"},
    "g": {"gA", "gC", "gAWS"},
    "g-qd": {"gA", "gC", "gAWS", "QD"},
    "qy-ga-gc": {"QY", "gA", "gC"},
    "qy-ga-gc-qd": {"QY", "gA", "gC", "QD"},
}
COVID_PRESETS = ("glm-inter", "glm-main", "ensemble")


def _ident(spec):
    return spec.with_link("identity")


def discrete_strategy(name: str, p_min: float = regress.P_MIN) -> NuisanceStrategy:
    """Table-1 style strategy: consistent fits for the named nuisances, intercept-only otherwise.

    ``"saturated"`` gives saturated fits everywhere, gR included.
    """
    if name == "saturated":
        ent = {k: SATURATED for k in ("gA", "gC", "gR", "gAWS", "QY", "QQY", "QtQY", "QtQt")}
        ent["QD"] = ent["QtD"] = _ident(SATURATED)
        return NuisanceStrategy(ent, p_min=p_min, name=name)
    if name not in DISCRETE_PRESETS:
        raise KeyError(f"unknown discrete preset {name!r}")
    ok = DISCRETE_PRESETS[name]
    consistent = {
        "gA": GLM_MAIN, "gC": GLM_MAIN, "gAWS": SATURATED, "QY": GLM_MAIN,
        "QQY": SATURATED, "QD": _ident(SATURATED),
    }
    ent = {"gR": GLM_MAIN}
    for k, spec in consistent.items():
        ent[k] = spec if k in ok else (INTERCEPT if k != "QD" else _ident(INTERCEPT))
    # the alternative path's second-stage regressions follow QQY, its projection follows QD
    ent["QtQY"] = SATURATED if "QQY" in ok else INTERCEPT
    ent["QtQt"] = SATURATED if "QQY" in ok else INTERCEPT
    ent["QtD"] = _ident(SATURATED) if "QD" in ok else _ident(INTERCEPT)
    return NuisanceStrategy(ent, p_min=p_min, name=name)


def covid_strategy(name: str, p_min: float = regress.P_MIN, cv_seed: int = 0) -> NuisanceStrategy:
    """DGP-2 strategies: randomization and sampling probabilities known, no censoring."""
    if name == "glm-inter":
        spec = GLM_INTER
    elif name == "glm-main":
        spec = GLM_MAIN
    elif name == "ensemble":
        spec = ensemble_spec(seed=cv_seed)
    else:
        raise KeyError(f"unknown covid preset {name!r}")
    ent = {k: spec for k in ("gAWS", "QY", "QQY", "QtQY", "QtQt")}
    ent["QD"] = ent["QtD"] = _ident(spec)
    ent.update(gA=Known(0.5), gC=Known(1.0), gR=Known("design"))
    return NuisanceStrategy(ent, p_min=p_min, name=name)


def strategy_preset(dgp: str, name: str, p_min: float = regress.P_MIN) -> NuisanceStrategy:
    if dgp == "discrete":
        return discrete_strategy(name, p_min)
    if dgp == "covid":
        return covid_strategy(name, p_min)
    raise KeyError(f"unknown dgp {dgp!r}")


# ---------------------------------------------------------------------------
# Replications
# ---------------------------------------------------------------------------

def replication_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))


REPLICATION_ERRORS = (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError)


def _one_replication(scenario, strategy, r: int):
    from . import estimators as est

    rng = replication_rng(scenario.seed, r)
    out = []
    if scenario.dgp == "discrete":
        d = gen_dgp1(Dgp1Spec(scenario.n, scenario.seed), rng)
        fitter = NuisanceFitter(d, strategy)
        pair = TargetPair(1, 0)
        for name in scenario.estimators:
            e = est.estimate_psi(d, pair, strategy, name, fitter)
            lo, hi = e.ci(scenario.ci_level)
            out.append((name, "psi10", e.one_step, lo, hi, e.se, e.one_step < 0))
    else:
        d = gen_dgp2(Dgp2Spec(scenario.n, scenario.alpha, scenario.seed), rng)
        fitter = NuisanceFitter(d, strategy)
        for name in scenario.estimators:
            rep = est.effect_report(d, strategy, name, scenario.ci_level, fitter)
            p10 = rep.psi[TargetPair(1, 0)]
            neg = p10.one_step < 0
            out.append((name, "psi10", p10.one_step, *p10.ci(scenario.ci_level), p10.se, neg))
            for c in (rep.indirect, rep.prop_mediated):
                out.append((name, c.name, c.estimate, c.lower, c.upper, c.se, neg))
    return out


@dataclass
class ReplicationResult:
    records: list  # (rep, estimator, parameter, estimate, lower, upper, se, negative)
    failures: list  # (rep, message)
    truth: TruthRecord
    wall_time: float


def run_replications(scenario, strategy: NuisanceStrategy | None = None,
                     truth: TruthRecord | None = None) -> ReplicationResult:
    """Run ``scenario.reps`` independent replications; replication r uses stream (seed, r)."""
    t0 = time.perf_counter()
    strategy = strategy or scenario.strategy()
    if truth is None:
        truth = truth_dgp1() if scenario.dgp == "discrete" else truth_dgp2(scenario.alpha, scenario.truth_draws)

    def job(r):
        try:
            return r, _one_replication(scenario, strategy, r), None
        except REPLICATION_ERRORS as exc:
            return r, None, f"{type(exc).__name__}: {exc}"

    threads = scenario.workers
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(job, range(scenario.reps)))
    else:
        results = [job(r) for r in range(scenario.reps)]
    records, failures = [], []
    for r, out, err in results:
        if err is not None:
            failures.append((r, err))
            log.warning("replication %d failed: %s", r, err)
            continue
        records.extend((r, *row) for row in out)
    return ReplicationResult(records, failures, truth, time.perf_counter() - t0)


METRIC_COLUMNS = ("setting", "dgp", "n", "alpha", "estimator", "parameter", "truth", "reps", "used", "failures",
                  "mean_estimate", "bias", "sqrt_n_bias", "sqrt_n_se", "coverage", "ratio",
                  "prop_negative", "median_se", "se_ratio")


def _truth_value(truth: TruthRecord, parameter: str) -> float:
    if parameter == "psi10":
        return truth.psi[TargetPair(1, 0)]
    return getattr(truth, parameter)


def summarize(result: ReplicationResult, scenario) -> list[dict]:
    """One metrics row per (estimator, parameter)."""
    rows = []
    n = scenario.n
    recs = result.records
    keys = sorted({(e, p) for _, e, p, *_ in recs}, key=lambda k: (scenario.estimators.index(k[0]), k[1]))
    bound = result.truth.efficient_variance.get(TargetPair(1, 0))
    for est_name, par in keys:
        sel = [r for r in recs if r[1] == est_name and r[2] == par]
        est = np.array([r[3] for r in sel], dtype=float)
        lo = np.array([r[4] for r in sel], dtype=float)
        hi = np.array([r[5] for r in sel], dtype=float)
        se = np.array([r[6] for r in sel], dtype=float)
        neg = np.array([r[7] for r in sel], dtype=bool)
        ok = np.isfinite(est)
        truth = _truth_value(result.truth, par)
        row = dict.fromkeys(METRIC_COLUMNS, None)
        row.update(setting=scenario.setting, dgp=scenario.dgp, n=n,
                   alpha=scenario.alpha if scenario.dgp == "covid" else None,
                   estimator=est_name, parameter=par, truth=truth, reps=scenario.reps, used=int(ok.sum()),
                   failures=len(result.failures))
        if ok.any():
            e = est[ok]
            row["mean_estimate"] = float(e.mean())
            row["bias"] = float(e.mean() - truth)
            row["sqrt_n_bias"] = float(np.sqrt(n) * (e.mean() - truth))
            row["coverage"] = float(np.mean((lo[ok] <= truth) & (truth <= hi[ok])))
            row["prop_negative"] = float(neg.mean())
            row["median_se"] = float(np.median(se[ok]))
            if ok.sum() > 1:
                sd = float(e.std(ddof=1))
                row["sqrt_n_se"] = float(np.sqrt(n) * sd)
                if par == "psi10" and bound is not None:
                    row["ratio"] = float(np.sqrt(n) * sd / np.sqrt(bound))
                if par == "indirect":
                    # intervals for ratios are built on the log scale
                    sd_log = float(np.log(e[e > 0]).std(ddof=1)) if np.sum(e > 0) > 1 else np.nan
                    row["se_ratio"] = row["median_se"] / sd_log if sd_log > 0 else None
                else:
                    row["se_ratio"] = row["median_se"] / sd if sd > 0 else None
        rows.append(row)
    return rows
