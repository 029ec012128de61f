"""Plug-in and one-step estimators of psi(a1, a2) and the effect contrasts.

Three variants share the same interface:

* ``classic``      -- plug-in ``mean(QQY(W))`` corrected by the classic EIF;
* ``alternative``  -- plug-in ``mean(QtQt(W))`` corrected by the rewritten EIF;
* ``density_ratio`` -- the alternative estimator with ``QY`` rebuilt from
  conditional mediator frequencies, so that no regression of the mediator
  model needs inverse sampling weights (discrete mediators only).

Contrasts on the ratio scale (vaccine efficacy, indirect, direct) use log-scale
Wald intervals from the joint EIF covariance; the proportion mediated uses a
Wald interval on its own scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import eif, regress
from .data import Dataset
from .nuisance import Known, Nuisance, NuisanceError, NuisanceFitter, NuisanceStrategy, TargetPair
from .regress import LearnerSpec, WeightedSample

ESTIMATORS = ("classic", "alternative", "density_ratio")
MAX_DISCRETE_SUPPORT = 20
REPORT_PAIRS = (TargetPair(0, 0), TargetPair(1, 0), TargetPair(1, 1))


class UnsupportedInputError(ValueError):
    pass


@dataclass(frozen=True)
class PsiEstimate:
    pair: TargetPair
    variant: str
    plug_in: float
    one_step: float
    variance_n: float
    eif: eif.EifColumn
    flags: frozenset = frozenset()

    @property
    def n(self) -> int:
        return len(self.eif.values)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance_n / self.n))

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        z = norm.ppf(0.5 + level / 2)
        return self.one_step - z * self.se, self.one_step + z * self.se


def _finish(variant, pair, plug_in, col: eif.EifColumn, flags) -> PsiEstimate:
    v = col.values
    if not np.all(np.isfinite(v)):
        raise NuisanceError(f"non-finite EIF values for {variant} {pair}")
    m = float(np.mean(v))
    var = float(np.mean((v - m) ** 2))
    one = float(plug_in) + m
    flags = set(flags)
    if one < 0:
        flags.add("negative_estimate")
    return PsiEstimate(pair, variant, float(plug_in), one, var, col, frozenset(flags))


def _fitter(d, strategy, fitter):
    if fitter is not None:
        if fitter.d is not d:
            raise ValueError("fitter belongs to a different dataset")
        return fitter
    return NuisanceFitter(d, strategy)


def estimate_psi_classic(d: Dataset, pair: TargetPair, strategy: NuisanceStrategy,
                         fitter: NuisanceFitter | None = None) -> PsiEstimate:
    f = _fitter(d, strategy, fitter)
    b = f.bundle(pair, "classic")
    plug = float(np.mean(b.QQY(d.w)))
    return _finish("classic", pair, plug, eif.eval_classic(d, b, pair, plug), b.flags)


def estimate_psi_alternative(d: Dataset, pair: TargetPair, strategy: NuisanceStrategy,
                             fitter: NuisanceFitter | None = None) -> PsiEstimate:
    f = _fitter(d, strategy, fitter)
    b = f.bundle(pair, "alternative")
    plug = float(np.mean(b.QtQt(d.w)))
    return _finish("alternative", pair, plug, eif.eval_alternative(d, b, pair, plug), b.flags)


def mediator_support(d: Dataset) -> np.ndarray:
    s = d.s[d.r == 1]
    support = np.unique(s)
    if support.size > MAX_DISCRETE_SUPPORT:
        raise UnsupportedInputError(
            f"density-ratio estimator needs a discrete mediator (found {support.size} distinct values)")
    return support


def density_ratio_qy(d: Dataset, a1: int, spec: LearnerSpec, p_min: float = regress.P_MIN) -> Nuisance:
    """QY(W, s) = E{Y q(s|W,Y) | W} / E{q(s|W,Y) | W} among rows with A=a1, C=1.

    ``q(s | W, A=a1, C=1, Y)`` is estimated from the phase-two rows; both outer
    regressions use every row with A=a1, C=1 and no sampling weights.
    """
    support = mediator_support(d)
    W = np.asarray(d.w, dtype=float)
    grp = (d.a == a1) & (d.c == 1)
    ph2 = grp & (d.r == 1)
    if not ph2.any():
        raise NuisanceError(f"density ratio: no phase-two rows with A={a1}, C=1")
    WY = np.column_stack([W, d.cy])
    flags: set = set()
    q = np.zeros((d.n, support.size))
    for k, s in enumerate(support):
        ind = (d.s_filled == s).astype(float)
        f = regress.fit(spec, WeightedSample(WY[ph2], ind[ph2], np.ones(int(ph2.sum()))), p_min=0.0)
        flags |= f.flags
        q[grp, k] = f.predict(WY[grp], clip=False, flags=flags)
    tot = q[grp].sum(axis=1, keepdims=True)
    if not np.allclose(tot, 1.0, rtol=0, atol=1e-12):
        q[grp] /= tot
    ones = np.ones(int(grp.sum()))
    num_fits, den_fits = [], []
    for k in range(support.size):
        num = regress.fit(spec, WeightedSample(W[grp], d.cy[grp] * q[grp, k], ones), p_min=0.0)
        den = regress.fit(spec, WeightedSample(W[grp], q[grp, k], ones), p_min=0.0)
        flags |= num.flags | den.flags
        num_fits.append(num)
        den_fits.append(den)

    def func(Wq, Sq):
        Wq = np.asarray(Wq, dtype=float)
        Sq = np.asarray(Sq, dtype=float)
        idx = np.searchsorted(support, Sq)
        idx = np.minimum(idx, support.size - 1)
        if not np.all(support[idx] == Sq):
            raise UnsupportedInputError("mediator value outside the observed support")
        out = np.empty(Wq.shape[0])
        for k in np.unique(idx):
            m = idx == k
            nu = num_fits[k].predict(Wq[m], clip=False)
            de = den_fits[k].predict(Wq[m], clip=False)
            out[m] = nu / np.maximum(de, p_min)
        return np.clip(out, 0.0, 1.0) if d.binary_outcome else out

    # denominators below p_min at phase-two evaluation points
    r1 = d.r == 1
    idx = np.searchsorted(support, d.s_filled[r1])
    for k in np.unique(idx):
        m = idx == k
        if np.any(den_fits[k].predict(W[r1][m], clip=False) < p_min):
            flags.add("clipped_nuisance")
    return Nuisance(func, f"density ratio with {spec.to_string()} over {support.size} mediator values",
                    frozenset(flags))


def _dr_spec(strategy: NuisanceStrategy) -> LearnerSpec:
    e = strategy["QY"]
    if isinstance(e, Known):
        raise NuisanceError("density-ratio estimator needs a learner for QY")
    return e


def estimate_psi_density_ratio(d: Dataset, pair: TargetPair, strategy: NuisanceStrategy,
                               fitter: NuisanceFitter | None = None) -> PsiEstimate:
    f = _fitter(d, strategy, fitter)
    qy = density_ratio_qy(d, pair.a1, _dr_spec(strategy), strategy.p_min)
    g = f.derive(QY={pair.a1: qy})
    b = g.bundle(pair, "alternative")
    plug = float(np.mean(b.QtQt(d.w)))
    return _finish("density_ratio", pair, plug, eif.eval_alternative(d, b, pair, plug), b.flags)


_ESTIMATE = {
    "classic": estimate_psi_classic,
    "alternative": estimate_psi_alternative,
    "density_ratio": estimate_psi_density_ratio,
}


def estimate_psi(d: Dataset, pair: TargetPair, strategy: NuisanceStrategy, variant: str,
                 fitter: NuisanceFitter | None = None) -> PsiEstimate:
    try:
        fn = _ESTIMATE[variant]
    except KeyError:
        raise ValueError(f"unknown estimator {variant!r}") from None
    return fn(d, pair, strategy, fitter)


# --- contrasts --------------------------------------------------------------

@dataclass(frozen=True)
class Contrast:
    name: str
    estimate: float
    lower: float
    upper: float
    se: float  # on the scale the interval is built on (log scale for ratios)
    flags: frozenset = frozenset()

    @property
    def defined(self) -> bool:
        return bool(np.isfinite(self.estimate))


def _undefined(name, *flags) -> Contrast:
    return Contrast(name, np.nan, np.nan, np.nan, np.nan, frozenset(flags))


def log_ratio_variance(psi_a, psi_b, cov) -> float:
    """Variance of log(psi_a) - log(psi_b) given their 2x2 covariance (already scaled by 1/n)."""
    return cov[0, 0] / psi_a ** 2 + cov[1, 1] / psi_b ** 2 - 2 * cov[0, 1] / (psi_a * psi_b)


def prop_mediated(x0, x1, x2) -> float:
    """1 - log(x2/x0) / log(x1/x0) with x0=psi(0,0), x1=psi(1,1), x2=psi(1,0)."""
    return 1.0 - np.log(x2 / x0) / np.log(x1 / x0)


def prop_mediated_gradient(x0, x1, x2) -> np.ndarray:
    u = np.log(x2) - np.log(x0)
    v = np.log(x1) - np.log(x0)
    return np.array([(v - u) / (v ** 2 * x0), u / (v ** 2 * x1), -1.0 / (v * x2)])


@dataclass(frozen=True)
class EffectReport:
    variant: str
    psi: dict
    vaccine_efficacy: Contrast
    indirect: Contrast
    direct: Contrast
    prop_mediated: Contrast
    covariance: np.ndarray
    ci_level: float = 0.95
    flags: frozenset = frozenset()
    n: int = 0

    def contrasts(self):
        return (self.vaccine_efficacy, self.indirect, self.direct, self.prop_mediated)

    def to_row(self) -> dict:
        row = {"variant": self.variant, "n": self.n, "ci_level": self.ci_level}
        for pair, est in self.psi.items():
            tag = f"psi{pair.a1}{pair.a2}"
            lo, hi = est.ci(self.ci_level)
            row.update({f"{tag}": est.one_step, f"{tag}_plug_in": est.plug_in, f"{tag}_se": est.se,
                        f"{tag}_lower": lo, f"{tag}_upper": hi})
        for c in self.contrasts():
            row.update({c.name: c.estimate, f"{c.name}_lower": c.lower, f"{c.name}_upper": c.upper})
        row["flags"] = ";".join(sorted(self.flags))
        return row

    def to_text(self) -> str:
        pct = int(round(100 * self.ci_level))
        lines = [f"estimator: {self.variant} (n={self.n})"]
        if self.flags:
            lines.append(f"FLAGS: {', '.join(sorted(self.flags))}")
        lines.append(f"{'parameter':<18}{'estimate':>12}{'lower':>12}{'upper':>12}")
        for pair, est in self.psi.items():
            lo, hi = est.ci(self.ci_level)
            lines.append(f"{'psi' + str(pair):<18}{est.one_step:>12.5g}{lo:>12.5g}{hi:>12.5g}")
        for c in self.contrasts():
            extra = "  [" + ", ".join(sorted(c.flags)) + "]" if c.flags else ""
            lines.append(f"{c.name:<18}{c.estimate:>12.5g}{c.lower:>12.5g}{c.upper:>12.5g}{extra}")
        lines.append(f"(intervals: {pct}% Wald; ratios on the log scale)")
        return "\n".join(lines)


def joint_covariance(estimates) -> np.ndarray:
    """Covariance of the one-step estimates: Gram matrix of centered EIF columns over n^2."""
    E = np.column_stack([e.eif.values for e in estimates])
    n = E.shape[0]
    E = E - E.mean(axis=0)
    C = E.T @ E / n / n
    return (C + C.T) / 2


def effect_report(d: Dataset, strategy: NuisanceStrategy, variant: str = "alternative",
                  ci_level: float = 0.95, fitter: NuisanceFitter | None = None,
                  include_01: bool = False) -> EffectReport:
    """Estimate psi at (0,0), (1,0), (1,1) with shared nuisances and derive the contrasts."""
    f = _fitter(d, strategy, fitter)
    pairs = REPORT_PAIRS + ((TargetPair(0, 1),) if include_01 else ())
    psi = {p: estimate_psi(d, p, strategy, variant, f) for p in pairs}
    return build_report(variant, psi, ci_level, p_min=strategy.p_min)


def build_report(variant, psi: dict, ci_level=0.95, p_min=regress.P_MIN) -> EffectReport:
    p00, p10, p11 = (psi[p] for p in REPORT_PAIRS)
    cov = joint_covariance([psi[p] for p in psi])
    keys = list(psi)
    i00, i10, i11 = (keys.index(p) for p in REPORT_PAIRS)
    z = norm.ppf(0.5 + ci_level / 2)
    x00, x10, x11 = p00.one_step, p10.one_step, p11.one_step
    flags = set().union(*(e.flags for e in psi.values()))

    def ratio(name, num, den, inum, iden, transform=None):
        if num <= 0 or den <= 0:
            return _undefined(name, "negative_estimate")
        sub = cov[np.ix_([inum, iden], [inum, iden])]
        se = float(np.sqrt(max(log_ratio_variance(num, den, sub), 0.0)))
        est = np.log(num / den)
        lo, hi = np.exp(est - z * se), np.exp(est + z * se)
        if transform is None:
            return Contrast(name, num / den, lo, hi, se)
        return Contrast(name, 1 - num / den, 1 - hi, 1 - lo, se)

    ve = ratio("vaccine_efficacy", x11, x00, i11, i00, transform="one_minus")
    ind = ratio("indirect", x11, x10, i11, i10)
    dire = ratio("direct", x10, x00, i10, i00)

    if min(x00, x10, x11) <= 0:
        pm = _undefined("prop_mediated", "negative_estimate")
    elif x11 == x00:
        pm = _undefined("prop_mediated", "numerical_instability")
    else:
        pflags = set()
        if x10 / x00 < p_min or x11 / x00 < p_min:
            pflags.add("numerical_instability")
        est = float(prop_mediated(x00, x11, x10))
        g = prop_mediated_gradient(x00, x11, x10)
        idx = [i00, i11, i10]
        se = float(np.sqrt(max(g @ cov[np.ix_(idx, idx)] @ g, 0.0)))
        pm = Contrast("prop_mediated", est, est - z * se, est + z * se, se, frozenset(pflags))
    for c in (ve, ind, dire, pm):
        flags |= c.flags
    return EffectReport(variant, psi, ve, ind, dire, pm, cov, ci_level, frozenset(flags), p00.n)
