"""Per-observation efficient influence function evaluation.

Three variants are provided for a target pair (a1, a2):

* ``full_data``: the influence function of the full-data functional, defined
  on phase-two rows only;
* ``classic``: the inverse-weighted full-data EIF augmented by the regression
  ``QD`` of the full-data EIF on phase-one variables;
* ``alternative``: the rewritten EIF built from the unweighted ``QtQY``,
  ``QtQt`` and ``QtD`` regressions.

Mediator-dependent terms are multiplied by ``R`` and are therefore set to zero
on rows with ``R == 0``, where the mediator is absent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset

VARIANTS = ("full_data", "classic", "alternative")


@dataclass(frozen=True)
class EifColumn:
    variant: str
    pair: object
    values: np.ndarray
    plug_in_used: float
    index: np.ndarray  # dataset rows the values belong to

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown EIF variant {self.variant!r}")

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["row", "variant", "value"])
            for i, v in zip(self.index, self.values):
                wr.writerow([int(i), self.variant, repr(float(v))])


def _phase2(d: Dataset):
    r1 = np.flatnonzero(d.r == 1)
    return r1, d.w[r1], d.s_filled[r1]


def full_data_terms(d: Dataset, bundle, qy=None):
    """Plug-in-free pieces of the full-data EIF as length-n arrays.

    Returns ``(t1, t2, qqy)``: the inverse-weighted residual term, the
    arm-a2 mediator term (both zero where ``R == 0``) and ``QQY(W)``.
    """
    bundle.require("QQY")
    pair = bundle.pair
    t1 = partial_pseudo_outcome(d, bundle, qy)
    r1, W1, S1 = _phase2(d)
    qy1 = bundle.QY(W1, S1) if qy is None else np.asarray(qy)[r1]
    qqy = bundle.QQY(d.w)
    t2 = np.zeros(d.n)
    ind2 = (d.a[r1] == pair.a2).astype(float)
    t2[r1] = ind2 / bundle.g_arm(W1, pair.a2) * (qy1 - qqy[r1])
    return t1, t2, qqy


def partial_pseudo_outcome(d: Dataset, bundle, qy=None) -> np.ndarray:
    """First (inverse-weighted residual) term of the full-data EIF; zero where ``R == 0``."""
    pair = bundle.pair
    r1, W1, S1 = _phase2(d)
    qy1 = bundle.QY(W1, S1) if qy is None else np.asarray(qy)[r1]
    ind1 = ((d.a[r1] == pair.a1) & (d.c[r1] == 1)).astype(float)
    weight = ind1 / (bundle.g_arm(W1, pair.a2) * bundle.gC(W1)) * bundle.aws_ratio(W1, S1)
    out = np.zeros(d.n)
    out[r1] = weight * (d.cy[r1] - qy1)
    return out


def eval_full_data(d: Dataset, bundle, pair, plug_in: float) -> EifColumn:
    """Full-data EIF on the phase-two rows."""
    _check_pair(bundle, pair)
    t1, t2, qqy = full_data_terms(d, bundle)
    r1 = np.flatnonzero(d.r == 1)
    vals = t1[r1] + t2[r1] + qqy[r1] - plug_in
    return EifColumn("full_data", pair, vals, float(plug_in), r1)


def eval_classic(d: Dataset, bundle, pair, plug_in: float) -> EifColumn:
    """``(R/gR) * D_X + (1 - R/gR) * QD(V)`` on every row."""
    _check_pair(bundle, pair)
    bundle.require("QD")
    t1, t2, qqy = full_data_terms(d, bundle)
    r = d.r.astype(float)
    ipw = r / bundle.gR
    dx = np.where(d.r == 1, t1 + t2 + qqy - plug_in, 0.0)
    qd = bundle.QD(d.V) - plug_in
    vals = ipw * dx + (1.0 - ipw) * qd
    return EifColumn("classic", pair, vals, float(plug_in), np.arange(d.n))


def eval_alternative(d: Dataset, bundle, pair, plug_in: float) -> EifColumn:
    """Five-term rewritten EIF on every row."""
    _check_pair(bundle, pair)
    bundle.require("QtQY", "QtQt", "QtD")
    r = d.r.astype(float)
    gr = bundle.gR
    V = d.V
    ga2 = bundle.g_arm(d.w, pair.a2)
    ind2 = (d.a == pair.a2).astype(float)
    qtqy = bundle.QtQY(V)
    qtqt = bundle.QtQt(d.w)

    t1 = partial_pseudo_outcome(d, bundle)
    r1, W1, S1 = _phase2(d)
    mid = np.zeros(d.n)
    mid[r1] = bundle.QY(W1, S1) - qtqy[r1]

    vals = (r / gr) * t1
    vals = vals + (r / gr) * ind2 / ga2 * mid
    vals = vals + ind2 / ga2 * (qtqy - qtqt)
    vals = vals + (qtqt - plug_in)
    vals = vals - bundle.QtD(V) / gr * (r - gr)
    return EifColumn("alternative", pair, vals, float(plug_in), np.arange(d.n))


def _check_pair(bundle, pair):
    if bundle.pair != pair:
        raise ValueError(f"bundle was fit for pair {bundle.pair}, not {pair}")
