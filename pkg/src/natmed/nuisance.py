"""Nuisance regressions for the one-step estimators.

A :class:`NuisanceStrategy` says, for each nuisance, whether it is known by
design or fit with a :class:`~natmed.regress.LearnerSpec`. A
:class:`NuisanceFitter` fits entries lazily and memoizes them, so the nuisances
that do not depend on the target pair are fit once per dataset and shared.

Conventions (all functions act on arrays of rows):

=========  ==========================================  =====================  ============
name       quantity                                    fit rows               weights
=========  ==========================================  =====================  ============
gA         P(A=1 | W)                                  all                    1
gC         P(C=1 | A=a1, W)                            A=a1                   1
gR         P(R=1 | W, A, C, CY), per row               all (or non-cases)     1
gAWS       P(A=1 | W, S)                               R=1                    1/gR
QY         E(Y | A=a1, C=1, W, S)                      R=1, A=a1, C=1         1/gR
QQY        E{QY | A=a2, W}                             R=1, A=a2              1/gR
QtQY       E{QY | R=1, W, A, C, CY}                    R=1                    1
QtQt       E{QtQY | A=a2, W}                           A=a2                   1
QD         E{D_X + psi | R=1, W, A, C, CY}             R=1                    1
QtD        E{first EIF term | R=1, W, A, C, CY}        R=1                    1
=========  ==========================================  =====================  ============

``QD`` is fit to the plug-in-free part of the full-data pseudo-outcome; the
EIF evaluators subtract the plug-in afterwards, so shifting the plug-in shifts
the EIF exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import regress
from .data import Dataset, validate_case_cohort
from .regress import LearnerSpec, WeightedSample

NAMES = ("gA", "gC", "gR", "gAWS", "QY", "QQY", "QtQY", "QtQt", "QD", "QtD")
PROBABILITY = ("gA", "gC", "gAWS")
OUTCOME = ("QY", "QQY", "QtQY", "QtQt")
PROJECTION = ("QD", "QtD")
NEEDED = {
    "classic": ("gA", "gC", "gR", "gAWS", "QY", "QQY", "QD"),
    "alternative": ("gA", "gC", "gR", "gAWS", "QY", "QtQY", "QtQt", "QtD"),
    "density_ratio": ("gA", "gC", "gR", "gAWS", "QY", "QtQY", "QtQt", "QtD"),
}
# Outcome regressions may legitimately be far below any positivity bound
# (rare events), so they are clipped only to keep logits finite.
OUTCOME_CLIP = 1e-12


class NuisanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TargetPair:
    a1: int
    a2: int

    def __post_init__(self):
        if self.a1 not in (0, 1) or self.a2 not in (0, 1):
            raise ValueError("arms must be 0 or 1")

    def __str__(self):
        return f"({self.a1},{self.a2})"


@dataclass(frozen=True)
class Known:
    """A nuisance known by design: a constant, a function of rows, or ``"design"`` (gR only)."""

    value: object

    def __post_init__(self):
        v = self.value
        if isinstance(v, str):
            if v != "design":
                raise ValueError(f"unknown known-value keyword {v!r}")
        elif not callable(v):
            v = float(v)
            if not (0.0 <= v <= 1.0):
                raise ValueError("known probabilities must lie in [0, 1]")
            object.__setattr__(self, "value", v)

    def to_string(self) -> str:
        if callable(self.value):
            raise ValueError("callable known values cannot be serialized")
        return f"known:{self.value!r}" if not isinstance(self.value, str) else f"known:{self.value}"


Entry = Known | LearnerSpec


def parse_entry(text: str, name: str) -> Entry:
    text = text.strip()
    if text.startswith("known:"):
        v = text[len("known:"):].strip()
        return Known(v if v == "design" else float(v))
    link = "identity" if name in PROJECTION else "logit"
    return LearnerSpec.parse(text, default_link=link)


def entry_to_string(e: Entry) -> str:
    return e.to_string()


@dataclass(frozen=True)
class NuisanceStrategy:
    """Per-nuisance estimation strategy.

    Entries missing from ``entries`` fall back to ``default`` when given.
    """

    entries: Mapping[str, Entry]
    p_min: float = regress.P_MIN
    name: str = "custom"

    def __post_init__(self):
        ent = dict(self.entries)
        for k, v in ent.items():
            if k not in NAMES:
                raise ValueError(f"unknown nuisance {k!r}")
            if not isinstance(v, (Known, LearnerSpec)):
                raise TypeError(f"{k}: entry must be Known or LearnerSpec")
            if isinstance(v, Known) and v.value == "design" and k != "gR":
                raise ValueError(f"{k}: only gR may be known from the design")
        if not (0 < self.p_min < 0.5):
            raise ValueError("p_min must lie in (0, 0.5)")
        object.__setattr__(self, "entries", ent)

    def __getitem__(self, name: str) -> Entry:
        try:
            return self.entries[name]
        except KeyError:
            raise NuisanceError(f"strategy has no entry for {name}") from None

    def missing(self, variant: str) -> list[str]:
        return [k for k in NEEDED[variant] if k not in self.entries]

    def with_entries(self, **kw) -> "NuisanceStrategy":
        ent = dict(self.entries)
        ent.update(kw)
        return replace(self, entries=ent)

    def to_mapping(self) -> dict[str, str]:
        return {k: entry_to_string(self.entries[k]) for k in NAMES if k in self.entries}

    @classmethod
    def from_mapping(cls, m: Mapping[str, str], p_min: float = regress.P_MIN, name: str = "custom"):
        return cls({k: parse_entry(v, k) for k, v in m.items()}, p_min=p_min, name=name)


def uniform_strategy(spec: LearnerSpec, p_min: float = regress.P_MIN, **known) -> NuisanceStrategy:
    """Same learner for every nuisance (identity link for the EIF projections)."""
    ent: dict[str, Entry] = {}
    for k in NAMES:
        ent[k] = spec.with_link("identity") if k in PROJECTION else spec
    ent.update(known)
    return NuisanceStrategy(ent, p_min=p_min, name=spec.kind)


@dataclass(frozen=True)
class Nuisance:
    """A fitted nuisance: callable on rows, with provenance and fit flags."""

    func: Callable | None
    provenance: str
    flags: frozenset = frozenset()

    def __call__(self, *args):
        return self.func(*args)


@dataclass(frozen=True)
class NuisanceBundle:
    """Everything the EIF evaluators need for one target pair."""

    pair: TargetPair
    gA: Nuisance
    gC: Nuisance
    gR: np.ndarray
    gAWS: Nuisance
    QY: Nuisance
    QQY: Nuisance | None = None
    QtQY: Nuisance | None = None
    QtQt: Nuisance | None = None
    QD: Nuisance | None = None
    QtD: Nuisance | None = None
    provenance: Mapping[str, str] = field(default_factory=dict)
    flags: frozenset = frozenset()
    p_min: float = regress.P_MIN

    def g_arm(self, W, a: int) -> np.ndarray:
        """P(A=a | W)."""
        p = self.gA(W)
        return p if a == 1 else 1.0 - p

    def aws_ratio(self, W, S) -> np.ndarray:
        """g(a2 | W, S) / g(a1 | W, S); identically one when a1 == a2."""
        if self.pair.a1 == self.pair.a2:
            return np.ones(np.asarray(W).shape[0])
        p1 = self.gAWS(W, S)
        num = p1 if self.pair.a2 == 1 else 1.0 - p1
        den = p1 if self.pair.a1 == 1 else 1.0 - p1
        return num / den

    def require(self, *names):
        for k in names:
            if getattr(self, k) is None:
                raise NuisanceError(f"bundle lacks {k}")


def _const(value, width=None):
    def f(*args):
        n = np.asarray(args[0]).shape[0] if args else 1
        return np.full(n, value, dtype=float)

    return f


def _known_func(name, k: Known):
    if callable(k.value):
        fn = k.value

        def f(*args):
            return np.asarray(fn(*args), dtype=float).reshape(-1)

        return f
    return _const(k.value)


def _provenance(spec: LearnerSpec, predictors: str, rows: str, weighted: bool) -> str:
    w = "weights 1/gR" if weighted else "unweighted"
    return f"learner {spec.to_string()} on {predictors}; rows {rows}; {w}"


class NuisanceFitter:
    """Lazily fits and memoizes the nuisances of one dataset under one strategy."""

    # entries that depend neither on the pair nor on QY
    SHARED = ("gA", "gR", "gAWS", "gC")

    def __init__(self, d: Dataset, strategy: NuisanceStrategy):
        self.d = d
        self.strategy = strategy
        self.p_min = strategy.p_min
        self._cache: dict = {}
        self.W = np.asarray(d.w, dtype=float)
        self.S = d.s_filled
        self.WS = np.column_stack([self.W, self.S])
        self.Vm = d.V
        self.r1 = d.r == 1

    # -- helpers -------------------------------------------------------------
    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def derive(self, **seed) -> "NuisanceFitter":
        """A fitter sharing this one's pair-free fits, with extra cache entries seeded."""
        new = NuisanceFitter.__new__(NuisanceFitter)
        new.__dict__.update(self.__dict__)
        new._cache = {k: v for k, v in self._cache.items() if k[0] in self.SHARED}
        for name, per_arm in seed.items():
            for arm, entry in per_arm.items():
                new._cache[(name, arm)] = entry
        return new

    def _fit(self, name, spec, P, y, w, mask, p_min):
        if not np.any(mask) or not np.any(w[mask] > 0):
            raise NuisanceError(f"{name}: zero effective weight in the fit subgroup")
        try:
            return regress.fit(spec, WeightedSample(P[mask], y[mask], w[mask]), p_min=p_min)
        except (regress.SingularFitError, regress.FitError) as exc:
            raise NuisanceError(f"{name}: {exc}") from exc

    def _prob(self, name, spec, P, y, w, mask, eval_rows):
        """Fit a probability nuisance and wrap it with [p_min, 1 - p_min] clipping."""
        f = self._fit(name, spec, P, y, w, mask, self.p_min)
        lo, hi = self.p_min, 1 - self.p_min
        flags = set(f.flags)
        raw = f.predict(eval_rows, clip=False, flags=flags)
        if np.any(raw < lo) or np.any(raw > hi):
            flags.add("clipped_nuisance")

        def func(*cols):
            X = cols[0] if len(cols) == 1 else np.column_stack(cols)
            return np.clip(f.predict(X, clip=False), lo, hi)

        return func, frozenset(flags)

    def _outcome(self, name, spec, P, y, w, mask, eval_rows):
        f = self._fit(name, spec, P, y, w, mask, OUTCOME_CLIP)
        flags = set(f.flags)
        f.predict(eval_rows, flags=flags)

        def func(*cols):
            X = cols[0] if len(cols) == 1 else np.column_stack(cols)
            return f.predict(X)

        return func, frozenset(flags)

    def _inverse_gr(self):
        return 1.0 / self.gR()

    # -- pair-free -----------------------------------------------------------
    def gA(self) -> Nuisance:
        def build():
            e = self.strategy["gA"]
            if isinstance(e, Known):
                return Nuisance(_known_func("gA", e), f"known {e.to_string() if not callable(e.value) else 'function'}")
            ones = np.ones(self.d.n)
            func, flags = self._prob("gA", e, self.W, self.d.a.astype(float), ones, ones > 0, self.W)
            return Nuisance(func, _provenance(e, "W", "all", False), flags)

        return self._memo(("gA", None), build)

    def gR_entry(self) -> Nuisance:
        def build():
            d = self.d
            e = self.strategy["gR"]
            if isinstance(e, Known):
                if e.value == "design":
                    if d.design_gr is None:
                        raise NuisanceError("gR: design probabilities requested but not supplied")
                    vals = np.asarray(d.design_gr, dtype=float)
                    prov = "known from design"
                else:
                    vals = np.broadcast_to(_known_func("gR", e)(self.Vm), (d.n,)).astype(float)
                    prov = "known"
                if np.any(vals <= 0) or np.any(vals > 1):
                    raise NuisanceError("gR: known probabilities must lie in (0, 1]")
                return Nuisance(None, prov), vals
            r = d.r.astype(float)
            flags = set()
            cases = (d.c == 1) & (d.cy == 1)
            all_cases = cases.any() and validate_case_cohort(d).all_cases_sampled
            if all_cases:
                mask, P = ~cases, np.column_stack([self.W, d.a, d.c])
                rows = "non-cases; cases set to 1"
            else:
                mask, P = np.ones(d.n, dtype=bool), self.Vm
                rows = "all"
            vals = np.ones(d.n)
            if mask.any():
                sub_r = r[mask]
                if np.all(sub_r == 1):
                    vals[mask] = 1.0
                else:
                    f = self._fit("gR", e, P, r, np.ones(d.n), mask, self.p_min)
                    flags |= f.flags
                    raw = f.predict(P[mask], clip=False, flags=flags)
                    if np.any(raw < self.p_min):
                        flags.add("clipped_nuisance")
                    vals[mask] = np.clip(raw, self.p_min, 1.0)
            prov = _provenance(e, "W, A, C" if all_cases else "W, A, C, CY", rows, False)
            return Nuisance(None, prov, frozenset(flags)), vals

        return self._memo(("gR", None), build)

    def gR(self) -> np.ndarray:
        return self.gR_entry()[1]

    def gC(self, a1: int) -> Nuisance:
        def build():
            e = self.strategy["gC"]
            if isinstance(e, Known):
                return Nuisance(_known_func("gC", e), "known")
            mask = self.d.a == a1
            if not mask.any():
                raise NuisanceError(f"gC: no rows with A={a1}")
            ones = np.ones(self.d.n)
            func, flags = self._prob("gC", e, self.W, self.d.c.astype(float), ones, mask, self.W)
            return Nuisance(func, _provenance(e, "W", f"A={a1}", False), flags)

        return self._memo(("gC", a1), build)

    def gAWS(self) -> Nuisance:
        def build():
            e = self.strategy["gAWS"]
            if isinstance(e, Known):
                return Nuisance(_known_func("gAWS", e), "known")
            func, flags = self._prob("gAWS", e, self.WS, self.d.a.astype(float), self._inverse_gr(),
                                     self.r1, self.WS[self.r1])
            return Nuisance(func, _provenance(e, "W, S", "R=1", True), flags)

        return self._memo(("gAWS", None), build)

    # -- outcome regressions -------------------------------------------------
    def QY(self, a1: int) -> Nuisance:
        def build():
            e = self.strategy["QY"]
            if isinstance(e, Known):
                return Nuisance(_known_func("QY", e), "known")
            d = self.d
            mask = self.r1 & (d.a == a1) & (d.c == 1)
            if not mask.any():
                raise NuisanceError(f"QY: no rows with R=1, A={a1}, C=1")
            func, flags = self._outcome("QY", e, self.WS, d.cy, self._inverse_gr(), mask, self.WS[self.r1])
            return Nuisance(func, _provenance(e, "W, S", f"R=1, A={a1}, C=1", True), flags)

        return self._memo(("QY", a1), build)

    def qy_values(self, a1: int) -> np.ndarray:
        """QY evaluated at every row's (W, S); meaningful on R=1 rows only."""
        return self._memo(("QYv", a1), lambda: self.QY(a1)(self.W, self.S))

    def QQY(self, pair: TargetPair) -> Nuisance:
        def build():
            e = self.strategy["QQY"]
            if isinstance(e, Known):
                return Nuisance(_known_func("QQY", e), "known")
            mask = self.r1 & (self.d.a == pair.a2)
            if not mask.any():
                raise NuisanceError(f"QQY: no rows with R=1, A={pair.a2}")
            func, flags = self._outcome("QQY", e, self.W, self.qy_values(pair.a1), self._inverse_gr(), mask, self.W)
            return Nuisance(func, _provenance(e, "W", f"R=1, A={pair.a2}", True), flags)

        return self._memo(("QQY", pair), build)

    def QtQY(self, a1: int) -> Nuisance:
        def build():
            e = self.strategy["QtQY"]
            if isinstance(e, Known):
                return Nuisance(_known_func("QtQY", e), "known")
            ones = np.ones(self.d.n)
            func, flags = self._outcome("QtQY", e, self.Vm, self.qy_values(a1), ones, self.r1, self.Vm)
            return Nuisance(func, _provenance(e, "W, A, C, CY", "R=1", False), flags)

        return self._memo(("QtQY", a1), build)

    def QtQt(self, pair: TargetPair) -> Nuisance:
        def build():
            e = self.strategy["QtQt"]
            if isinstance(e, Known):
                return Nuisance(_known_func("QtQt", e), "known")
            mask = self.d.a == pair.a2
            if not mask.any():
                raise NuisanceError(f"QtQt: no rows with A={pair.a2}")
            pseudo = self.QtQY(pair.a1)(self.Vm)
            ones = np.ones(self.d.n)
            func, flags = self._outcome("QtQt", e, self.W, pseudo, ones, mask, self.W)
            return Nuisance(func, _provenance(e, "W", f"A={pair.a2}", False), flags)

        return self._memo(("QtQt", pair), build)

    # -- EIF projections -----------------------------------------------------
    def projection(self, name: str, pair: TargetPair, pseudo: np.ndarray) -> Nuisance:
        def build():
            return fit_eif_projection(self.d, pseudo, self.strategy[name], which=name)

        return self._memo((name, pair), build)

    # -- assembly ------------------------------------------------------------
    def bundle(self, pair: TargetPair, variant: str) -> NuisanceBundle:
        from . import eif

        missing = self.strategy.missing(variant)
        if missing:
            raise NuisanceError(f"strategy lacks entries for {', '.join(missing)}")
        gr_entry, gr = self.gR_entry()
        parts = dict(
            pair=pair, gA=self.gA(), gC=self.gC(pair.a1), gR=gr, QY=self.QY(pair.a1),
            gAWS=self.gAWS() if pair.a1 != pair.a2 else Nuisance(None, "not needed"),
            p_min=self.p_min,
        )
        if variant == "classic":
            parts["QQY"] = self.QQY(pair)
            partial = NuisanceBundle(**parts)
            t1, t2, qqy = eif.full_data_terms(self.d, partial, qy=self.qy_values(pair.a1))
            parts["QD"] = self.projection("QD", pair, t1 + t2 + qqy)
        else:
            parts["QtQY"] = self.QtQY(pair.a1)
            parts["QtQt"] = self.QtQt(pair)
            partial = NuisanceBundle(**parts)
            parts["QtD"] = self.projection("QtD", pair, eif.partial_pseudo_outcome(self.d, partial,
                                                                                 qy=self.qy_values(pair.a1)))
        entries = {k: v for k, v in parts.items() if isinstance(v, Nuisance)}
        entries["gR"] = gr_entry
        prov = {k: v.provenance for k, v in entries.items()}
        flags = frozenset().union(*(v.flags for v in entries.values()))
        return NuisanceBundle(**parts, provenance=prov, flags=flags)


def fit_gR(d: Dataset, strategy: NuisanceStrategy) -> np.ndarray:
    return NuisanceFitter(d, strategy).gR()


def fit_phase1_nuisances(d: Dataset, pair: TargetPair, strategy: NuisanceStrategy) -> dict:
    f = NuisanceFitter(d, strategy)
    return {"gA": f.gA(), "gC": f.gC(pair.a1)}


def fit_phase2_nuisances(d: Dataset, pair: TargetPair, strategy: NuisanceStrategy) -> dict:
    f = NuisanceFitter(d, strategy)
    out = {"QY": f.QY(pair.a1)}
    out["gAWS"] = f.gAWS() if pair.a1 != pair.a2 else Nuisance(None, "not needed")
    return out


def fit_classic_second_stage(d: Dataset, pair: TargetPair, strategy: NuisanceStrategy) -> Nuisance:
    return NuisanceFitter(d, strategy).QQY(pair)


def fit_alternative_second_stage(d: Dataset, pair: TargetPair, strategy: NuisanceStrategy) -> dict:
    f = NuisanceFitter(d, strategy)
    return {"QtQY": f.QtQY(pair.a1), "QtQt": f.QtQt(pair)}


def fit_eif_projection(d: Dataset, pseudo_outcome, entry: Entry, which: str = "QD") -> Nuisance:
    """Unweighted regression of a pseudo-outcome on (W, A, C, CY) among R=1 rows.

    ``pseudo_outcome`` has one entry per row of ``d``; entries on R=0 rows are ignored.
    """
    if isinstance(entry, Known):
        return Nuisance(_known_func(which, entry), "known")
    spec = entry if entry.link == "identity" else entry.with_link("identity")
    y = np.where(d.r == 1, np.asarray(pseudo_outcome, dtype=float), 0.0)
    r1 = d.r == 1
    if not r1.any():
        raise NuisanceError(f"{which}: no phase-two rows")
    V = d.V
    f = regress.fit(spec, WeightedSample(V[r1], y[r1], np.ones(int(r1.sum()))))
    flags = set(f.flags)
    f.predict(V, flags=flags)
    return Nuisance(lambda X: f.predict(X), _provenance(spec, "W, A, C, CY", "R=1", False), frozenset(flags))
