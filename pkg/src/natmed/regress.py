"""Observation-weighted regression learners.

Every nuisance regression in the package goes through :func:`fit`. Supported
learners are intercept-only fits, main-terms and all-interactions GLMs fit by
iteratively reweighted least squares (logit or identity link), saturated fits
on discrete predictors (per-cell weighted means, i.e. the NPMLE), and a
cross-validated convex stacking ensemble of the above.
"""

from __future__ import annotations

import itertools
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit as _logit

from . import kernels

KINDS = ("intercept_only", "glm_main_terms", "glm_all_interactions", "saturated", "ensemble")
LINKS = ("logit", "identity")

P_MIN = 1e-3
MAX_ITER = 50
TOL = 1e-8
RIDGE = 1e-6
# |linear predictor| beyond this is treated as (quasi-)separation
SEPARATION_ETA = 20.0
# squared residual-norm ratio below which a design column counts as collinear
COLLINEAR_TOL = 1e-12
MAX_INTERACTION_PREDICTORS = 12


class SpecError(ValueError):
    pass


class SingularFitError(RuntimeError):
    pass


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    link: str = "logit"
    members: tuple["LearnerSpec", ...] = ()
    cv_folds: int = 10
    cv_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown learner kind {self.kind!r}")
        if self.link not in LINKS:
            raise SpecError(f"unknown link {self.link!r}")
        if (self.kind == "ensemble") != bool(self.members):
            raise SpecError("ensemble members must be given exactly when kind='ensemble'")
        if self.cv_folds < 2:
            raise SpecError("cv_folds must be at least 2")
        object.__setattr__(self, "members", tuple(self.members))

    def with_link(self, link: str) -> "LearnerSpec":
        return LearnerSpec(self.kind, link, tuple(m.with_link(link) for m in self.members),
                           self.cv_folds, self.cv_seed)

    def to_string(self) -> str:
        s = f"{self.kind}/{self.link}"
        if self.kind == "ensemble":
            s += "[" + "+".join(m.kind for m in self.members) + f"]@{self.cv_folds}"
        return s

    @classmethod
    def parse(cls, text: str, default_link: str = "logit") -> "LearnerSpec":
        """Parse ``kind[/link]`` or ``ensemble[/link][[a+b+...]][@folds]``."""
        m = re.fullmatch(r"\s*(\w+)(?:/(\w+))?(?:\[([\w+\s]*)\])?(?:@(\d+))?\s*", text)
        if not m:
            raise SpecError(f"cannot parse learner {text!r}")
        kind, link, members, folds = m.groups()
        link = link or default_link
        if kind == "ensemble":
            names = [x.strip() for x in members.split("+")] if members else list(ENSEMBLE_LIBRARY)
            mem = tuple(cls(name, link) for name in names if name)
            return cls(kind, link, mem, int(folds) if folds else 10)
        if members or folds:
            raise SpecError(f"only ensembles take members or folds: {text!r}")
        return cls(kind, link)


ENSEMBLE_LIBRARY = ("intercept_only", "glm_main_terms", "glm_all_interactions")


def ensemble_spec(link: str = "logit", folds: int = 10, seed: int = 0) -> LearnerSpec:
    return LearnerSpec("ensemble", link, tuple(LearnerSpec(k, link) for k in ENSEMBLE_LIBRARY), folds, seed)


@dataclass(frozen=True)
class WeightedSample:
    predictors: np.ndarray
    response: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.predictors, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.response, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (X.shape[0] == y.shape[0] == w.shape[0]):
            raise ValueError("predictors, response and weights need equal row counts")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")
        if not np.any(w > 0):
            raise ValueError("at least one weight must be positive")
        pos = w > 0
        if not np.all(np.isfinite(y[pos])) or not np.all(np.isfinite(X[pos])):
            raise ValueError("non-finite predictor or response on a positively weighted row")
        object.__setattr__(self, "predictors", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "weights", w)

    def positive(self) -> "WeightedSample":
        pos = self.weights > 0
        if pos.all():
            return self
        return WeightedSample(self.predictors[pos], self.response[pos], self.weights[pos])

    @property
    def weighted_mean(self) -> float:
        pos = self.weights > 0
        return float(np.sum(self.weights[pos] * self.response[pos]) / np.sum(self.weights[pos]))


def design_matrix(kind: str, P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    if kind == "intercept_only":
        return np.ones((n, 1))
    if kind == "glm_main_terms":
        return np.column_stack([np.ones(n), P])
    if kind == "glm_all_interactions":
        if P.shape[1] > MAX_INTERACTION_PREDICTORS:
            raise SpecError(f"all-interactions design limited to {MAX_INTERACTION_PREDICTORS} predictors")
        cols = [np.ones(n)]
        for j in range(P.shape[1]):
            cols += [c * P[:, j] for c in cols]
        return np.column_stack(cols)
    raise SpecError(f"{kind} has no design matrix")


def _independent_columns(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Indices of columns kept by a greedy in-order sweep that drops collinear ones."""
    G = X.T @ (X * w[:, None])
    keep: list[int] = []
    L = np.zeros((0, 0))
    for j in range(G.shape[0]):
        gjj = G[j, j]
        if gjj <= 0:
            continue
        if keep:
            v = np.linalg.solve(L, G[keep, j]) if L.size else np.zeros(0)
            resid = gjj - v @ v
        else:
            v = np.zeros(0)
            resid = gjj
        if resid > COLLINEAR_TOL * gjj:
            k = len(keep)
            L2 = np.zeros((k + 1, k + 1))
            L2[:k, :k] = L
            L2[k, :k] = v
            L2[k, k] = np.sqrt(resid)
            L = L2
            keep.append(j)
    return np.array(keep, dtype=int)


def _irls(X, y, w, link, ridge):
    """Return ``(beta, converged, iterations)`` for the penalised weighted GLM."""
    X = np.ascontiguousarray(X)
    y = np.ascontiguousarray(y)
    w = np.ascontiguousarray(w)
    pen = np.full(X.shape[1], ridge)
    if np.allclose(X[:, 0], 1.0):
        pen[0] = 0.0
    if link == "identity":
        G, b, _ = kernels.irls_accumulate(X, np.zeros_like(y), y, w, False)
        return np.linalg.solve(G + np.diag(pen), b), True, 1

    ybar = np.sum(w * y) / np.sum(w)
    mu = np.clip((y + ybar) / 2.0, 1e-4, 1 - 1e-4)
    eta = _logit(mu)
    beta = None
    dev_old = None
    for it in range(1, MAX_ITER + 1):
        G, b, dev = kernels.irls_accumulate(X, eta, y, w, True)
        if dev_old is not None and abs(dev - dev_old) / (abs(dev) + 0.1) < TOL:
            return beta, True, it
        new = np.linalg.solve(G + np.diag(pen), b)
        if not np.all(np.isfinite(new)):
            return beta, False, it
        beta = new
        eta = X @ beta
        dev_old = dev
    return beta, False, MAX_ITER


class FittedRegression:
    """A fitted learner. Call :meth:`predict` with raw predictor rows."""

    def __init__(self, spec, n_predictors, *, coef=None, keep=None, cells=None, fallback=None,
                 members=None, ensemble_weights=None, cv_risk=None, flags=(), p_min=P_MIN,
                 converged=True, iterations=0):
        self.spec = spec
        self.n_predictors = n_predictors
        self.coef = coef
        self.keep = keep
        self.cells = cells
        self.fallback = fallback
        self.members = members
        self.ensemble_weights = ensemble_weights
        self.cv_risk = cv_risk
        self.flags = frozenset(flags)
        self.p_min = p_min
        self.converged = converged
        self.iterations = iterations

    def __repr__(self):
        return f"FittedRegression({self.spec.to_string()}, flags={sorted(self.flags)})"

    def predict(self, rows, *, clip=True, flags=None) -> np.ndarray:
        """Predict at ``rows``; logit-link predictions are clipped to ``[p_min, 1 - p_min]``.

        If ``flags`` is a set, prediction-time events (``"empty_cell"``) are added to it.
        """
        P = np.asarray(rows, dtype=float)
        if P.ndim == 1:
            P = P[:, None] if self.n_predictors == 1 else P[None, :]
        if P.shape[1] != self.n_predictors:
            raise ValueError(f"expected {self.n_predictors} predictor columns, got {P.shape[1]}")
        kind = self.spec.kind
        if kind == "ensemble":
            preds = np.column_stack([m.predict(P, clip=clip, flags=flags) for m in self.members])
            out = preds @ self.ensemble_weights
        elif kind == "saturated":
            codes, seen = self.cells.encode(P)
            out = np.full(P.shape[0], self.fallback)
            ok = seen.copy()
            ok[seen] = self.cells.populated[codes[seen]]
            out[ok] = self.cells.means[codes[ok]]
            if flags is not None and not ok.all():
                flags.add("empty_cell")
        else:
            X = design_matrix(kind, P)[:, self.keep]
            eta = X @ self.coef
            out = expit(eta) if self.spec.link == "logit" else eta
        if clip and self.spec.link == "logit":
            out = np.clip(out, self.p_min, 1 - self.p_min)
        return out


def predict(f: FittedRegression, rows) -> np.ndarray:
    return f.predict(rows)


class _CellIndex:
    """Mixed-radix coding of discrete predictor rows."""

    def __init__(self, P):
        self.levels = [np.unique(P[:, j]) for j in range(P.shape[1])]
        sizes = [len(lv) for lv in self.levels]
        self.n_cells = int(np.prod(sizes, dtype=np.int64)) if sizes else 1
        if self.n_cells > 10_000_000:
            raise SpecError("too many cells for a saturated fit")
        self.strides = np.cumprod([1] + sizes[:-1]).astype(np.int64) if sizes else np.zeros(0, np.int64)
        self.means = None
        self.populated = None

    def encode(self, P):
        n = P.shape[0]
        codes = np.zeros(n, dtype=np.int64)
        seen = np.ones(n, dtype=bool)
        for j, lv in enumerate(self.levels):
            idx = np.searchsorted(lv, P[:, j])
            idx = np.minimum(idx, len(lv) - 1)
            seen &= lv[idx] == P[:, j]
            codes += idx * self.strides[j]
        return codes, seen


def _is_discrete(P) -> bool:
    return bool(np.all(P == np.round(P)))


def _fit_saturated(spec, sample, p_min):
    P = sample.predictors
    if not _is_discrete(P):
        raise SpecError("saturated fit requires discrete (integer-valued) predictors")
    cells = _CellIndex(P)
    codes, _ = cells.encode(P)
    swy, sw = kernels.cell_sums(codes, sample.response, sample.weights, cells.n_cells)
    populated = sw > 0
    means = np.zeros(cells.n_cells)
    means[populated] = swy[populated] / sw[populated]
    cells.means = means
    cells.populated = populated
    return FittedRegression(spec, P.shape[1], cells=cells, fallback=sample.weighted_mean, p_min=p_min)


def _fit_glm(spec, sample, p_min):
    P, y, w = sample.predictors, sample.response, sample.weights
    X = design_matrix(spec.kind, P)
    keep = _independent_columns(X, w)
    if keep.size == 0:
        raise SingularFitError("design has no usable columns")
    Xk = X[:, keep]
    flags = set()
    try:
        beta, converged, its = _irls(Xk, y, w, spec.link, 0.0)
    except np.linalg.LinAlgError:
        beta, converged, its = None, False, 0
    separated = spec.link == "logit" and beta is not None and np.max(np.abs(Xk @ beta)) > SEPARATION_ETA
    if beta is None or not converged or separated:
        flags.add("irls_fallback")
        try:
            beta, converged, its = _irls(Xk, y, w, spec.link, RIDGE)
        except np.linalg.LinAlgError as exc:
            raise SingularFitError(f"singular fit even with ridge penalty: {exc}") from None
        if beta is None:
            raise SingularFitError("IRLS produced no finite iterate")
    return FittedRegression(spec, P.shape[1], coef=beta, keep=keep, flags=flags, p_min=p_min,
                            converged=converged, iterations=its)


def fit(spec: LearnerSpec, sample: WeightedSample, p_min: float = P_MIN) -> FittedRegression:
    """Fit ``spec`` to a weighted sample.

    Rows with zero weight are ignored. Logit-link fits require responses in
    ``[0, 1]`` (fractional responses are fit by quasi-likelihood).
    """
    sample = sample.positive()
    if spec.link == "logit" and (np.any(sample.response < 0) or np.any(sample.response > 1)):
        raise SpecError("logit link requires responses in [0, 1]")
    if spec.kind == "ensemble":
        return fit_ensemble(spec.members, sample, spec.cv_folds, p_min=p_min, seed=spec.cv_seed, link=spec.link)
    if spec.kind == "saturated":
        return _fit_saturated(spec, sample, p_min)
    if spec.kind == "intercept_only":
        # closed form; identical to the IRLS optimum for either link
        m = sample.weighted_mean
        coef = np.array([_logit(np.clip(m, 1e-300, 1 - 1e-16)) if spec.link == "logit" else m])
        if spec.link == "logit" and m in (0.0, 1.0):
            coef = np.array([-np.inf if m == 0.0 else np.inf])
        return FittedRegression(spec, sample.predictors.shape[1], coef=coef, keep=np.array([0]), p_min=p_min)
    return _fit_glm(spec, sample, p_min)


def simplex_least_squares(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimise ``||A x - b||^2`` over the probability simplex.

    Exact for up to 10 columns: enumerates candidate supports and solves each
    equality-constrained problem (minimum-norm, so identical columns share
    weight uniformly). Larger problems fall back to normalised NNLS.
    """
    k = A.shape[1]
    if k == 1:
        return np.ones(1)
    if k > 10:
        from scipy.optimize import nnls

        x, _ = nnls(A, b)
        return x / x.sum() if x.sum() > 0 else np.full(k, 1.0 / k)
    G = A.T @ A
    c = A.T @ b
    bb = float(b @ b)
    best_x, best_risk = None, np.inf
    scale = max(bb, float(np.max(np.diag(G))), 1e-300)
    for size in range(k, 0, -1):
        for S in itertools.combinations(range(k), size):
            S = list(S)
            m = len(S)
            K = np.zeros((m + 1, m + 1))
            K[:m, :m] = 2 * G[np.ix_(S, S)]
            K[:m, m] = 1
            K[m, :m] = 1
            rhs = np.concatenate([2 * c[S], [1.0]])
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            xs = sol[:m]
            if np.any(xs < -1e-10):
                continue
            xs = np.clip(xs, 0, None)
            xs /= xs.sum()
            x = np.zeros(k)
            x[S] = xs
            risk = float(x @ G @ x - 2 * c @ x + bb)
            if risk < best_risk - 1e-13 * scale:
                best_x, best_risk = x, risk
    return best_x


def fit_ensemble(members, sample: WeightedSample, folds: int = 10, *, p_min: float = P_MIN,
                 seed: int = 0, link: str | None = None) -> FittedRegression:
    """Cross-validated convex stacking of ``members`` under weighted squared error.

    A member that fails on any fold is dropped with a warning; if every member
    fails a :class:`FitError` is raised.
    """
    members = tuple(members)
    if not members:
        raise SpecError("ensemble needs at least one member")
    if folds < 2:
        raise SpecError("folds must be at least 2")
    link = link or members[0].link
    sample = sample.positive()
    P, y, w = sample.predictors, sample.response, sample.weights
    m = len(y)
    V = min(folds, m)
    fold = np.empty(m, dtype=int)
    fold[np.random.default_rng(seed).permutation(m)] = np.arange(m) % V

    Z = np.full((m, len(members)), np.nan)
    ok = np.ones(len(members), dtype=bool)
    if V >= 2:
        for j, spec in enumerate(members):
            try:
                for v in range(V):
                    tr = fold != v
                    f = fit(spec, WeightedSample(P[tr], y[tr], w[tr]), p_min=p_min)
                    Z[~tr, j] = f.predict(P[~tr])
            except (SpecError, SingularFitError, FitError, ValueError, np.linalg.LinAlgError) as exc:
                warnings.warn(f"ensemble member {spec.kind} dropped: {exc}", RuntimeWarning, stacklevel=2)
                ok[j] = False
    else:
        Z[:] = y[:, None]
    if not ok.any():
        raise FitError("every ensemble member failed")
    live = [members[j] for j in range(len(members)) if ok[j]]
    Zl = Z[:, ok]
    sw = np.sqrt(w)
    alpha = simplex_least_squares(Zl * sw[:, None], y * sw)
    risks = np.sum(w[:, None] * (Zl - y[:, None]) ** 2, axis=0) / np.sum(w)
    fitted = [fit(spec, sample, p_min=p_min) for spec in live]
    flags = set().union(*(f.flags for f in fitted))
    spec = LearnerSpec("ensemble", link, live, max(V, 2))
    return FittedRegression(spec, P.shape[1], members=fitted, ensemble_weights=alpha,
                            cv_risk=dict(zip([s.kind for s in live], risks)), flags=flags, p_min=p_min)
