"""Tabular data model for two-phase sampled trial data.

A :class:`Dataset` holds one row per participant: covariates ``w``, arm ``a``,
phase-two indicator ``r``, mediator ``s`` (absent, stored as NaN, when
``r == 0``), non-censoring indicator ``c`` and observed outcome ``cy = c * y``.
"""

from __future__ import annotations

import csv
import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Base class for data ingestion and validation errors."""


class CsvParseError(DataError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class ValidationError(DataError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class InestimableError(DataError):
    """Raised when the data cannot support estimation of a target (e.g. an empty arm)."""


class Category(enum.Enum):
    CENSORED = "censored"
    SURVIVOR = "survivor"
    CASE = "case"


def category_code(c: int, cy: int) -> Category:
    """Map a ``(C, CY)`` pair onto the three participant categories."""
    key = (int(c), int(cy))
    if key == (0, 0):
        return Category.CENSORED
    if key == (1, 0):
        return Category.SURVIVOR
    if key == (1, 1):
        return Category.CASE
    raise ValidationError(f"(C, CY) = {key} is not a legal category; outcome recorded under censoring")


def category_dummies(c, cy) -> np.ndarray:
    """Two-column dummy coding of the categories, censored as reference.

    The columns are ``1{not censored}`` and ``1{case}``, which are ``c`` and
    ``cy`` themselves.
    """
    return np.column_stack([np.asarray(c, dtype=float), np.asarray(cy, dtype=float)])


@dataclass(frozen=True)
class Observation:
    w: tuple[float, ...]
    a: int
    r: int
    s: float | None
    c: int
    cy: int

    def __post_init__(self):
        for name in ("a", "r", "c", "cy"):
            if getattr(self, name) not in (0, 1):
                raise ValidationError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")
        if self.c == 0 and self.cy != 0:
            raise ValidationError("outcome recorded under censoring")
        if (self.s is None) != (self.r == 0):
            raise ValidationError("mediator must be present exactly when r = 1")


def _readonly(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable columnar store of two-phase sampled observations.

    Parameters
    ----------
    w : array of shape (n, p)
        Covariates, stored as floats.
    a, r, c, cy : arrays of shape (n,)
        Binary indicators.
    s : array of shape (n,)
        Mediator; NaN exactly where ``r == 0``.
    covariate_names : sequence of str, optional
    meta : mapping, optional
        Free-form source descriptor.
    design_gr : array of shape (n,), optional
        Phase-two inclusion probabilities known from the sampling design.
    binary_outcome : bool
        When False, ``cy`` may be any real number (still zero under censoring).
        Only used to exercise outcome-scale properties of the estimators.
    """

    w: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s: np.ndarray
    c: np.ndarray
    cy: np.ndarray
    covariate_names: tuple[str, ...] = ()
    meta: Mapping = field(default_factory=dict)
    design_gr: np.ndarray | None = None
    binary_outcome: bool = True

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        if w.ndim != 2:
            raise ValidationError("covariates must form a 2-d array")
        n = w.shape[0]
        cols = {}
        for name in ("a", "r", "c"):
            cols[name] = self._binary(name, getattr(self, name), n)
        if self.binary_outcome:
            cy = self._binary("cy", self.cy, n).astype(float)
        else:
            cy = np.asarray(self.cy, dtype=float).reshape(-1)
            if cy.shape != (n,) or not np.all(np.isfinite(cy)):
                raise ValidationError("cy must be a finite vector with one entry per row")
        s = np.asarray(self.s, dtype=float).reshape(-1)
        if s.shape != (n,):
            raise ValidationError("s must have one entry per row")
        if not np.all(np.isfinite(w)):
            bad = int(np.flatnonzero(~np.isfinite(w).all(axis=1))[0])
            raise ValidationError("non-finite covariate", row=bad)

        censored_outcome = (cols["c"] == 0) & (cy != 0)
        if censored_outcome.any():
            raise ValidationError("outcome recorded under censoring", row=int(np.flatnonzero(censored_outcome)[0]))
        missing = np.isnan(s)
        bad = missing == (cols["r"] == 1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            what = "mediator missing with R=1" if cols["r"][i] == 1 else "mediator present with R=0"
            raise ValidationError(what, row=i)
        if np.isinf(s).any():
            raise ValidationError("infinite mediator value", row=int(np.flatnonzero(np.isinf(s))[0]))

        names = tuple(self.covariate_names) or tuple(f"W{j + 1}" for j in range(w.shape[1]))
        if len(names) != w.shape[1]:
            raise ValidationError("covariate_names does not match covariate dimension")

        gr = self.design_gr
        if gr is not None:
            gr = np.asarray(gr, dtype=float).reshape(-1)
            if gr.shape != (n,) or np.any(~np.isfinite(gr)) or np.any(gr <= 0) or np.any(gr > 1):
                raise ValidationError("design_gr must lie in (0, 1] for every row")
            gr = _readonly(gr)

        object.__setattr__(self, "w", _readonly(w))
        for name, col in cols.items():
            object.__setattr__(self, name, _readonly(col))
        object.__setattr__(self, "cy", _readonly(cy))
        object.__setattr__(self, "s", _readonly(s))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "meta", dict(self.meta))
        object.__setattr__(self, "design_gr", gr)

    @staticmethod
    def _binary(name, x, n):
        x = np.asarray(x)
        if x.shape != (n,):
            raise ValidationError(f"{name} must have one entry per row")
        if x.dtype.kind == "f" and not np.all(np.isfinite(x)):
            raise ValidationError(f"non-finite {name}", row=int(np.flatnonzero(~np.isfinite(x))[0]))
        bad = (x != 0) & (x != 1)
        if bad.any():
            raise ValidationError(f"{name} must be 0 or 1", row=int(np.flatnonzero(bad)[0]))
        return x.astype(np.int8)

    def __len__(self) -> int:
        return self.w.shape[0]

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def p(self) -> int:
        return self.w.shape[1]

    @property
    def V(self) -> np.ndarray:
        """Phase-one variables ``(W, A, C, CY)`` as a float matrix."""
        return np.column_stack([self.w, self.a, self.c, self.cy]).astype(float)

    @property
    def s_filled(self) -> np.ndarray:
        """Mediator with absent values set to 0, for regressions that zero-weight those rows."""
        return np.where(self.r == 1, self.s, 0.0)

    @property
    def rows(self) -> tuple[Observation, ...]:
        out = []
        for i in range(self.n):
            s = None if self.r[i] == 0 else float(self.s[i])
            out.append(Observation(tuple(float(v) for v in self.w[i]), int(self.a[i]), int(self.r[i]), s,
                                   int(self.c[i]), int(round(self.cy[i])) if self.binary_outcome else self.cy[i]))
        return tuple(out)

    @classmethod
    def from_rows(cls, rows: Sequence[Observation], covariate_names=(), meta=None) -> "Dataset":
        if not rows:
            raise ValidationError("dataset needs at least one row")
        dims = {len(o.w) for o in rows}
        if len(dims) != 1:
            raise ValidationError("all rows must have the same covariate dimension")
        return cls(
            w=np.array([o.w for o in rows], dtype=float),
            a=np.array([o.a for o in rows]),
            r=np.array([o.r for o in rows]),
            s=np.array([np.nan if o.s is None else o.s for o in rows], dtype=float),
            c=np.array([o.c for o in rows]),
            cy=np.array([o.cy for o in rows]),
            covariate_names=covariate_names,
            meta=meta or {},
        )

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            w=self.w[mask], a=self.a[mask], r=self.r[mask], s=self.s[mask], c=self.c[mask], cy=self.cy[mask],
            covariate_names=self.covariate_names, meta=self.meta,
            design_gr=None if self.design_gr is None else self.design_gr[mask],
            binary_outcome=self.binary_outcome,
        )

    def with_outcome(self, cy) -> "Dataset":
        """Copy with a replaced (possibly real-valued) outcome column."""
        cy = np.asarray(cy, dtype=float)
        binary = self.binary_outcome and bool(np.all((cy == 0) | (cy == 1)))
        return Dataset(self.w, self.a, self.r, self.s, self.c, cy, self.covariate_names, self.meta,
                       self.design_gr, binary_outcome=binary)

    def with_design_gr(self, gr) -> "Dataset":
        return Dataset(self.w, self.a, self.r, self.s, self.c, self.cy, self.covariate_names, self.meta,
                       gr, binary_outcome=self.binary_outcome)

    def check_estimable(self, arms=(0, 1)) -> None:
        """Raise :class:`InestimableError` unless every requested arm has phase-two rows."""
        for arm in arms:
            if not np.any(self.a == arm):
                raise InestimableError(f"no participants in arm A={arm}")
            if not np.any((self.a == arm) & (self.r == 1)):
                raise InestimableError(f"no phase-two (R=1) participants in arm A={arm}")

    def equals(self, other: "Dataset") -> bool:
        return (
            self.covariate_names == other.covariate_names
            and np.array_equal(self.w, other.w)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.s, other.s, equal_nan=True)
            and np.array_equal(self.c, other.c)
            and np.array_equal(self.cy, other.cy)
        )


@dataclass(frozen=True)
class CaseCohortCheck:
    all_cases_sampled: bool
    per_stratum_counts: dict  # (w..., a) -> (n_total, n_sampled)


def validate_case_cohort(d: Dataset) -> CaseCohortCheck:
    """Report whether every case was sampled, with per-(W, A) stratum counts."""
    cases = (d.c == 1) & (d.cy == 1)
    all_sampled = bool(np.all(d.r[cases] == 1))
    keys = [tuple(row) for row in np.column_stack([d.w, d.a]).tolist()]
    totals = Counter(keys)
    sampled = Counter(k for k, r in zip(keys, d.r) if r == 1)
    counts = {k: (totals[k], sampled.get(k, 0)) for k in sorted(totals)}
    return CaseCohortCheck(all_sampled, counts)


# --- CSV ------------------------------------------------------------------

@dataclass(frozen=True)
class Schema:
    """Column names for each variable in a trial CSV."""

    w: tuple[str, ...]
    a: str = "A"
    r: str = "R"
    s: str = "S"
    c: str = "C"
    y: str = "Y"
    gr: str | None = None  # optional per-row design probability column

    @property
    def columns(self) -> list[str]:
        return [*self.w, self.a, self.r, self.s, self.c, self.y]

    @classmethod
    def from_mapping(cls, m: Mapping[str, str]) -> "Schema":
        w = m.get("w")
        if not w:
            raise ValidationError("schema must name the covariate columns (key 'w')")
        if isinstance(w, str):
            w = [x.strip() for x in w.split(",") if x.strip()]
        kw = {k: m[k] for k in ("a", "r", "s", "c", "y", "gr") if m.get(k)}
        return cls(w=tuple(w), **kw)


def _parse_binary(text, row, col):
    try:
        v = int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            raise CsvParseError(row, f"column {col!r}: cannot parse {text!r}") from None
        if f not in (0.0, 1.0):
            raise CsvParseError(row, f"column {col!r}: expected 0/1, got {text!r}")
        v = int(f)
    if v not in (0, 1):
        raise CsvParseError(row, f"column {col!r}: expected 0/1, got {text!r}")
    return v


def _parse_float(text, row, col):
    try:
        return float(text)
    except ValueError:
        raise CsvParseError(row, f"column {col!r}: cannot parse {text!r}") from None


def load_csv(path, schema: Schema | None = None) -> Dataset:
    """Read and validate a trial CSV.

    Row indices in error messages count data rows from 0 (the header is not
    counted). An empty mediator cell marks a row with ``R = 0``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(0, "empty file (header row required)") from None
        header = [h.strip() for h in header]
        if schema is None:
            fixed = {"A", "R", "S", "C", "Y"}
            schema = Schema(w=tuple(h for h in header if h not in fixed and h != "GR"),
                            gr="GR" if "GR" in header else None)
        missing = [col for col in schema.columns if col not in header]
        if schema.gr and schema.gr not in header:
            missing.append(schema.gr)
        if missing:
            raise CsvParseError(0, f"header lacks columns {missing}")
        idx = {h: j for j, h in enumerate(header)}
        W, A, R, S, C, CY, GR = [], [], [], [], [], [], []
        for i, rec in enumerate(reader):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) != len(header):
                raise CsvParseError(i, f"expected {len(header)} fields, found {len(rec)}")
            W.append([_parse_float(rec[idx[col]], i, col) for col in schema.w])
            a = _parse_binary(rec[idx[schema.a]], i, schema.a)
            r = _parse_binary(rec[idx[schema.r]], i, schema.r)
            c = _parse_binary(rec[idx[schema.c]], i, schema.c)
            y = _parse_binary(rec[idx[schema.y]], i, schema.y)
            s_text = rec[idx[schema.s]].strip()
            if s_text == "":
                if r == 1:
                    raise ValidationError("mediator missing with R=1", row=i)
                s = np.nan
            else:
                if r == 0:
                    raise ValidationError("mediator present with R=0", row=i)
                s = _parse_float(s_text, i, schema.s)
            if c == 0 and y == 1:
                raise ValidationError("outcome recorded under censoring", row=i)
            if schema.gr:
                GR.append(_parse_float(rec[idx[schema.gr]], i, schema.gr))
            A.append(a)
            R.append(r)
            S.append(s)
            C.append(c)
            CY.append(c * y)
    if not A:
        raise CsvParseError(0, "no data rows")
    return Dataset(
        w=np.array(W, dtype=float).reshape(len(A), len(schema.w)),
        a=np.array(A), r=np.array(R), s=np.array(S, dtype=float), c=np.array(C), cy=np.array(CY),
        covariate_names=schema.w,
        meta={"source": str(path)},
        design_gr=np.array(GR, dtype=float) if schema.gr else None,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(d: Dataset, path, schema: Schema | None = None, include_gr: bool = False) -> None:
    """Write ``d`` in schema column order ``W..., A, R, S, C, Y``."""
    if schema is None:
        schema = Schema(w=d.covariate_names, gr="GR" if include_gr and d.design_gr is not None else None)
    if len(schema.w) != d.p:
        raise ValidationError("schema covariate count does not match dataset")
    header = schema.columns + ([schema.gr] if schema.gr else [])
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for i in range(d.n):
            row = [_fmt(v) for v in d.w[i]]
            row += [str(int(d.a[i])), str(int(d.r[i])), "" if d.r[i] == 0 else _fmt(d.s[i]),
                    str(int(d.c[i])), str(int(d.cy[i])) if d.binary_outcome else _fmt(d.cy[i])]
            if schema.gr:
                row.append(_fmt(d.design_gr[i]))
            out.writerow(row)
