"""Observed-data model for hybrid-control studies.

A dataset holds one row per subject ``(z, a, y, x)`` where ``z`` marks the
source (1 = randomized trial, 0 = external control), ``a`` the treatment and
``x`` a length-``p`` covariate vector. Data are stored column-wise as numpy
arrays and are immutable after construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Literal

import numpy as np

from .errors import DataValidationError, DomainError

OutcomeKind = Literal["continuous", "binary"]
OUTCOME_KINDS = ("continuous", "binary")


@dataclass(frozen=True)
class StudyRow:
    z: int
    a: int
    y: float
    x: tuple[float, ...]


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StudyDataset:
    """Validated hybrid-control dataset.

    Args:
        z: source indicators, shape (n,).
        a: treatment indicators, shape (n,).
        y: outcomes, shape (n,).
        x: covariates, shape (n, p).
        outcome_kind: ``"continuous"`` or ``"binary"``.

    Raises:
        DataValidationError: if any row violates the data model.
    """

    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    x: np.ndarray
    outcome_kind: OutcomeKind = "continuous"
    n_trt: int = field(init=False)
    n_ic: int = field(init=False)
    n_ec: int = field(init=False)

    def __post_init__(self):
        if self.outcome_kind not in OUTCOME_KINDS:
            raise DataValidationError(f"unknown outcome kind {self.outcome_kind!r}")
        z = np.asarray(self.z)
        a = np.asarray(self.a)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(len(y), 0)
        n = len(y)
        if n == 0:
            raise DataValidationError("dataset is empty")
        if z.shape != (n,) or a.shape != (n,) or x.ndim != 2 or x.shape[0] != n:
            raise DataValidationError("z, a, y and x must have the same number of rows")
        for name, col in (("z", z), ("a", a)):
            if not np.all(np.isin(col, (0, 1))):
                raise DataValidationError(f"{name} must be 0 or 1")
        z = z.astype(np.int8)
        a = a.astype(np.int8)
        if np.any((z == 0) & (a == 1)):
            raise DataValidationError("external subject with a=1")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise DataValidationError("missing or non-finite values are not allowed")
        if self.outcome_kind == "binary" and not np.all(np.isin(y, (0.0, 1.0))):
            raise DataValidationError("binary outcome must be 0 or 1")
        n_trt = int(np.sum((z == 1) & (a == 1)))
        n_ic = int(np.sum((z == 1) & (a == 0)))
        n_ec = int(np.sum(z == 0))
        if n_trt + n_ic == 0:
            raise DataValidationError("dataset has no randomized (z=1) subjects")
        for name, arr in (("z", z), ("a", a), ("y", y), ("x", x)):
            object.__setattr__(self, name, _readonly(arr))
        object.__setattr__(self, "n_trt", n_trt)
        object.__setattr__(self, "n_ic", n_ic)
        object.__setattr__(self, "n_ec", n_ec)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n1(self) -> int:
        return self.n_trt + self.n_ic

    @property
    def n0(self) -> int:
        return self.n_ec

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def rows(self) -> Iterator[StudyRow]:
        for i in range(self.n):
            yield StudyRow(
                int(self.z[i]), int(self.a[i]), float(self.y[i]), tuple(self.x[i].tolist())
            )

    @classmethod
    def from_rows(
        cls, rows: Iterable[StudyRow], outcome_kind: OutcomeKind = "continuous"
    ) -> "StudyDataset":
        rows = list(rows)
        if not rows:
            raise DataValidationError("dataset is empty")
        widths = {len(r.x) for r in rows}
        if len(widths) != 1:
            raise DataValidationError("rows have covariate vectors of different lengths")
        return cls(
            z=np.array([r.z for r in rows]),
            a=np.array([r.a for r in rows]),
            y=np.array([r.y for r in rows], dtype=float),
            x=np.array([r.x for r in rows], dtype=float).reshape(len(rows), widths.pop()),
            outcome_kind=outcome_kind,
        )

    def subset(self, idx: np.ndarray) -> "StudyDataset":
        """Rows selected by an integer index array (repeats allowed)."""
        return StudyDataset(self.z[idx], self.a[idx], self.y[idx], self.x[idx], self.outcome_kind)

    def equals(self, other: "StudyDataset") -> bool:
        """Bit-exact equality on every field."""
        return (
            self.outcome_kind == other.outcome_kind
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.a, other.a)
            and self.y.tobytes() == other.y.tobytes()
            and self.x.shape == other.x.shape
            and self.x.tobytes() == other.x.tobytes()
        )


def strata_counts(d: StudyDataset) -> tuple[int, int, int]:
    """Return ``(n_trt, n_ic, n_ec)``: internal treated, internal control, external."""
    return d.n_trt, d.n_ic, d.n_ec


def _parse_cell(raw: str, column: str, line: int) -> float:
    text = raw.strip()
    if text == "":
        raise DataValidationError(f"line {line}: missing value in column {column!r}")
    try:
        value = float(text)
    except ValueError:
        raise DataValidationError(
            f"line {line}: non-numeric value {raw!r} in column {column!r}"
        ) from None
    if not math.isfinite(value):
        raise DataValidationError(f"line {line}: non-finite value in column {column!r}")
    return value


def _expected_header(p: int) -> list[str]:
    return ["z", "a", "y"] + [f"x{j}" for j in range(1, p + 1)]


def load_csv(path: str | Path, outcome_kind: OutcomeKind = "continuous") -> StudyDataset:
    """Read a ``z,a,y,x1,...,xp`` CSV file into a validated dataset.

    Raises:
        DataValidationError: on schema problems, non-numeric cells, invalid
            indicators, external treated rows, non-binary outcomes for a binary
            outcome kind, or an empty internal control arm.
    """
    if outcome_kind not in OUTCOME_KINDS:
        raise DataValidationError(f"unknown outcome kind {outcome_kind!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError("file is empty (no header row)") from None
        p = len(header) - 3
        if p < 0 or header != _expected_header(p):
            raise DataValidationError(
                f"header must be z,a,y,x1..xp in that order; got {','.join(header)}"
            )
        values: list[list[float]] = []
        for line, record in enumerate(reader, start=2):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise DataValidationError(
                    f"line {line}: expected {len(header)} columns, found {len(record)}"
                )
            values.append([_parse_cell(c, header[j], line) for j, c in enumerate(record)])
    if not values:
        raise DataValidationError("file contains no data rows")
    arr = np.array(values, dtype=float)
    for j, name in enumerate(("z", "a")):
        bad = ~np.isin(arr[:, j], (0.0, 1.0))
        if bad.any():
            line = int(np.argmax(bad)) + 2
            raise DataValidationError(f"line {line}: {name} must be 0 or 1")
    bad = (arr[:, 0] == 0) & (arr[:, 1] == 1)
    if bad.any():
        raise DataValidationError(f"line {int(np.argmax(bad)) + 2}: external subject with a=1")
    if outcome_kind == "binary":
        bad = ~np.isin(arr[:, 2], (0.0, 1.0))
        if bad.any():
            raise DataValidationError(
                f"line {int(np.argmax(bad)) + 2}: binary outcome must be 0 or 1"
            )
    d = StudyDataset(
        z=arr[:, 0].astype(np.int8),
        a=arr[:, 1].astype(np.int8),
        y=arr[:, 2].copy(),
        x=arr[:, 3:].copy(),
        outcome_kind=outcome_kind,
    )
    if d.n_ic == 0:
        raise DataValidationError("empty internal control stratum (no rows with z=1, a=0)")
    return d


def save_csv(d: StudyDataset, path: str | Path) -> None:
    """Write a dataset so that :func:`load_csv` restores it bit-exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_expected_header(d.p))
        for i in range(d.n):
            writer.writerow(
                [int(d.z[i]), int(d.a[i]), repr(float(d.y[i]))]
                + [repr(float(v)) for v in d.x[i]]
            )


# ------------------------------------------------------------------ #
# Effect measures
# ------------------------------------------------------------------ #

EffectKind = Literal["difference", "log_ratio", "log_odds_ratio"]
EFFECT_KINDS = ("difference", "log_ratio", "log_odds_ratio")


@dataclass(frozen=True)
class EffectMeasure:
    """Transform ``g`` defining ``delta = g(mu1) - g(mu0)``.

    ``difference`` uses the identity, ``log_ratio`` the log and
    ``log_odds_ratio`` the logit.
    """

    kind: EffectKind = "difference"

    def __post_init__(self):
        if self.kind not in EFFECT_KINDS:
            raise ValueError(f"unknown effect measure {self.kind!r}")

    def check_domain(self, mu: float) -> None:
        if not math.isfinite(mu):
            raise DomainError(f"mean estimate {mu} is not finite")
        if self.kind == "log_ratio" and mu <= 0:
            raise DomainError(f"log ratio requires positive means, got {mu}")
        if self.kind == "log_odds_ratio" and not 0 < mu < 1:
            raise DomainError(f"log odds ratio requires means in (0, 1), got {mu}")

    def g(self, mu: float) -> float:
        self.check_domain(mu)
        if self.kind == "difference":
            return mu
        if self.kind == "log_ratio":
            return math.log(mu)
        return math.log(mu / (1.0 - mu))

    def gdot(self, mu: float) -> float:
        self.check_domain(mu)
        if self.kind == "difference":
            return 1.0
        if self.kind == "log_ratio":
            return 1.0 / mu
        return 1.0 / (mu * (1.0 - mu))

    def delta(self, mu0: float, mu1: float) -> float:
        return self.g(mu1) - self.g(mu0)


def as_effect(effect: EffectMeasure | str) -> EffectMeasure:
    return effect if isinstance(effect, EffectMeasure) else EffectMeasure(effect)

