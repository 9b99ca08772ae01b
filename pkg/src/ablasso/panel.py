"""Balanced panel container, first-difference/demean transform and per-period
instrument matrices.

Periods are 1-based throughout (``t = 1..T``) to match the usual panel
notation; arrays are 0-based, so period ``t`` lives at column ``t - 1`` of
``outcome`` and of ``regressors``, and at column ``t - 2`` of the differenced
series.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import BadValue, DuplicateCell, PanelError, ShapeError, UnbalancedPanel

__all__ = [
    "InstrumentMode",
    "PanelData",
    "TransformedPanel",
    "InstrumentMatrix",
    "load_panel",
    "read_panel_csv",
    "add_outcome_lags",
    "difference_and_demean",
    "build_instrument_matrix",
    "instrument_counts",
]


class InstrumentMode(str, Enum):
    """How a regressor enters the first stage.

    ``PROJECT`` columns are predetermined: they are projected on lagged levels
    by the first stage. ``SELF`` columns are exogenous in differences and act
    as their own instrument.
    """

    PROJECT = "project"
    SELF = "self"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelData:
    """Balanced panel ``Y_it`` and ``X_it`` in wide arrays.

    Parameters
    ----------
    outcome : (N, T) array
    regressors : (N, T, d) array
        ``regressors[i, t-1, j]`` is regressor ``j`` of unit ``i`` at period ``t``.
    regressor_names : sequence of str
    instrument_modes : sequence of InstrumentMode, optional
        Defaults to ``PROJECT`` for every column.
    outcome_lags : sequence of int or None, optional
        ``k`` when column ``j`` holds the outcome lagged ``k`` periods, else None.
    first_observed_period : sequence of int or None, optional
        For outcome-lag columns, the earliest outcome period whose level may be
        used as an instrument. Period 1 means ``Y_i0`` is treated as unobserved;
        values below 1 refer to pre-sample levels that the lag column itself
        carries. Defaults to 1.
    strictly_exogenous : sequence of bool, optional
        Columns whose levels at every period (past and future) are valid
        instruments.
    """

    outcome: np.ndarray
    regressors: np.ndarray
    regressor_names: tuple
    instrument_modes: tuple = None
    outcome_lags: tuple = None
    first_observed_period: tuple = None
    strictly_exogenous: tuple = None
    unit_labels: tuple = None
    time_labels: tuple = None

    def __post_init__(self):
        y = np.asarray(self.outcome, dtype=float)
        x = np.asarray(self.regressors, dtype=float)
        if x.ndim == 2:
            x = x[:, :, None]
        if y.ndim != 2 or x.ndim != 3 or x.shape[:2] != y.shape:
            raise ShapeError(f"outcome {y.shape} and regressors {x.shape} do not align")
        n, t = y.shape
        d = x.shape[2]
        if n < 2 or t < 3:
            raise PanelError(f"need N >= 2 and T >= 3, got N={n}, T={t}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise BadValue("panel contains non-finite values")
        names = tuple(str(s) for s in self.regressor_names)
        if len(names) != d:
            raise ShapeError(f"{len(names)} names for {d} regressors")
        if len(set(names)) != d:
            raise PanelError(f"regressor names are not unique: {names}")

        modes = self.instrument_modes
        modes = (InstrumentMode.PROJECT,) * d if modes is None else tuple(InstrumentMode(m) for m in modes)
        lags = (None,) * d if self.outcome_lags is None else tuple(self.outcome_lags)
        first = self.first_observed_period
        first = tuple(1 if k is not None else None for k in lags) if first is None else tuple(first)
        exo = (False,) * d if self.strictly_exogenous is None else tuple(bool(v) for v in self.strictly_exogenous)
        for name, seq in (("instrument_modes", modes), ("outcome_lags", lags),
                          ("first_observed_period", first), ("strictly_exogenous", exo)):
            if len(seq) != d:
                raise ShapeError(f"{name} has {len(seq)} entries for {d} regressors")
        max_lag = max((int(k) for k in lags if k is not None), default=0)
        for j, (k, f) in enumerate(zip(lags, first)):
            if k is None:
                continue
            if int(k) < 1:
                raise PanelError(f"outcome lag of {names[j]} must be >= 1")
            f = 1 if f is None else int(f)
            # lag columns carry Y_{s-k} for s >= 1, nothing earlier
            if f < 1 - max_lag:
                raise PanelError(f"{names[j]}: first observed period {f} predates the data")
        first = tuple(None if k is None else (1 if f is None else int(f)) for k, f in zip(lags, first))
        lags = tuple(None if k is None else int(k) for k in lags)

        units = tuple(range(1, n + 1)) if self.unit_labels is None else tuple(self.unit_labels)
        times = tuple(range(1, t + 1)) if self.time_labels is None else tuple(self.time_labels)
        set_ = object.__setattr__
        set_(self, "outcome", _readonly(y))
        set_(self, "regressors", _readonly(x))
        set_(self, "regressor_names", names)
        set_(self, "instrument_modes", modes)
        set_(self, "outcome_lags", lags)
        set_(self, "first_observed_period", first)
        set_(self, "strictly_exogenous", exo)
        set_(self, "unit_labels", units)
        set_(self, "time_labels", times)

    @property
    def n_units(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcome.shape[1]

    @property
    def n_regressors(self) -> int:
        return self.regressors.shape[2]

    @property
    def projected(self) -> tuple:
        """Indices of regressors with mode PROJECT."""
        return tuple(j for j, m in enumerate(self.instrument_modes) if m is InstrumentMode.PROJECT)

    def index_of(self, name: str) -> int:
        try:
            return self.regressor_names.index(name)
        except ValueError:
            raise KeyError(f"no regressor named {name!r}") from None

    def replace(self, **changes) -> "PanelData":
        fields = dict(
            outcome=self.outcome, regressors=self.regressors, regressor_names=self.regressor_names,
            instrument_modes=self.instrument_modes, outcome_lags=self.outcome_lags,
            first_observed_period=self.first_observed_period,
            strictly_exogenous=self.strictly_exogenous,
            unit_labels=self.unit_labels, time_labels=self.time_labels,
        )
        fields.update(changes)
        return PanelData(**fields)

    def subset(self, units: Sequence[int]) -> "PanelData":
        """Panel restricted to the given unit rows (0-based), in that order."""
        units = _check_units(self, units)
        return self.replace(outcome=self.outcome[units], regressors=self.regressors[units],
                            unit_labels=tuple(self.unit_labels[i] for i in units))

    def same_as(self, other: "PanelData") -> bool:
        """Field-by-field equality (arrays compared exactly)."""
        return (
            np.array_equal(self.outcome, other.outcome)
            and np.array_equal(self.regressors, other.regressors)
            and self.regressor_names == other.regressor_names
            and self.instrument_modes == other.instrument_modes
            and self.outcome_lags == other.outcome_lags
            and self.first_observed_period == other.first_observed_period
            and self.strictly_exogenous == other.strictly_exogenous
            and self.unit_labels == other.unit_labels
            and self.time_labels == other.time_labels
        )


@dataclass(frozen=True, eq=False)
class TransformedPanel:
    """First-differenced (and optionally cross-sectionally demeaned) series.

    Column ``c`` of ``diff_outcome`` corresponds to period ``t = c + 2``.
    """

    unit_index: np.ndarray
    diff_outcome: np.ndarray
    diff_regressors: np.ndarray
    demeaned: bool

    @property
    def n_units(self) -> int:
        return self.diff_outcome.shape[0]


@dataclass(frozen=True, eq=False)
class InstrumentMatrix:
    """Instrument matrix ``V_t`` for one period over a unit subset.

    ``columns[0]`` is ``("const", None)``; every other entry is
    ``(source, period)`` where ``source`` is a regressor name or ``"outcome"``.
    """

    period: int
    columns: tuple
    values: np.ndarray

    @property
    def m(self) -> int:
        return self.values.shape[1]


def _check_units(panel: PanelData, units) -> np.ndarray:
    if units is None:
        return np.arange(panel.n_units)
    idx = np.asarray(units, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= panel.n_units):
        raise IndexError(f"unit index out of range for N={panel.n_units}")
    return idx


def load_panel(
    rows: Iterable[Sequence],
    regressor_names: Sequence[str],
    instrument_modes=None,
    outcome_lags=None,
    first_observed_period=None,
    strictly_exogenous=None,
) -> PanelData:
    """Build a :class:`PanelData` from long-format rows.

    Each row is ``(unit, time, y, x_1, ..., x_d)`` or ``(unit, time, y, xs)``.
    Units are ordered by sorted label and periods by time id, so the result
    does not depend on the row order.
    """
    d = len(regressor_names)
    cells = {}
    for row in rows:
        row = tuple(row)
        if len(row) == 4 and d != 1 and isinstance(row[3], (list, tuple, np.ndarray)):
            row = row[:3] + tuple(row[3])
        if len(row) != 3 + d:
            raise ShapeError(f"row has {len(row)} fields, expected {3 + d}")
        unit, time = row[0], row[1]
        try:
            time_int = int(time)
        except (TypeError, ValueError):
            raise PanelError(f"time id {time!r} is not an integer") from None
        if time_int != time and not (isinstance(time, str) and str(time_int) == time.strip()):
            raise PanelError(f"time id {time!r} is not an integer")
        try:
            vals = tuple(float(v) for v in row[2:])
        except (TypeError, ValueError) as exc:
            raise BadValue(f"unit {unit!r}, time {time!r}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise BadValue(f"non-finite value at unit {unit!r}, time {time!r}")
        key = (unit, time_int)
        if key in cells:
            raise DuplicateCell(f"duplicate cell (unit={unit!r}, time={time_int})")
        cells[key] = vals
    if not cells:
        raise PanelError("no rows")

    by_unit: dict = {}
    for unit, time in cells:
        by_unit.setdefault(unit, []).append(time)
    units = sorted(by_unit)
    times = None
    for unit in units:
        ts = sorted(by_unit[unit])
        if ts[-1] - ts[0] + 1 != len(ts):
            raise UnbalancedPanel(f"unit {unit!r} has gaps in its time ids")
        if times is None:
            times = ts
        elif ts != times:
            raise UnbalancedPanel(f"unit {unit!r} covers periods {ts[0]}..{ts[-1]}, "
                                  f"expected {times[0]}..{times[-1]}")
    n, t = len(units), len(times)
    data = np.empty((n, t, 1 + d))
    t0 = times[0]
    for i, unit in enumerate(units):
        for time in times:
            data[i, time - t0] = cells[(unit, time)]
    return PanelData(
        outcome=data[:, :, 0],
        regressors=data[:, :, 1:],
        regressor_names=tuple(regressor_names),
        instrument_modes=instrument_modes,
        outcome_lags=outcome_lags,
        first_observed_period=first_observed_period,
        strictly_exogenous=strictly_exogenous,
        unit_labels=tuple(units),
        time_labels=tuple(times),
    )


def read_panel_csv(path, regressors: Sequence[str] | None = None, outcome: str = "y") -> PanelData:
    """Read a long-format CSV with header ``unit,time,<outcome>,<regressors...>``.

    ``regressors`` selects (and orders) columns; by default every column after
    the outcome is used. A missing column raises ``KeyError`` naming it.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        for col in ("unit", "time", outcome):
            if col not in header:
                raise KeyError(col)
        if regressors is None:
            regressors = [h for h in header if h not in ("unit", "time", outcome)]
        for col in regressors:
            if col not in header:
                raise KeyError(col)
        pos = [header.index(c) for c in ("unit", "time", outcome, *regressors)]
        raw = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise PanelError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            raw.append([rec[p].strip() for p in pos])
    unit_ids = [r[0] for r in raw]
    try:
        unit_ids = [int(u) for u in unit_ids]
    except ValueError:
        pass
    rows = ((u, r[1], *r[2:]) for u, r in zip(unit_ids, raw))
    return load_panel(rows, list(regressors))


def add_outcome_lags(panel: PanelData, n_lags: int, prefix: str = "y_lag",
                     mode: InstrumentMode = InstrumentMode.PROJECT) -> PanelData:
    """Prepend ``n_lags`` lagged-outcome columns built from ``panel.outcome``.

    The first ``n_lags`` periods are consumed as initial conditions, so the
    returned panel has ``T - n_lags`` periods. Every outcome level of the
    original panel stays admissible as an instrument: the lag columns record
    ``first_observed_period = 1 - n_lags`` in the new time frame.
    """
    p = int(n_lags)
    if p < 0:
        raise PanelError("n_lags must be non-negative")
    if p == 0:
        return panel
    y = panel.outcome
    t_raw = panel.n_periods
    if t_raw - p < 3:
        raise PanelError(f"{p} lags leave fewer than 3 periods")
    lag_cols = np.stack([y[:, p - k:t_raw - k] for k in range(1, p + 1)], axis=2)
    x = np.concatenate([lag_cols, panel.regressors[:, p:]], axis=2)
    names = tuple(f"{prefix}{k}" for k in range(1, p + 1)) + panel.regressor_names
    clash = set(names[:p]) & set(panel.regressor_names)
    if clash:
        raise PanelError(f"lag column names clash with regressors: {sorted(clash)}")
    return PanelData(
        outcome=y[:, p:],
        regressors=x,
        regressor_names=names,
        instrument_modes=(InstrumentMode(mode),) * p + panel.instrument_modes,
        outcome_lags=tuple(range(1, p + 1)) + panel.outcome_lags,
        first_observed_period=(1 - p,) * p + panel.first_observed_period,
        strictly_exogenous=(False,) * p + panel.strictly_exogenous,
        unit_labels=panel.unit_labels,
        time_labels=panel.time_labels[p:],
    )


def difference_and_demean(panel: PanelData, unit_subset=None, demean: bool = True) -> TransformedPanel:
    """First differences over time, optionally demeaned across ``unit_subset``.

    Demeaning is done within the subset, so each fold of a sample split gets
    its own period means.
    """
    units = _check_units(panel, unit_subset)
    if units.size < 2:
        raise PanelError("need at least two units to difference and demean")
    dy = np.diff(panel.outcome[units], axis=1)
    dx = np.diff(panel.regressors[units], axis=1)
    if demean:
        dy = dy - dy.mean(axis=0, keepdims=True)
        dx = dx - dx.mean(axis=0, keepdims=True)
    return TransformedPanel(unit_index=_readonly(units).astype(np.int64), diff_outcome=_readonly(dy),
                            diff_regressors=_readonly(dx), demeaned=bool(demean))


def _instrument_sources(panel: PanelData, t: int):
    """Column labels and (kind, row-index, col-index) readers for ``V_t``."""
    T = panel.n_periods
    labels = [("const", None)]
    readers = []
    outcome_done = False
    for j, name in enumerate(panel.regressor_names):
        mode = panel.instrument_modes[j]
        k = panel.outcome_lags[j]
        if k is not None:
            if mode is not InstrumentMode.PROJECT or outcome_done:
                continue
            outcome_done = True
            # union over all projected outcome-lag columns of admissible levels
            spans = {}
            for jj, kk in enumerate(panel.outcome_lags):
                if kk is None or panel.instrument_modes[jj] is not InstrumentMode.PROJECT:
                    continue
                first = panel.first_observed_period[jj]
                for r in range(t - 1 - kk, first - 1, -1):
                    spans.setdefault(r, (jj, kk))
            for r, (jj, kk) in list(spans.items()):
                if r < 1 and r + kk < 1:
                    # read the pre-sample level from a lag column that holds it
                    jj2 = max((i for i, k2 in enumerate(panel.outcome_lags) if k2 is not None),
                              key=lambda i: panel.outcome_lags[i])
                    spans[r] = (jj2, panel.outcome_lags[jj2])
            for r in sorted(spans, reverse=True):
                jj, kk = spans[r]
                labels.append(("outcome", r))
                readers.append(("y", r - 1) if r >= 1 else ("x", r + kk - 1, jj))
            continue
        if mode is InstrumentMode.PROJECT:
            periods = list(range(t - 1, 0, -1))
            if panel.strictly_exogenous[j]:
                periods += list(range(t, T + 1))
        elif panel.strictly_exogenous[j]:
            periods = list(range(1, T + 1))
        else:
            continue
        for s in periods:
            labels.append((name, s))
            readers.append(("x", s - 1, j))
    return tuple(labels), readers


def build_instrument_matrix(panel: PanelData, t: int, unit_subset=None) -> InstrumentMatrix:
    """Instrument matrix ``V_t = (1, admissible lagged levels)`` for period ``t``.

    Columns are ordered regressor-major and, within a regressor, from the most
    recent admissible level backwards. Levels are never demeaned.
    """
    T = panel.n_periods
    if not 2 <= int(t) <= T:
        raise IndexError(f"period {t} outside 2..{T}")
    full = _full_instruments(panel)[int(t) - 2]
    if unit_subset is None:
        return full
    units = _check_units(panel, unit_subset)
    values = full.values[units]
    values.setflags(write=False)
    return InstrumentMatrix(period=full.period, columns=full.columns, values=values)


def _full_instruments(panel: PanelData) -> tuple:
    # panels are immutable, so the all-unit matrices are built once and kept on the instance
    cached = panel.__dict__.get("_instrument_cache")
    if cached is not None:
        return cached
    out = []
    for t in range(2, panel.n_periods + 1):
        labels, readers = _instrument_sources(panel, t)
        values = np.empty((panel.n_units, len(labels)))
        values[:, 0] = 1.0
        for c, rd in enumerate(readers, start=1):
            values[:, c] = panel.outcome[:, rd[1]] if rd[0] == "y" else panel.regressors[:, rd[1], rd[2]]
        values.setflags(write=False)
        out.append(InstrumentMatrix(period=t, columns=labels, values=values))
    out = tuple(out)
    object.__setattr__(panel, "_instrument_cache", out)
    return out


def instrument_counts(panel: PanelData) -> dict:
    """``{t: m_t}`` for t = 2..T, without materialising the matrices."""
    return {t: len(_instrument_sources(panel, t)[0]) for t in range(2, panel.n_periods + 1)}
