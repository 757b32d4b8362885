"""Longitudinal panel data model.

Subjects are observed on a shared discrete time grid t_0 < ... < t_K.
Covariates are piecewise-constant on the intervals [t_k, t_{k+1}) and the
outcome is stored as per-interval event counts (events in (t_k, t_{k+1}]).
Treatment is absorbing: once started it stays on, so a subject's treatment
history is fully described by the grid index at which it starts.

The regressor vector used by every estimator is

    W_i(t_k) = (1, Z_i, X-block_i(t_k), D_i(t_k))

where the X block is filled from a selectable source: the observed
covariates, the subject's simulated no-treatment trajectory, or model
forecasts of that trajectory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataError

OBSERVED = "observed"
TRUE_COUNTERFACTUAL = "true_counterfactual"
FORECAST_COUNTERFACTUAL = "forecast_counterfactual"


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid of observation times."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 2:
            raise DataError("time grid needs at least two points")
        if not np.all(np.diff(pts) > 0):
            raise DataError("time grid must be strictly increasing")

    @property
    def n_intervals(self) -> int:
        return self.points.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.points)

    @classmethod
    def integers(cls, n_intervals: int) -> "TimeGrid":
        return cls(np.arange(n_intervals + 1, dtype=float))

    def __eq__(self, other) -> bool:
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's trajectory on the shared grid.

    covariates has shape (K+1, d_x); event_counts has length K with counts
    for the intervals (t_k, t_{k+1}]; follow_up_end is the grid index of the
    last observation, and the subject contributes to interval k only while
    k < follow_up_end. treatment_start is the grid index s with D(t_k) = 1
    exactly for k >= s, or None if never treated.
    """

    id: int
    baseline: np.ndarray
    covariates: np.ndarray
    treatment_start: Optional[int]
    event_counts: np.ndarray
    follow_up_end: int
    true_counterfactuals: Optional[np.ndarray] = None

    def treated_at(self, k: int) -> bool:
        return self.treatment_start is not None and k >= self.treatment_start


@dataclass(frozen=True)
class CovariateSource:
    """Selects which process fills the X block of the regressor.

    Before a subject's treatment start the X block always holds the observed
    covariates; the source only governs treated person-time. The forecast
    variant carries the fitted forecast paths keyed by subject id.
    """

    kind: str
    forecasts: Optional[Mapping[int, "ForecastValues"]] = None

    @classmethod
    def observed(cls) -> "CovariateSource":
        return cls(OBSERVED)

    @classmethod
    def true_counterfactual(cls) -> "CovariateSource":
        return cls(TRUE_COUNTERFACTUAL)

    @classmethod
    def forecast(cls, paths: Mapping[int, "ForecastValues"]) -> "CovariateSource":
        return cls(FORECAST_COUNTERFACTUAL, dict(paths))


class ForecastValues:
    """Protocol-ish duck type: needs .start (grid index) and .values (L, d_x)."""

    start: int
    values: np.ndarray


@dataclass(frozen=True)
class RegressorVector:
    """(1, Z, X-block, D) in that order; x_block_offset = 1 + d_z."""

    values: np.ndarray
    x_block_offset: int


class PanelDataset:
    """Immutable cohort container backed by stacked arrays.

    Arrays are padded to the global grid: entries past a subject's
    follow_up_end are zero and never consumed by the estimators.
    """

    def __init__(self, grid, ids, baseline, covariates, treat_start,
                 event_counts, follow_up_end, true_counterfactuals=None):
        self.grid = grid
        self.ids = np.asarray(ids, dtype=np.int64)
        self.z = np.atleast_2d(np.asarray(baseline, dtype=float))
        if self.z.shape[0] != self.ids.size:
            self.z = self.z.reshape(self.ids.size, -1)
        self.x = np.asarray(covariates, dtype=float)
        self.treat_start = np.asarray(treat_start, dtype=np.int64)
        self.dn = np.asarray(event_counts, dtype=np.int64)
        self.tau = np.asarray(follow_up_end, dtype=np.int64)
        self.x0 = None if true_counterfactuals is None else np.asarray(true_counterfactuals, dtype=float)
        self._check_shapes()
        for arr in (self.ids, self.z, self.x, self.treat_start, self.dn, self.tau):
            arr.setflags(write=False)
        if self.x0 is not None:
            self.x0.setflags(write=False)

    def _check_shapes(self):
        n = self.ids.size
        k1 = self.grid.n_intervals + 1
        if self.x.ndim != 3 or self.x.shape[:2] != (n, k1):
            raise DataError(f"covariate array has shape {self.x.shape}, expected ({n}, {k1}, d_x)")
        if self.dn.shape != (n, self.grid.n_intervals):
            raise DataError("event-count array does not match grid")
        if self.x0 is not None and self.x0.shape != self.x.shape:
            raise DataError("counterfactual array does not match covariate array")
        if np.any(self.tau < 1) or np.any(self.tau > self.grid.n_intervals):
            raise DataError("follow_up_end indices outside the grid")
        if np.any((self.treat_start >= 0) & (self.treat_start > self.tau)):
            raise DataError("treatment start after end of follow-up")
        if np.unique(self.ids).size != n:
            raise DataError("duplicate subject ids")

    @property
    def n_subjects(self) -> int:
        return self.ids.size

    @property
    def d_x(self) -> int:
        return self.x.shape[2]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    @property
    def p(self) -> int:
        """Regressor dimension: intercept + Z + X block + treatment flag."""
        return 2 + self.d_z + self.d_x

    @property
    def x_block_offset(self) -> int:
        return 1 + self.d_z

    @property
    def has_counterfactuals(self) -> bool:
        return self.x0 is not None

    def at_risk(self, k: int) -> np.ndarray:
        return self.tau > k

    def treated_at(self, k: int) -> np.ndarray:
        return (self.treat_start >= 0) & (self.treat_start <= k)

    def subject(self, i: int) -> SubjectRecord:
        s = int(self.treat_start[i])
        return SubjectRecord(
            id=int(self.ids[i]),
            baseline=self.z[i],
            covariates=self.x[i],
            treatment_start=None if s < 0 else s,
            event_counts=self.dn[i],
            follow_up_end=int(self.tau[i]),
            true_counterfactuals=None if self.x0 is None else self.x0[i],
        )

    def subjects(self):
        for i in range(self.n_subjects):
            yield self.subject(i)

    def with_event_counts(self, dn: np.ndarray) -> "PanelDataset":
        """Cheap copy with replaced event counts (shares covariate arrays)."""
        return PanelDataset(self.grid, self.ids, self.z, self.x, self.treat_start,
                            dn, self.tau, self.x0)


def source_matrix(panel: PanelDataset, source: CovariateSource) -> np.ndarray:
    """Effective X values (n, K+1, d_x) under the given source.

    Observed values everywhere except treated person-time of treated
    subjects, which is filled from the selected source.
    """
    if source.kind == OBSERVED:
        return panel.x
    out = np.array(panel.x)
    if source.kind == TRUE_COUNTERFACTUAL:
        if panel.x0 is None:
            raise DataError("panel has no true counterfactual covariates")
        for i in range(panel.n_subjects):
            s = panel.treat_start[i]
            if s >= 0:
                out[i, s:, :] = panel.x0[i, s:, :]
        return out
    if source.kind == FORECAST_COUNTERFACTUAL:
        paths = source.forecasts or {}
        for i in range(panel.n_subjects):
            s = panel.treat_start[i]
            if s < 0:
                continue
            path = paths.get(int(panel.ids[i]))
            if path is None:
                raise DataError(f"no forecast path for treated subject {panel.ids[i]}")
            stop = min(path.start + path.values.shape[0], panel.grid.n_intervals + 1)
            if stop <= panel.tau[i]:
                raise DataError(
                    f"forecast for subject {panel.ids[i]} does not cover follow-up")
            out[i, path.start:stop, :] = path.values[: stop - path.start]
        return out
    raise DataError(f"unknown covariate source {source.kind!r}")


def assemble_regressor(subject: SubjectRecord, k: int, source: CovariateSource) -> RegressorVector:
    """Build W(t_k) = (1, Z, X-block, D) for one subject.

    The X block is the observed value for k < treatment_start regardless of
    source; on treated person-time it comes from the selected source.
    """
    if k >= subject.follow_up_end:
        raise DataError(
            f"subject {subject.id}: interval {k} is past end of follow-up")
    s = subject.treatment_start
    treated = s is not None and k >= s
    if not treated or source.kind == OBSERVED:
        x_val = subject.covariates[k]
    elif source.kind == TRUE_COUNTERFACTUAL:
        if subject.true_counterfactuals is None:
            raise DataError(f"subject {subject.id}: no true counterfactual values")
        x_val = subject.true_counterfactuals[k]
    elif source.kind == FORECAST_COUNTERFACTUAL:
        path = (source.forecasts or {}).get(subject.id)
        if path is None or not (path.start <= k < path.start + path.values.shape[0]):
            raise DataError(
                f"subject {subject.id}: no forecast value at interval {k}")
        x_val = path.values[k - path.start]
    else:
        raise DataError(f"unknown covariate source {source.kind!r}")
    values = np.concatenate(([1.0], subject.baseline, np.atleast_1d(x_val),
                             [1.0 if treated else 0.0]))
    return RegressorVector(values=values, x_block_offset=1 + subject.baseline.size)


# ---------------------------------------------------------------------------
# Validation

@dataclass
class ValidationIssue:
    subject: int
    t_index: Optional[int]
    column: str
    message: str

    def __str__(self):
        where = "" if self.t_index is None else f" at t_index {self.t_index}"
        return f"subject {self.subject}{where} [{self.column}]: {self.message}"


@dataclass
class ValidationReport:
    issues: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, subject, t_index, column, message):
        self.issues.append(ValidationIssue(subject, t_index, column, message))

    def __str__(self):
        if self.ok:
            return "panel valid: no issues"
        return "\n".join(str(i) for i in self.issues)


def validate_panel(panel: PanelDataset) -> ValidationReport:
    """Report every record-level invariant violation; empty report means valid."""
    report = ValidationReport()
    k_end = panel.grid.n_intervals
    for i in range(panel.n_subjects):
        sid = int(panel.ids[i])
        tau = int(panel.tau[i])
        s = int(panel.treat_start[i])
        for j in range(panel.d_z):
            if not np.isfinite(panel.z[i, j]):
                report.add(sid, None, f"Z{j + 1}", "non-finite baseline value")
        for k in range(tau + 1):
            for j in range(panel.d_x):
                if not np.isfinite(panel.x[i, k, j]):
                    report.add(sid, k, f"X{j + 1}", "non-finite covariate value")
                if panel.x0 is not None and not np.isfinite(panel.x0[i, k, j]):
                    report.add(sid, k, f"X0_{j + 1}", "non-finite counterfactual value")
        if np.any(panel.dn[i, :tau] < 0):
            k = int(np.argmax(panel.dn[i, :tau] < 0))
            report.add(sid, k, "dN", "negative event count")
        if tau < k_end and np.any(panel.dn[i, tau:] != 0):
            k = tau + int(np.argmax(panel.dn[i, tau:] != 0))
            report.add(sid, k, "dN", "event count after end of follow-up")
        if panel.x0 is not None:
            pre = tau + 1 if s < 0 else min(s, tau + 1)
            diff = panel.x0[i, :pre, :] != panel.x[i, :pre, :]
            if np.any(diff):
                k = int(np.argmax(np.any(diff, axis=1)))
                report.add(sid, k, "X0", "counterfactual diverges before treatment")
    return report


# ---------------------------------------------------------------------------
# CSV round trip
#
# One row per (subject, grid index), header mandatory:
#   id,t_index,D,dN,Z1..ZdZ,X1..XdX[,X0_1..X0_dX]
# Rows cover t_index 0..follow_up_end per subject; dN on the last row is 0.

DEFAULT_SCHEMA = {"id": "id", "t_index": "t_index", "D": "D", "dN": "dN",
                  "Z": "Z", "X": "X", "X0": "X0_"}


def _prefixed(header: Sequence[str], prefix: str) -> list:
    cols = []
    j = 1
    while f"{prefix}{j}" in header:
        cols.append(f"{prefix}{j}")
        j += 1
    return cols


def load_panel(path, schema: Optional[Mapping[str, str]] = None) -> PanelDataset:
    """Load and validate a panel CSV.

    schema maps the canonical column names (and the Z/X/X0 prefixes) onto
    the file's actual header names; omitted entries use the defaults.
    """
    names = dict(DEFAULT_SCHEMA)
    names.update(schema or {})
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read panel {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for key in ("id", "t_index", "D", "dN"):
            if names[key] not in header:
                raise DataError(f"{path}: missing column {names[key]!r}")
        z_cols = _prefixed(header, names["Z"])
        x_cols = _prefixed(header, names["X"])
        x0_cols = _prefixed(header, names["X0"])
        if not x_cols:
            raise DataError(f"{path}: no covariate columns with prefix {names['X']!r}")
        if x0_cols and len(x0_cols) != len(x_cols):
            raise DataError(f"{path}: counterfactual columns do not match covariates")
        idx = {c: header.index(c) for c in header}
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((
                    int(row[idx[names["id"]]]),
                    int(row[idx[names["t_index"]]]),
                    int(row[idx[names["D"]]]),
                    int(row[idx[names["dN"]]]),
                    [float(row[idx[c]]) for c in z_cols],
                    [float(row[idx[c]]) for c in x_cols],
                    [float(row[idx[c]]) for c in x0_cols] if x0_cols else None,
                ))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{line}: unparseable row ({exc})") from None

    if not rows:
        raise DataError(f"{path}: no data rows")
    rows.sort(key=lambda r: (r[0], r[1]))
    by_subject: dict = {}
    for r in rows:
        by_subject.setdefault(r[0], []).append(r)

    k_max = max(r[1] for r in rows)
    if k_max < 1:
        raise DataError(f"{path}: grid needs at least one interval")
    grid = TimeGrid.integers(k_max)
    n = len(by_subject)
    d_z, d_x = len(z_cols), len(x_cols)
    ids = np.empty(n, dtype=np.int64)
    z = np.zeros((n, d_z))
    x = np.zeros((n, k_max + 1, d_x))
    x0 = np.zeros((n, k_max + 1, d_x)) if x0_cols else None
    dn = np.zeros((n, k_max), dtype=np.int64)
    tau = np.zeros(n, dtype=np.int64)
    treat = np.full(n, -1, dtype=np.int64)

    for i, (sid, recs) in enumerate(by_subject.items()):
        t_seen = [r[1] for r in recs]
        if t_seen != list(range(len(recs))):
            raise DataError(f"{path}: non-monotone or gapped time indices for subject {sid}")
        if len(recs) < 2:
            raise DataError(f"{path}: subject {sid} has fewer than two observations")
        ids[i] = sid
        tau[i] = len(recs) - 1
        z[i] = recs[0][4]
        prev_d = 0
        for r in recs:
            k, d_flag = r[1], r[2]
            if d_flag not in (0, 1):
                raise DataError(f"{path}: subject {sid}: treatment flag must be 0 or 1")
            if d_flag < prev_d:
                raise DataError(f"non-monotone treatment for subject {sid}")
            if d_flag == 1 and treat[i] < 0:
                treat[i] = k
            prev_d = d_flag
            if r[3] < 0:
                raise DataError(f"{path}: subject {sid}: negative event count")
            x[i, k] = r[5]
            if k < k_max:
                dn[i, k] = r[3]
            elif r[3] != 0:
                raise DataError(f"{path}: subject {sid}: event count on the final grid point")
            if x0 is not None:
                x0[i, k] = r[6]
        if tau[i] < k_max and recs[-1][3] != 0:
            raise DataError(f"{path}: subject {sid}: event count on the final observation")

    return PanelDataset(grid, ids, z, x, treat, dn, tau, x0)


def write_panel(panel: PanelDataset, path) -> None:
    """Write a panel CSV that load_panel reproduces bit-exactly.

    Floats are written with repr (shortest round-trip form).
    """
    header = ["id", "t_index", "D", "dN"]
    header += [f"Z{j + 1}" for j in range(panel.d_z)]
    header += [f"X{j + 1}" for j in range(panel.d_x)]
    if panel.has_counterfactuals:
        header += [f"X0_{j + 1}" for j in range(panel.d_x)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(panel.n_subjects):
            s = panel.treat_start[i]
            for k in range(int(panel.tau[i]) + 1):
                row = [int(panel.ids[i]), k,
                       1 if (s >= 0 and k >= s) else 0,
                       int(panel.dn[i, k]) if k < panel.grid.n_intervals and k < panel.tau[i] else 0]
                row += [repr(float(v)) for v in panel.z[i]]
                row += [repr(float(v)) for v in panel.x[i, k]]
                if panel.x0 is not None:
                    row += [repr(float(v)) for v in panel.x0[i, k]]
                writer.writerow(row)


def concat_panels(panels: Sequence[PanelDataset]) -> PanelDataset:
    """Stack cohorts on a shared grid, reindexing subject ids to stay unique."""
    if not panels:
        raise DataError("nothing to concatenate")
    grid = panels[0].grid
    for p in panels[1:]:
        if p.grid != grid or p.d_x != panels[0].d_x or p.d_z != panels[0].d_z:
            raise DataError("panels differ in grid or dimensions")
    has_x0 = all(p.has_counterfactuals for p in panels)
    offset = 0
    ids = []
    for p in panels:
        ids.append(p.ids + offset)
        offset += int(p.ids.max()) + 1
    return PanelDataset(
        grid,
        np.concatenate(ids),
        np.concatenate([p.z for p in panels]),
        np.concatenate([p.x for p in panels]),
        np.concatenate([p.treat_start for p in panels]),
        np.concatenate([p.dn for p in panels]),
        np.concatenate([p.tau for p in panels]),
        np.concatenate([p.x0 for p in panels]) if has_x0 else None,
    )
