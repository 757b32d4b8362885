"""First-order vector autoregression on untreated person-time.

Fits X(t_k) = b0 + B_Z Z + Pi X(t_{k-1}) + noise by stacked multivariate
least squares over every untreated transition, forecasts each treated
subject's no-treatment covariate path from its last pre-treatment value by
iterating the fitted recursion, and provides the horizon-dependent forecast
error covariances that feed the bias correction of the outcome regression.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import scipy.linalg

from .errors import DataError, NumericalError
from .panel import PanelDataset, SubjectRecord


@dataclass
class VarModel:
    """Fitted lag-1 autoregression with baseline-dependent intercepts."""

    pi: np.ndarray           # (d_x, d_x) coefficient matrix
    intercept: np.ndarray    # (d_x,) shared intercept
    z_loadings: np.ndarray   # (d_x, d_z) baseline-covariate loadings
    resid_cov: np.ndarray    # (d_x, d_x) residual cross-covariance
    n_obs: int
    dof: int

    @property
    def d_x(self) -> int:
        return self.pi.shape[0]

    @property
    def d_z(self) -> int:
        return self.z_loadings.shape[1]

    def subject_intercept(self, z: np.ndarray) -> np.ndarray:
        return self.intercept + self.z_loadings @ np.atleast_1d(z)


@dataclass
class ForecastPath:
    """No-treatment covariate forecasts for one treated subject.

    values[j] predicts the covariates at grid index start + j; the forecast
    horizon of that entry is j + 1 steps from the pre-treatment anchor.
    """

    subject_id: int
    start: int
    values: np.ndarray

    @property
    def horizons(self) -> np.ndarray:
        return np.arange(1, self.values.shape[0] + 1)


@dataclass
class ErrorCovariance:
    """Forecast-error covariance per horizon: matrices[l-1] is the l-step one."""

    matrices: List[np.ndarray]

    @property
    def l_max(self) -> int:
        return len(self.matrices)

    def horizon(self, l: int) -> np.ndarray:
        if not 1 <= l <= self.l_max:
            raise DataError(f"horizon {l} outside 1..{self.l_max}")
        return self.matrices[l - 1]


def _design_column_names(d_z: int, d_x: int) -> List[str]:
    return (["intercept"] + [f"Z{j + 1}" for j in range(d_z)]
            + [f"X{j + 1}_lag" for j in range(d_x)])


def last_untreated_index(panel: PanelDataset, i: int) -> int:
    """Grid index of subject i's last fully untreated observation."""
    s = int(panel.treat_start[i])
    tau = int(panel.tau[i])
    return tau if s < 0 else min(s - 1, tau)


def build_design_matrix(panel: PanelDataset):
    """Stack one regression row per untreated transition.

    Row for subject i and index k (1 <= k <= last untreated index) is
    (1, Z_i, X_i(t_{k-1})) with target X_i(t_k); subjects are stacked in
    panel order, time ascending within subject.

    Returns (design, targets, row_index) with row_index listing the
    (subject id, k) pair behind each row.
    """
    rows, targets, index = [], [], []
    for i in range(panel.n_subjects):
        upper = last_untreated_index(panel, i)
        for k in range(1, upper + 1):
            rows.append(np.concatenate(([1.0], panel.z[i], panel.x[i, k - 1])))
            targets.append(panel.x[i, k])
            index.append((int(panel.ids[i]), k))
    if not rows:
        raise DataError("no untreated transitions in the panel")
    return np.asarray(rows), np.asarray(targets), index


def fit_var(panel: PanelDataset) -> VarModel:
    """Multivariate least squares on the stacked untreated transitions.

    The residual covariance uses the pooled cross-products divided by
    n_obs - p (p = number of design columns). Rank deficiency is an error
    naming the redundant columns, never silently regularized.
    """
    design, targets, _ = build_design_matrix(panel)
    n_obs, p = design.shape
    if n_obs < p + 1:
        raise NumericalError(
            f"only {n_obs} untreated transitions for {p} coefficients")
    coeffs, _, rank, _ = np.linalg.lstsq(design, targets, rcond=None)
    if rank < p:
        _, _, pivots = scipy.linalg.qr(design, mode="economic", pivoting=True)
        names = _design_column_names(panel.d_z, panel.d_x)
        redundant = sorted(names[j] for j in pivots[rank:])
        raise NumericalError(
            f"design matrix is rank deficient (rank {rank} < {p}); "
            f"redundant columns: {', '.join(redundant)}")
    resid = targets - design @ coeffs
    dof = n_obs - p
    resid_cov = resid.T @ resid / dof
    d_z, d_x = panel.d_z, panel.d_x
    return VarModel(
        pi=coeffs[1 + d_z:, :].T.copy(),
        intercept=coeffs[0, :].copy(),
        z_loadings=coeffs[1:1 + d_z, :].T.reshape(d_x, d_z),
        resid_cov=resid_cov,
        n_obs=n_obs,
        dof=dof,
    )


def forecast_counterfactuals(model: VarModel, subject: SubjectRecord) -> ForecastPath:
    """Forecast one treated subject's no-treatment path up to follow-up end.

    Anchored on the last observed pre-treatment value: the first forecast is
    b0_i + Pi X(t_{s-1}), then the recursion is iterated without noise.
    """
    s = subject.treatment_start
    if s is None:
        raise DataError(f"subject {subject.id} is never treated")
    if s < 1:
        raise DataError(
            f"subject {subject.id} treated at the first grid point: no pre-treatment anchor")
    b0 = model.subject_intercept(subject.baseline)
    steps = subject.follow_up_end - s + 1
    values = np.empty((steps, model.d_x))
    current = subject.covariates[s - 1]
    for j in range(steps):
        current = b0 + model.pi @ current
        values[j] = current
    return ForecastPath(subject_id=subject.id, start=s, values=values)


def forecast_all(model: VarModel, panel: PanelDataset) -> Dict[int, ForecastPath]:
    """Forecast paths for every treated subject, grouped by start index."""
    paths: Dict[int, ForecastPath] = {}
    starts = panel.treat_start
    for s in np.unique(starts[starts >= 0]):
        s = int(s)
        if s < 1:
            bad = panel.ids[starts == 0]
            raise DataError(
                f"subject {int(bad[0])} treated at the first grid point: no pre-treatment anchor")
        idx = np.flatnonzero(starts == s)
        b0 = model.intercept + panel.z[idx] @ model.z_loadings.T
        current = panel.x[idx, s - 1, :]
        steps = int(panel.tau[idx].max()) - s + 1
        values = np.empty((idx.size, steps, model.d_x))
        for j in range(steps):
            current = b0 + current @ model.pi.T
            values[:, j, :] = current
        for row, i in enumerate(idx):
            keep = int(panel.tau[i]) - s + 1
            paths[int(panel.ids[i])] = ForecastPath(
                subject_id=int(panel.ids[i]), start=s, values=values[row, :keep])
    return paths


def error_covariance(model: VarModel, l_max: int) -> ErrorCovariance:
    """Horizon-l forecast-error covariances sum_{j<l} Pi^j S Pi^T^j."""
    return error_covariance_from(model.pi, model.resid_cov, l_max)


def error_covariance_from(pi: np.ndarray, sigma: np.ndarray,
                          l_max: int) -> ErrorCovariance:
    """Same accumulation from explicitly supplied (Pi, Sigma)."""
    if l_max < 1:
        raise DataError("l_max must be >= 1")
    pi = np.atleast_2d(np.asarray(pi, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    matrices = []
    term = np.array(sigma)
    total = np.array(sigma)
    matrices.append(total.copy())
    for _ in range(1, l_max):
        term = pi @ term @ pi.T
        total = total + term
        matrices.append(total.copy())
    return ErrorCovariance(matrices)


# ---------------------------------------------------------------------------
# Plain-text persistence
#
# Layout: a tag line, integer dims, then each matrix introduced by its name
# with one row per line, values separated by single spaces, repr-formatted.

_MODEL_TAG = "attkit-var-model 1"


def save_var_model(model: VarModel, path) -> None:
    lines = [_MODEL_TAG,
             f"d_x {model.d_x}",
             f"d_z {model.d_z}",
             f"n_obs {model.n_obs}",
             f"dof {model.dof}",
             "intercept",
             " ".join(repr(float(v)) for v in model.intercept)]
    for name, mat in (("pi", model.pi), ("z_loadings", model.z_loadings),
                      ("resid_cov", model.resid_cov)):
        lines.append(name)
        for row in np.atleast_2d(mat):
            lines.append(" ".join(repr(float(v)) for v in row) if row.size else "")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_var_model(path) -> VarModel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _MODEL_TAG:
        raise DataError(f"{path}: not a model file (missing tag)")
    head = dict(ln.split() for ln in lines[1:5])
    try:
        d_x, d_z = int(head["d_x"]), int(head["d_z"])
        n_obs, dof = int(head["n_obs"]), int(head["dof"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed header ({exc})") from None

    def block(start: int, cols: int) -> Tuple[np.ndarray, int]:
        out = np.zeros((d_x, cols))
        for r in range(d_x):
            vals = lines[start + r].split()
            if len(vals) != cols:
                raise DataError(f"{path}: bad row length at line {start + r + 1}")
            out[r] = [float(v) for v in vals]
        return out, start + d_x

    pos = 5
    if lines[pos] != "intercept":
        raise DataError(f"{path}: expected intercept block")
    intercept = np.array([float(v) for v in lines[pos + 1].split()])
    pos += 2
    mats = {}
    for name, cols in (("pi", d_x), ("z_loadings", d_z), ("resid_cov", d_x)):
        if lines[pos] != name:
            raise DataError(f"{path}: expected {name} block at line {pos + 1}")
        if cols == 0:
            mats[name] = np.zeros((d_x, 0))
            pos += 1 + d_x
            continue
        mats[name], pos = block(pos + 1, cols)
    return VarModel(pi=mats["pi"], intercept=intercept,
                    z_loadings=mats["z_loadings"], resid_cov=mats["resid_cov"],
                    n_obs=n_obs, dof=dof)
