"""Additive event-rate regression on the panel grid.

With piecewise-constant regressors and coefficient paths, minimizing the
least-squares event-rate risk decouples into one small linear solve per grid
interval: (sum_i W_i W_i^T * delta_k) A(t_k) = sum_i W_i dN_i(k) over the
subjects still under follow-up. The treatment coefficient path is the
treatment-effect-on-the-treated estimate.

The debiased estimator replaces the X block of the per-interval Gram matrix
with a version corrected for the covariate-forecast error: for every treated
subject the forecast-error covariance at the subject's current horizon is
accumulated into the X block. Forecasts are conditional means, so they carry
less variance than the trajectories they estimate; restoring the missing
second moment makes the corrected Gram match the one the unobservable true
trajectories would produce.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .panel import CovariateSource, PanelDataset, source_matrix
from .varmodel import ErrorCovariance, VarModel, error_covariance, forecast_all

FLAG_NO_RISK_SET = "no-risk-set"
FLAG_NO_TREATED = "no-treated"
FLAG_PSD_FLOOR = "psd-floor"
FLAG_RIDGE = "ridge"

# Relative eigenvalue floor used both to detect unusable Gram matrices and as
# the projection target of the psd-floor fallback.
_FLOOR_SCALE = 1e-8


@dataclass(frozen=True)
class FallbackPolicy:
    """What to do when an interval's Gram matrix is not positive definite.

    mode "psd-floor" projects onto the nearest matrix whose smallest
    eigenvalue is _FLOOR_SCALE * trace / p and flags the interval;
    "ridge" solves with a fixed diagonal inflation; "fail" raises.
    """

    mode: str = "psd-floor"
    ridge: float = 0.0

    def __post_init__(self):
        if self.mode not in ("psd-floor", "ridge", "fail"):
            raise ConfigError(f"unknown fallback mode {self.mode!r}")
        if self.mode == "ridge" and self.ridge <= 0:
            raise ConfigError("ridge fallback needs a positive ridge value")

    @classmethod
    def parse(cls, text: str) -> "FallbackPolicy":
        if text.startswith("ridge:"):
            try:
                return cls("ridge", float(text.split(":", 1)[1]))
            except ValueError:
                raise ConfigError(f"bad ridge value in {text!r}") from None
        return cls(text)


DEFAULT_POLICY = FallbackPolicy()


@dataclass
class CoefficientPaths:
    """Per-interval coefficient vectors and their bookkeeping.

    coef has shape (K, p) with NaN where a coefficient is undefined (for
    example the treatment column on intervals without treated person-time);
    flags holds one diagnostic string or None per interval.
    """

    grid: "object"
    label: str
    coef: np.ndarray
    flags: List[Optional[str]]
    risk_set_size: np.ndarray
    d_z: int
    d_x: int

    @property
    def p(self) -> int:
        return self.coef.shape[1]

    @property
    def x_block_offset(self) -> int:
        return 1 + self.d_z

    @property
    def coef_names(self) -> List[str]:
        return (["intercept"] + [f"Z{j + 1}" for j in range(self.d_z)]
                + [f"X{j + 1}" for j in range(self.d_x)] + ["D"])

    @property
    def att(self) -> np.ndarray:
        """Treatment coefficient path (NaN where undefined)."""
        return self.coef[:, -1]

    def cumulative(self) -> np.ndarray:
        """Integrated paths B(t_k), shape (K+1, p), starting at zero.

        Undefined per-interval values contribute no increment.
        """
        widths = self.grid.widths[:, None]
        increments = np.nan_to_num(self.coef) * widths
        out = np.zeros((self.coef.shape[0] + 1, self.coef.shape[1]))
        out[1:] = np.cumsum(increments, axis=0)
        return out

    def time_average(self, name: str) -> float:
        """Width-weighted average of one coefficient over defined intervals."""
        j = self.coef_names.index(name)
        vals = self.coef[:, j]
        w = self.grid.widths
        mask = np.isfinite(vals)
        if not mask.any():
            return float("nan")
        return float((vals[mask] * w[mask]).sum() / w[mask].sum())


def bias_pad_matrix(p: int, x_offset: int, block: np.ndarray) -> np.ndarray:
    """Embed a forecast-error covariance block into an otherwise zero p x p pad."""
    block = np.atleast_2d(block)
    d = block.shape[0]
    if x_offset + d > p - 1:
        raise DataError("X block does not fit inside the regressor dimension")
    out = np.zeros((p, p))
    out[x_offset:x_offset + d, x_offset:x_offset + d] = block
    return out


def solve_interval(gram: np.ndarray, moment: np.ndarray, delta: float,
                   ridge: float = 0.0) -> np.ndarray:
    """Minimize A^T gram A * delta - 2 A^T moment, i.e. solve
    (gram * delta + ridge * I) A = moment.

    With ridge = 0 the (symmetric) gram must be positive definite.
    """
    gram = np.asarray(gram, dtype=float)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise DataError("gram must be square")
    if not np.allclose(gram, gram.T, atol=1e-8 * max(1.0, np.abs(gram).max())):
        raise DataError("gram must be symmetric")
    system = gram * delta + ridge * np.eye(gram.shape[0])
    if ridge == 0.0:
        eigs = np.linalg.eigvalsh(system)
        if eigs.min() <= _FLOOR_SCALE * max(eigs.max(), 0.0):
            cond = np.inf if eigs.min() <= 0 else eigs.max() / eigs.min()
            raise NumericalError(
                f"gram is singular or indefinite (condition estimate {cond:.3g})")
    try:
        return np.linalg.solve(system, np.asarray(moment, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"interval solve failed: {exc}") from None


def _psd_floor(gram: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(gram)
    floor = _FLOOR_SCALE * max(np.trace(gram), 0.0) / gram.shape[0]
    if floor <= 0.0:
        floor = _FLOOR_SCALE * max(np.abs(vals).max(), 1.0)
    return (vecs * np.clip(vals, floor, None)) @ vecs.T


def _regressors(panel: PanelDataset, xs: np.ndarray, k: int,
                mask: np.ndarray) -> np.ndarray:
    w = np.empty((int(mask.sum()), panel.p))
    w[:, 0] = 1.0
    w[:, 1:1 + panel.d_z] = panel.z[mask]
    w[:, panel.x_block_offset:panel.x_block_offset + panel.d_x] = xs[mask, k, :]
    w[:, -1] = panel.treated_at(k)[mask].astype(float)
    return w


def _solve_with_policy(gram, moment, delta, policy, k, n_risk):
    """Solve one interval's system, applying the fallback when needed.

    Returns (solution, flag or None). The floored matrix is positive
    definite by construction, so it bypasses the definiteness gate.
    """
    try:
        return solve_interval(gram, moment, delta), None
    except NumericalError as exc:
        if policy.mode == "fail":
            raise NumericalError(
                f"interval {k} (risk set {n_risk}): {exc}") from None
        if policy.mode == "ridge":
            return solve_interval(gram, moment, delta, ridge=policy.ridge), FLAG_RIDGE
        return np.linalg.solve(_psd_floor(gram) * delta, moment), FLAG_PSD_FLOOR


def _fit_paths(panel: PanelDataset, xs: np.ndarray, pads, policy, label) -> CoefficientPaths:
    k_end = panel.grid.n_intervals
    widths = panel.grid.widths
    p = panel.p
    coef = np.full((k_end, p), np.nan)
    flags: List[Optional[str]] = [None] * k_end
    risk = np.zeros(k_end, dtype=np.int64)
    for k in range(k_end):
        mask = panel.at_risk(k)
        risk[k] = int(mask.sum())
        if risk[k] == 0:
            flags[k] = FLAG_NO_RISK_SET
            continue
        w = _regressors(panel, xs, k, mask)
        gram = w.T @ w
        if pads is not None and pads[k] is not None:
            gram = gram + pads[k]
        moment = w.T @ panel.dn[mask, k].astype(float)
        has_treated = bool(np.any(w[:, -1] != 0.0))
        if has_treated:
            sol, flag = _solve_with_policy(gram, moment, widths[k], policy, k, risk[k])
            coef[k] = sol
            flags[k] = flag
        else:
            sol, flag = _solve_with_policy(gram[:-1, :-1], moment[:-1],
                                           widths[k], policy, k, risk[k])
            coef[k, :-1] = sol
            flags[k] = FLAG_NO_TREATED if flag is None else f"{FLAG_NO_TREATED}+{flag}"
    return CoefficientPaths(grid=panel.grid, label=label, coef=coef, flags=flags,
                            risk_set_size=risk, d_z=panel.d_z, d_x=panel.d_x)


_SOURCE_LABELS = {"observed": "naive", "true_counterfactual": "oracle",
                  "forecast_counterfactual": "uncorrected"}


def fit(panel: PanelDataset, source: CovariateSource,
        policy: FallbackPolicy = DEFAULT_POLICY,
        label: Optional[str] = None) -> CoefficientPaths:
    """Per-interval least squares with the X block drawn from `source`.

    Observed covariates give the naive fit, simulated no-treatment
    trajectories the oracle fit, and model forecasts the uncorrected fit.
    Intervals without treated person-time drop the treatment column and
    report its coefficient as NaN with a flag.
    """
    xs = source_matrix(panel, source)
    return _fit_paths(panel, xs, pads=None, policy=policy,
                      label=label or _SOURCE_LABELS[source.kind])


def _horizon_pads(panel: PanelDataset, error_cov: ErrorCovariance) -> List[Optional[np.ndarray]]:
    """Per interval: sum of forecast-error covariances over treated subjects
    at risk, embedded in the X block."""
    k_end = panel.grid.n_intervals
    xo = panel.x_block_offset
    pads: List[Optional[np.ndarray]] = [None] * k_end
    for k in range(k_end):
        alive = panel.at_risk(k) & panel.treated_at(k)
        if not np.any(alive):
            continue
        horizons = k - panel.treat_start[alive] + 1
        block = np.zeros((panel.d_x, panel.d_x))
        for l, count in zip(*np.unique(horizons, return_counts=True)):
            block += count * error_cov.horizon(int(l))
        pads[k] = bias_pad_matrix(panel.p, xo, block)
    return pads


def max_horizon(panel: PanelDataset) -> int:
    """Largest forecast horizon any treated subject reaches before exit."""
    treated = panel.treat_start >= 0
    if not np.any(treated):
        return 1
    spans = panel.tau[treated] - panel.treat_start[treated]
    return max(int(spans.max()), 1)


def fit_debiased(panel: PanelDataset, model: VarModel,
                 forecasts: Optional[Dict] = None,
                 error_cov: Optional[ErrorCovariance] = None,
                 policy: FallbackPolicy = DEFAULT_POLICY,
                 label: str = "debiased") -> CoefficientPaths:
    """Forecast-based fit with the Gram matrices corrected for forecast error.

    The correction adds, per treated subject and interval, the subject's
    horizon-l forecast-error covariance into the X block of the interval's
    Gram matrix; with all correction matrices zero this reduces exactly to
    the uncorrected forecast-based fit. Pass error_cov to override the
    model-implied covariances (e.g. with ones built from known dynamics).
    """
    if forecasts is None:
        forecasts = forecast_all(model, panel)
    if error_cov is None:
        error_cov = error_covariance(model, max_horizon(panel))
    xs = source_matrix(panel, CovariateSource.forecast(forecasts))
    pads = _horizon_pads(panel, error_cov)
    return _fit_paths(panel, xs, pads=pads, policy=policy, label=label)


def empirical_risk(panel: PanelDataset,
                   coef: Union[np.ndarray, CoefficientPaths],
                   source: CovariateSource) -> float:
    """Least-squares event-rate risk of a coefficient path.

    (1/n) sum_i sum_{k < tau_i} [A_k^T W W^T A_k * delta_k - 2 A_k^T W dN_i(k)]
    with W built from the given source. NaN coefficients are treated as zero
    (they only ever multiply identically zero columns of W).
    """
    if isinstance(coef, CoefficientPaths):
        coef = coef.coef
    coef = np.nan_to_num(np.asarray(coef, dtype=float))
    k_end = panel.grid.n_intervals
    if coef.shape != (k_end, panel.p):
        raise DataError(f"coefficient array must have shape ({k_end}, {panel.p})")
    xs = source_matrix(panel, source)
    widths = panel.grid.widths
    total = 0.0
    for k in range(k_end):
        mask = panel.at_risk(k)
        if not np.any(mask):
            continue
        w = _regressors(panel, xs, k, mask)
        a = coef[k]
        wa = w @ a
        total += float(wa @ wa) * widths[k]
        total -= 2.0 * float(wa @ panel.dn[mask, k])
    return total / panel.n_subjects


def cumulative_effects(paths: CoefficientPaths) -> List[dict]:
    """Flatten per-interval values and integrated curves into table rows.

    One row per (interval, coefficient): the integrated value reported on
    the row is the curve at the interval's right endpoint.
    """
    cum = paths.cumulative()
    names = paths.coef_names
    t = paths.grid.points
    rows = []
    for k in range(paths.coef.shape[0]):
        for j, name in enumerate(names):
            rows.append({
                "t_index": k,
                "t": t[k],
                "estimator": paths.label,
                "coef_name": name,
                "value": paths.coef[k, j],
                "cumulative": cum[k + 1, j],
                "flag_fallback": paths.flags[k] or "",
            })
    return rows
