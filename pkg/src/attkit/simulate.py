"""Cohort generator for the benchmark scenarios.

Per subject: baseline covariates are drawn once (uniform age-like value,
Bernoulli gender-like flag, Poisson comorbidity-like score); time-varying
covariates start uniform and then follow treatment-dependent linear dynamics;
treatment initiation is a Bernoulli draw whose rate loads exponentially on
the current covariates; events per interval come from a constant-rate Poisson
process sampled by thinning. A no-treatment covariate trajectory is
co-simulated for every subject: it shares the observed noise while the
subject is untreated and evolves under the untreated dynamics with
independent noise afterwards.

Generation order within the step t -> t+1 (fixed, for reproducibility):
event counts for (t, t+1] under the state at t, then the covariate update,
then treatment initiation (drawn only for subjects untreated at t, using the
covariates at t, effective from t+1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .panel import PanelDataset, TimeGrid

# Attractor of the treated covariate dynamics.
TREATED_TARGET = math.sqrt(1000.0)

# Runaway guard: a single interval producing more events than this aborts
# the run instead of flooding memory.
EVENT_COUNT_CAP = 1_000_000


@dataclass
class SimParams:
    """Full parameter set of the cohort generator."""

    d_x: int = 1
    horizon: int = 11
    min_x: np.ndarray = field(default_factory=lambda: np.array([0.0]))
    max_x: np.ndarray = field(default_factory=lambda: np.array([10.0]))
    kappa_untreated: np.ndarray = field(default_factory=lambda: np.array([-0.25]))
    kappa_treated: np.ndarray = field(default_factory=lambda: np.array([0.25]))
    noise_cov: np.ndarray = field(default_factory=lambda: np.array([[0.4]]))
    treat_loadings: np.ndarray = field(default_factory=lambda: np.array([0.12]))
    treat_scale: float = 1.5
    treat_rate_effect: float = -0.01
    base_rate: float = 30.0
    z_rates: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.02, 0.01]))
    x_rates: np.ndarray = field(default_factory=lambda: np.array([-0.25]))
    z1_min: float = -20.0
    z1_max: float = -10.0
    z2_prob: float = 0.5
    z3_rate: float = 0.1
    n: int = 1000
    seed: int = 0
    cf_from_observed: bool = False

    def __post_init__(self):
        for name in ("min_x", "max_x", "kappa_untreated", "kappa_treated",
                     "treat_loadings", "x_rates"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if arr.size == 1 and self.d_x > 1:
                arr = np.full(self.d_x, arr[0])
            if arr.size != self.d_x:
                raise ConfigError(f"{name} must have length d_x={self.d_x}")
            setattr(self, name, arr)
        self.z_rates = np.atleast_1d(np.asarray(self.z_rates, dtype=float))
        if self.z_rates.size != 3:
            raise ConfigError("z_rates must have length 3")
        cov = np.asarray(self.noise_cov, dtype=float)
        if cov.ndim == 0 or cov.size == 1:
            cov = float(cov.reshape(-1)[0]) * np.eye(self.d_x)
        elif cov.ndim == 1:
            cov = np.diag(cov if cov.size == self.d_x else np.full(self.d_x, cov[0]))
        if cov.shape != (self.d_x, self.d_x):
            raise ConfigError("noise_cov must be d_x x d_x")
        if not np.allclose(cov, cov.T):
            raise ConfigError("noise_cov must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
            raise ConfigError("noise_cov must be positive semi-definite")
        self.noise_cov = cov
        if np.any(self.min_x > self.max_x):
            raise ConfigError("min_x must be <= max_x componentwise")
        if self.treat_scale < 0:
            raise ConfigError("treat_scale must be >= 0")
        if not 0.0 <= self.z2_prob <= 1.0:
            raise ConfigError("z2_prob must lie in [0, 1]")
        if self.z3_rate <= 0:
            raise ConfigError("z3_rate must be > 0")
        if self.horizon < 1 or self.n < 1:
            raise ConfigError("horizon and n must be >= 1")

    def with_sigma(self, value: float) -> "SimParams":
        """Convenience: replace the noise covariance by value * identity."""
        return replace(self, noise_cov=float(value) * np.eye(self.d_x))

    @property
    def sigma_diag(self) -> np.ndarray:
        return np.diag(self.noise_cov)


def preset(name: str) -> SimParams:
    """Named benchmark scenarios; see PRESETS for the available names."""
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None


PRESETS = {
    "paper-1cov": lambda: SimParams(),
    "paper-3cov": lambda: SimParams(
        d_x=3,
        min_x=np.zeros(3),
        max_x=np.array([10.0, 20.0, 30.0]),
        kappa_untreated=np.full(3, -0.25),
        kappa_treated=np.full(3, 0.25),
        noise_cov=0.4 * np.eye(3),
        x_rates=np.array([-0.3, 0.0, -0.25]),
        treat_loadings=np.array([0.16, 0.14, 0.0]),
    ),
    "paper-6cov": lambda: SimParams(
        d_x=6,
        min_x=np.zeros(6),
        max_x=np.array([10.0, 20.0, 30.0, 10.0, 20.0, 30.0]),
        kappa_untreated=np.full(6, -0.25),
        kappa_treated=np.full(6, 0.25),
        noise_cov=0.4 * np.eye(6),
        x_rates=np.array([-0.3, -0.2, 0.0, 0.0, -0.2, -0.25]),
        treat_loadings=np.array([0.13, 0.12, 0.13, 0.14, 0.0, 0.0]),
    ),
}


# ---------------------------------------------------------------------------
# Elementary draws

def draw_baseline(params: SimParams, rng: np.random.Generator) -> np.ndarray:
    """(Z1, Z2, Z3): uniform on [z1_min, z1_max], Bernoulli(z2_prob), Poisson(z3_rate)."""
    return np.array([
        rng.uniform(params.z1_min, params.z1_max),
        float(rng.random() < params.z2_prob),
        float(rng.poisson(params.z3_rate)),
    ])


def _noise_factor(params: SimParams) -> np.ndarray:
    """Matrix L with L L^T = noise_cov (eigen-based, tolerates singular cov)."""
    vals, vecs = np.linalg.eigh(params.noise_cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _step_batch(x, treated, x0, params, rng, factor):
    """Advance one grid step for a batch of subjects.

    x, x0: (m, d_x); treated: (m,) bool. Both arms update incrementally:
    untreated values drift by kappa_untreated * x (a negative rate decays
    the covariate steadily toward zero), treated values revert toward
    TREATED_TARGET. Untreated rows share one noise draw between the observed
    and no-treatment paths; treated rows use an independent draw for the
    no-treatment path.
    """
    eps = rng.standard_normal(x.shape) @ factor.T
    x_next = np.where(treated[:, None],
                      x + params.kappa_treated * (TREATED_TARGET - x) + eps,
                      x + params.kappa_untreated * x + eps)
    x0_next = np.array(x_next)
    if np.any(treated):
        eps_cf = rng.standard_normal((int(treated.sum()), x.shape[1])) @ factor.T
        base = x[treated] if params.cf_from_observed else x0[treated]
        x0_next[treated] = base + params.kappa_untreated * base + eps_cf
    return x_next, x0_next


def step_covariates(x, treated, params: SimParams, rng,
                    x0=None) -> Tuple[np.ndarray, np.ndarray]:
    """One covariate transition for a single subject.

    Returns (next observed value, next no-treatment value). While untreated
    the two are identical (shared noise); once treated the observed value
    reverts toward TREATED_TARGET and the no-treatment value continues under
    the untreated dynamics with its own noise.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x0 = x if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    xn, x0n = _step_batch(x[None, :], np.array([bool(treated)]), x0[None, :],
                          params, rng, _noise_factor(params))
    return xn[0], x0n[0]


def treatment_probability(x, params: SimParams) -> float:
    """Initiation probability: clamp(scale * sum(loadings) * exp(loadings . x))."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    raw = params.treat_scale * params.treat_loadings.sum() * math.exp(
        float(params.treat_loadings @ x))
    return min(max(raw, 0.0), 1.0)


def draw_treatment(x, params: SimParams, rng: np.random.Generator) -> bool:
    """Bernoulli initiation draw for a subject untreated at the current step."""
    return bool(rng.random() < treatment_probability(x, params))


# ---------------------------------------------------------------------------
# Event sampling

@dataclass
class IntensitySpec:
    """Additive event rate for one subject on one interval.

    rate() clamps the affine combination at zero before it is used as a
    Poisson intensity.
    """

    base_rate: float
    treat_rate_effect: float
    z_rates: np.ndarray
    x_rates: np.ndarray
    treated: bool
    z: np.ndarray
    x: np.ndarray

    @classmethod
    def from_params(cls, params: SimParams, treated, z, x) -> "IntensitySpec":
        return cls(params.base_rate, params.treat_rate_effect,
                   np.asarray(params.z_rates, dtype=float),
                   np.asarray(params.x_rates, dtype=float),
                   bool(treated), np.atleast_1d(z), np.atleast_1d(x))

    def rate(self) -> float:
        raw = (self.base_rate
               + (self.treat_rate_effect if self.treated else 0.0)
               + float(self.z_rates @ self.z)
               + float(self.x_rates @ self.x))
        return max(raw, 0.0)


def thinning_sample(spec: IntensitySpec, interval: Tuple[float, float],
                    bound: float, rng: np.random.Generator,
                    return_times: bool = False):
    """Sample the event count on (a, b] by acceptance-rejection.

    Proposals arrive at the constant dominating rate `bound`; each is kept
    with probability rate/bound. `bound` must dominate the clamped rate on
    the whole interval. Timestamps are only returned on request; the data
    model keeps counts.
    """
    a, b = interval
    if b <= a:
        raise DataError("interval must have positive length")
    if bound < 0:
        raise DataError("dominating rate must be >= 0")
    n_prop = rng.poisson(bound * (b - a))
    if n_prop > EVENT_COUNT_CAP:
        raise DataError(
            f"more than {EVENT_COUNT_CAP} proposals on one interval (bound={bound})")
    times = np.sort(rng.uniform(a, b, size=n_prop))
    rates = np.array([spec.rate() for _ in times])  # constant here, kept general
    if np.any(rates > bound * (1 + 1e-12)):
        raise DataError(
            f"dominating rate {bound} below intensity {rates.max():.6g}")
    if n_prop and np.all(rates == bound):
        accepted = np.ones(n_prop, dtype=bool)
    else:
        accepted = rng.uniform(0.0, 1.0, size=n_prop) * bound <= rates
    count = int(accepted.sum())
    if return_times:
        return count, times[accepted]
    return count


def _thinned_counts(rates: np.ndarray, delta: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Vectorized thinning with the tight per-subject bound (rate itself).

    With bound == rate every proposal is accepted, so no acceptance uniforms
    are consumed; the result is exactly Poisson(rate * delta) per subject.
    """
    counts = rng.poisson(rates * delta)
    if counts.max(initial=0) > EVENT_COUNT_CAP:
        i = int(np.argmax(counts))
        raise DataError(
            f"event count cap exceeded (rate={rates[i]:.6g}, delta={delta})")
    return counts.astype(np.int64)


def event_rates(params: SimParams, treated: np.ndarray, z: np.ndarray,
                x: np.ndarray) -> np.ndarray:
    """Clamped additive event rates for a batch of subjects."""
    raw = (params.base_rate
           + params.treat_rate_effect * treated.astype(float)
           + z @ params.z_rates
           + x @ params.x_rates)
    return np.clip(raw, 0.0, None)


# ---------------------------------------------------------------------------
# Cohort generation

def simulate_cohort(params: SimParams,
                    rng: Optional[np.random.Generator] = None) -> PanelDataset:
    """Generate one cohort; deterministic given params (including seed).

    All subjects are followed over the full horizon. The returned panel
    always carries the co-simulated no-treatment covariate trajectories.
    """
    rng = np.random.default_rng(params.seed) if rng is None else rng
    n, k_end, d = params.n, params.horizon, params.d_x
    factor = _noise_factor(params)

    z = np.column_stack([
        rng.uniform(params.z1_min, params.z1_max, size=n),
        (rng.random(n) < params.z2_prob).astype(float),
        rng.poisson(params.z3_rate, size=n).astype(float),
    ])
    x = np.zeros((n, k_end + 1, d))
    x0 = np.zeros((n, k_end + 1, d))
    x[:, 0, :] = rng.uniform(params.min_x, params.max_x, size=(n, d))
    x0[:, 0, :] = x[:, 0, :]
    dn = np.zeros((n, k_end), dtype=np.int64)
    treat_start = np.full(n, -1, dtype=np.int64)
    treated = np.zeros(n, dtype=bool)

    for t in range(k_end):
        rates = event_rates(params, treated, z, x[:, t, :])
        dn[:, t] = _thinned_counts(rates, 1.0, rng)
        x[:, t + 1, :], x0[:, t + 1, :] = _step_batch(
            x[:, t, :], treated, x0[:, t, :], params, rng, factor)
        untreated = ~treated
        if params.treat_scale > 0 and np.any(untreated):
            probs = np.clip(
                params.treat_scale * params.treat_loadings.sum()
                * np.exp(x[untreated, t, :] @ params.treat_loadings),
                0.0, 1.0)
            started = rng.random(int(untreated.sum())) < probs
            idx = np.flatnonzero(untreated)[started]
            treated[idx] = True
            treat_start[idx] = t + 1

    return PanelDataset(
        TimeGrid.integers(k_end),
        np.arange(n, dtype=np.int64),
        z, x, treat_start, dn,
        np.full(n, k_end, dtype=np.int64),
        x0,
    )
