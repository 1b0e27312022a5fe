"""Two-state atomic clock deviation model.

State is ``[phase deviation (s), fractional frequency deviation]``.  One
sampling step of length ``tau`` maps it through ``A = [[1, tau], [0, 1]]``,
adds the steering input through ``B = [tau, 1]^T`` and a Gaussian kick with
covariance :func:`process_noise_cov`.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidTau
from .numerics import psd_factor

C = np.array([[1.0, 0.0]])


@dataclass(frozen=True)
class ClockParams:
    """White-frequency (``sigma1_sq``) and random-walk-frequency
    (``sigma2_sq``) noise variances of one clock."""

    sigma1_sq: float
    sigma2_sq: float

    def __post_init__(self):
        if not (self.sigma1_sq >= 0 and self.sigma2_sq >= 0):
            raise ValueError(f"noise variances must be >= 0, got {self.sigma1_sq}, {self.sigma2_sq}")

    def scaled(self, factor: float) -> "ClockParams":
        return ClockParams(self.sigma1_sq * factor, self.sigma2_sq * factor)


@dataclass(frozen=True)
class ClockState:
    phase_dev: float
    freq_dev: float

    def as_array(self) -> np.ndarray:
        return np.array([self.phase_dev, self.freq_dev])


@dataclass(frozen=True)
class GnssClockParams:
    """Clock inside a GNSS receiver: its noise and the mean initial phase
    offset ``theta0`` (seconds) it shows against GNSS time."""

    params: ClockParams
    theta0: float = 0.0


def _check_tau(tau):
    if not tau > 0:
        raise InvalidTau(f"sampling interval must be > 0, got {tau}")


def system_matrices(tau: float):
    """``(A, B, C)`` of the clock model for sampling interval ``tau``.
    ``B`` is returned as a 2x1 column."""
    _check_tau(tau)
    a = np.array([[1.0, tau], [0.0, 1.0]])
    b = np.array([[tau], [1.0]])
    return a, b, C.copy()


def process_noise_cov(params: ClockParams, tau: float) -> np.ndarray:
    _check_tau(tau)
    s1, s2 = params.sigma1_sq, params.sigma2_sq
    return np.array([
        [tau * s1 + tau**3 * s2 / 3.0, tau**2 * s2 / 2.0],
        [tau**2 * s2 / 2.0, tau * s2],
    ])


def step_clock(state: ClockState, u: float, v, tau: float) -> ClockState:
    _check_tau(tau)
    x1 = state.phase_dev + tau * state.freq_dev + tau * u + v[0]
    x2 = state.freq_dev + u + v[1]
    return ClockState(x1, x2)


def sample_process_noise(params: ClockParams, tau: float, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw ``v ~ N(0, Q_s)`` as ``L xi`` with ``L L^T = Q_s``.

    Returns one 2-vector, or ``size`` of them stacked as ``(size, 2)``.
    """
    factor = psd_factor(process_noise_cov(params, tau))
    if size is None:
        return factor @ rng.standard_normal(2)
    return rng.standard_normal((size, 2)) @ factor.T


def stacked_noise_cov(params_list, tau: float) -> np.ndarray:
    """Block-diagonal covariance of several independent clocks."""
    n = len(params_list)
    q = np.zeros((2 * n, 2 * n))
    for i, p in enumerate(params_list):
        q[2 * i:2 * i + 2, 2 * i:2 * i + 2] = process_noise_cov(p, tau)
    return q


def free_phase_variance(params: ClockParams, tau: float, steps: int) -> float:
    """Variance of the phase after ``steps`` free-running steps from a known
    start: ``tau s1 T + s2 (tau T)^3 / 3`` (exact for the sampled model)."""
    _check_tau(tau)
    t = steps * tau
    return params.sigma1_sq * t + params.sigma2_sq * t**3 / 3.0
