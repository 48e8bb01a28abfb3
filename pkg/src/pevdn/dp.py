"""Differentially private training machinery and the replay-aware accountant.

Sampling, clipping, noising and the update gate each take their own
generator so any of them can be replayed in isolation.

The accountant follows the moments method for the subsampled Gaussian
mechanism: with ``mu0 = N(0, s^2)``, ``mu1 = N(1, s^2)`` and the mixture
``mu = (1 - q) mu0 + q mu1``, the log moment at integer order ``lam`` is

    alpha(lam) = log max( E_{mu0}[(mu0/mu)^lam], E_{mu}[(mu/mu0)^lam] )

where ``s`` is the noise multiplier (noise std over clip norm).  Both
expectations are evaluated by adaptive quadrature in log space so large
orders do not overflow.  ``T`` compositions at failure probability ``delta``
give ``eps = min_lam (T alpha(lam) + log(1/delta)) / lam``.

For replay-buffer training an episode takes part in at most ``buffer_size``
iterations, and updates only happen with probability
``1 / buffer_throughput``; :func:`replay_ledger` combines the two.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import EmptyEpisode, NumericalFailure

LAMBDA_MAX = 64
QUAD_EPSABS = 1e-12
_SPAN = 40.0


@dataclass(frozen=True)
class DPConfig:
    clip: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5
    buffer_size: int = 500
    buffer_throughput: float = 1.0
    expected_batch_size: int = 32

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip threshold must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise multiplier must be non-negative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.buffer_throughput < 1:
            raise ValueError("buffer_throughput must be at least 1")
        if not 0 < self.sample_rate <= 1:
            raise ValueError("expected_batch_size / buffer_size must lie in (0, 1]")

    @property
    def sample_rate(self) -> float:
        return self.expected_batch_size / self.buffer_size

    @property
    def sigma(self) -> float:
        """Standard deviation of the gradient noise."""
        return self.noise_multiplier * self.clip


def poisson_sample(buffer_len: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of a Poisson minibatch: each slot kept independently with probability ``q``."""
    if not 0 < q <= 1:
        raise ValueError("sample rate must lie in (0, 1]")
    return np.flatnonzero(rng.random(buffer_len) < q)


def clip(g: np.ndarray, c: float) -> np.ndarray:
    """``g / max(1, ||g|| / c)``."""
    if c <= 0:
        raise ValueError("clip threshold must be positive")
    norm = float(np.linalg.norm(g))
    return g / max(1.0, norm / c)


def clip_rows(g: np.ndarray, c: float) -> np.ndarray:
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.maximum(1.0, norms / c)


def noise(g_sum: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.array(g_sum, dtype=np.float64, copy=True)
    return g_sum + rng.normal(0.0, sigma, size=np.shape(g_sum))


def update_gate(buffer_throughput: float, rng: np.random.Generator) -> bool:
    """True with probability ``1 / buffer_throughput``."""
    if buffer_throughput < 1:
        raise ValueError("buffer_throughput must be at least 1")
    return bool(rng.random() < 1.0 / buffer_throughput)


def per_episode_gradient(transition_grads) -> np.ndarray:
    grads = list(transition_grads)
    if not grads:
        raise EmptyEpisode("an episode must contain at least one transition")
    return np.mean(np.stack(grads), axis=0)


def _log_ratio(z, q, s):
    """``log(mu(z) / mu0(z))``."""
    log_keep = math.log1p(-q) if q < 1 else -np.inf
    return np.logaddexp(log_keep, math.log(q) + (2.0 * z - 1.0) / (2.0 * s * s))


def _log_mu0(z, s):
    return -z * z / (2.0 * s * s) - math.log(s * math.sqrt(2.0 * math.pi))


def _log_integral(logf, lo, hi, points):
    grid = np.concatenate([np.linspace(lo, hi, 4001), points])
    shift = float(np.max(logf(grid)))
    if not np.isfinite(shift):
        raise NumericalFailure("log integrand is not finite on the integration window")
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(lambda z: math.exp(float(logf(z)) - shift), lo, hi,
                                      points=sorted(set(points)), epsabs=QUAD_EPSABS,
                                      epsrel=1e-10, limit=1000)
        except integrate.IntegrationWarning as exc:
            raise NumericalFailure(f"quadrature did not converge: {exc}") from exc
    if not (val > 0 and np.isfinite(val)) or err > max(1e3 * QUAD_EPSABS, 1e-8 * val):
        raise NumericalFailure(f"quadrature error {err:.3g} too large for value {val:.3g}")
    return shift + math.log(val)


@lru_cache(maxsize=None)
def log_moment(q: float, sigma: float, lam: int) -> float:
    """Log moment of the subsampled Gaussian mechanism at integer order ``lam``.

    ``sigma`` is the noise multiplier (noise std relative to sensitivity).
    """
    if lam < 1 or int(lam) != lam:
        raise ValueError("order must be a positive integer")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    lo = -lam - _SPAN * sigma
    hi = lam + 1.0 + _SPAN * sigma
    points = np.array([-float(lam), 0.0, 0.5, 1.0, lam + 1.0])

    def log_e1(z):
        return _log_mu0(z, sigma) - lam * _log_ratio(z, q, sigma)

    def log_e2(z):
        return _log_mu0(z, sigma) + (lam + 1) * _log_ratio(z, q, sigma)

    a1 = _log_integral(log_e1, lo, hi, points)
    a2 = _log_integral(log_e2, lo, hi, points)
    # the moment of a no-op mechanism is exactly zero; quadrature noise can dip below
    return max(a1, a2, 0.0)


def log_moments(q: float, sigma: float, lambda_max: int = LAMBDA_MAX) -> np.ndarray:
    return np.array([log_moment(float(q), float(sigma), lam) for lam in range(1, lambda_max + 1)])


def epsilon_for(T: int, q: float, sigma: float, delta: float, lambda_max: int = LAMBDA_MAX) -> float:
    if T < 1:
        raise ValueError("need at least one composition")
    alphas = log_moments(q, sigma, lambda_max)
    lams = np.arange(1, lambda_max + 1)
    return float(np.min((T * alphas + math.log(1.0 / delta)) / lams))


def replay_ledger(cfg: DPConfig, lambda_max: int = LAMBDA_MAX):
    """``(eps_tilde, delta_tilde)`` for the whole run.

    The accountant composes ``buffer_size`` iterations, the most any single
    episode can take part in, and both terms are scaled by the update
    probability ``1 / buffer_throughput``.
    """
    eps = epsilon_for(cfg.buffer_size, cfg.sample_rate, cfg.noise_multiplier, cfg.delta, lambda_max)
    return eps / cfg.buffer_throughput, cfg.delta / cfg.buffer_throughput


@dataclass
class PrivacyLedger:
    """Running privacy state of one training run."""

    cfg: DPConfig
    lambda_max: int = LAMBDA_MAX
    iterations: int = 0
    alphas: np.ndarray = field(init=False)

    def __post_init__(self):
        self.alphas = log_moments(self.cfg.sample_rate, self.cfg.noise_multiplier, self.lambda_max)

    def step(self):
        self.iterations += 1

    def epsilon_raw(self) -> float:
        """Accountant epsilon for the compositions any one episode has seen so far."""
        t = min(self.iterations, self.cfg.buffer_size)
        if t == 0:
            return 0.0
        lams = np.arange(1, self.lambda_max + 1)
        return float(np.min((t * self.alphas + math.log(1.0 / self.cfg.delta)) / lams))

    def snapshot(self) -> dict:
        eps = self.epsilon_raw()
        return {
            "T": self.iterations,
            "epsilon_raw": eps,
            "epsilon_tilde": eps / self.cfg.buffer_throughput,
            "delta_tilde": self.cfg.delta / self.cfg.buffer_throughput,
        }
