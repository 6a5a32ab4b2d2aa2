"""Noise schedules and the structured forward diffusion process.

The forward process injects Gaussian noise whose per-dimension standard
deviation is shaped two ways: a global per-embodiment scale sigma_e and a
geometric attenuation delta**j over functional window j (base dims get full
noise, end-effector dims progressively less). Both the stepwise kernel and
its closed-form marginal are provided.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embodiment import EmbodimentSpec, UnifiedActionLayout

BETA_MIN = 1e-5
BETA_MAX = 0.999


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine beta schedule over K discrete noise levels (k = 1..K)."""

    betas: np.ndarray       # shape (K,), betas[k-1] is beta_k
    alpha_bars: np.ndarray  # shape (K,), alpha_bars[k-1] = prod_{i<=k} (1 - beta_i)

    @property
    def steps(self) -> int:
        return len(self.betas)

    def beta(self, k: int) -> float:
        self._check_k(k)
        return float(self.betas[k - 1])

    def alpha_bar(self, k: int) -> float:
        """alpha_bar at level k, with alpha_bar(0) = 1."""
        if k == 0:
            return 1.0
        self._check_k(k)
        return float(self.alpha_bars[k - 1])

    def _check_k(self, k: int) -> None:
        if not 1 <= k <= self.steps:
            raise ScheduleError(f"noise level k={k} outside [1, {self.steps}]")


def build_cosine_schedule(steps: int) -> NoiseSchedule:
    """Standard cosine alpha_bar parameterization with beta clipping."""
    if steps < 2:
        raise ScheduleError(f"schedule needs at least 2 steps, got {steps}")
    s = 0.008
    k = np.arange(steps + 1, dtype=np.float64)
    f = np.cos((k / steps + s) / (1 + s) * (np.pi / 2)) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], BETA_MIN, BETA_MAX)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class EbfCovariance:
    """Diagonal noise scale: scale[d] = sigma_e * delta**window(d).

    `scale` lists per-dimension standard-deviation factors (not variances);
    the injected step noise has std sqrt(beta_k) * scale[d].
    """

    scale: np.ndarray  # shape (D,), positive
    delta: float

    @property
    def dim(self) -> int:
        return len(self.scale)


def build_ebf_covariance(
    spec: EmbodimentSpec,
    layout: UnifiedActionLayout,
    delta: float,
    stepwise: bool = False,
) -> EbfCovariance:
    """Window pyramid by default; stepwise=True attenuates per dimension index
    instead (full per-DoF decomposition, kept only for sensitivity studies).
    """
    if not 0.0 < delta <= 1.0:
        raise ScheduleError(f"delta must lie in (0, 1], got {delta}")
    scale = np.empty(layout.total_dim, dtype=np.float64)
    if stepwise:
        for d in range(layout.total_dim):
            scale[d] = spec.sigma_e * delta**d
    else:
        for j, (start, stop) in enumerate(layout.windows):
            scale[start:stop] = spec.sigma_e * delta**j
    return EbfCovariance(scale=scale, delta=delta)


def unit_covariance(layout: UnifiedActionLayout) -> EbfCovariance:
    """Plain isotropic noise (sigma_e = 1, delta = 1)."""
    return EbfCovariance(scale=np.ones(layout.total_dim), delta=1.0)


def _check_chunk(chunk: np.ndarray, cov: EbfCovariance) -> np.ndarray:
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape[-1] != cov.dim:
        raise ScheduleError(
            f"chunk trailing dim {chunk.shape[-1]} != covariance dim {cov.dim}"
        )
    if not np.all(np.isfinite(chunk)):
        raise ScheduleError("chunk contains non-finite entries")
    return chunk


def forward_step(
    chunk_km1: np.ndarray,
    k: int,
    schedule: NoiseSchedule,
    cov: EbfCovariance,
    rng: np.random.Generator,
) -> np.ndarray:
    """One forward kernel application: level k-1 -> k.

    Returns sqrt(1-beta_k) * chunk + sqrt(beta_k) * scale * eps.
    """
    chunk = _check_chunk(chunk_km1, cov)
    beta = schedule.beta(k)
    eps = rng.standard_normal(chunk.shape)
    return np.sqrt(1.0 - beta) * chunk + np.sqrt(beta) * cov.scale * eps


def forward_marginal(
    clean: np.ndarray,
    k: int,
    schedule: NoiseSchedule,
    cov: EbfCovariance,
    rng: np.random.Generator,
) -> np.ndarray:
    """Closed form of k composed forward steps from a clean chunk.

    Returns sqrt(alpha_bar_k) * clean + sqrt(1 - alpha_bar_k) * scale * eps.
    """
    clean = _check_chunk(clean, cov)
    schedule._check_k(k)
    abar = schedule.alpha_bar(k)
    eps = rng.standard_normal(clean.shape)
    return np.sqrt(abar) * clean + np.sqrt(1.0 - abar) * cov.scale * eps
