"""Reverse-process action generation.

Three modes share the structured-noise initialization (per-dimension scale
vector from the covariance):

* full      — DDPM posterior stepping through every level K..1
* jumpy     — network calls only every J levels, re-noising through the
              closed-form marginal between calls
* flow      — fixed-step Euler integration of a learned velocity field

Samplers take a predictor callable rather than raw parameters so oracle
stubs can stand in for the network; see `denoiser.make_predictor`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .schedule import EbfCovariance, NoiseSchedule


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    steps: int
    jumpy_interval: int = 1
    mode: str = "diffusion"  # "diffusion" | "flow_matching"

    def __post_init__(self):
        if not 1 <= self.jumpy_interval <= self.steps:
            raise SamplerError(
                f"jumpy interval {self.jumpy_interval} outside [1, {self.steps}]"
            )
        if self.mode not in ("diffusion", "flow_matching"):
            raise SamplerError(f"unknown sampler mode {self.mode!r}")


class CountingPredictor:
    """Wraps a predictor and counts network evaluations."""

    def __init__(self, predict):
        self._predict = predict
        self.evaluations = 0

    def __call__(self, chunk, k):
        self.evaluations += 1
        return self._predict(chunk, k)


def _init_noise(shape, cov: EbfCovariance, rng: np.random.Generator) -> np.ndarray:
    if shape[-1] != cov.dim:
        raise SamplerError(f"chunk dim {shape[-1]} != covariance dim {cov.dim}")
    return rng.standard_normal(shape) * cov.scale


def _posterior_step(tau, x0hat, k, schedule, cov, rng):
    """One reverse kernel application k -> k-1."""
    abar_k = schedule.alpha_bar(k)
    abar_km1 = schedule.alpha_bar(k - 1)
    beta = schedule.beta(k)
    alpha = 1.0 - beta
    denom = 1.0 - abar_k
    mean = (np.sqrt(abar_km1) * beta * x0hat + np.sqrt(alpha) * (1.0 - abar_km1) * tau) / denom
    if k > 1:
        var = beta * (1.0 - abar_km1) / denom
        return mean + np.sqrt(var) * cov.scale * rng.standard_normal(tau.shape)
    return mean


def sample_full(
    predict,
    shape: tuple,
    schedule: NoiseSchedule,
    cov: EbfCovariance,
    rng: np.random.Generator,
    clip_x0: bool = True,
) -> np.ndarray:
    """Full reverse chain: K network evaluations, scaled posterior noise.

    `shape` is (H, D) for one chunk or (B, H, D) for a batch; `predict`
    maps (chunk, k) to a clean-chunk estimate of the same shape.
    """
    tau = _init_noise(shape, cov, rng)
    for k in range(schedule.steps, 0, -1):
        x0hat = predict(tau, k)
        if clip_x0:
            x0hat = np.clip(x0hat, -1.0, 1.0)
        tau = _posterior_step(tau, x0hat, k, schedule, cov, rng)
    return np.clip(tau, -1.0, 1.0)


def sample_jumpy(
    predict,
    shape: tuple,
    schedule: NoiseSchedule,
    cov: EbfCovariance,
    config: SamplerConfig,
    rng: np.random.Generator,
    clip_x0: bool = True,
) -> np.ndarray:
    """Skip-step sampling: predict the clean chunk, re-noise J levels lower.

    Performs ceil(K / J) network evaluations. J = 1 has no levels to skip
    and runs the full posterior chain (bit-identical to `sample_full`).
    """
    j = config.jumpy_interval
    if j == 1:
        return sample_full(predict, shape, schedule, cov, rng, clip_x0=clip_x0)
    tau = _init_noise(shape, cov, rng)
    k = schedule.steps
    while k > 0:
        x0hat = predict(tau, k)
        if clip_x0:
            x0hat = np.clip(x0hat, -1.0, 1.0)
        k_next = max(k - j, 0)
        if k_next == 0:
            tau = x0hat
        else:
            abar = schedule.alpha_bar(k_next)
            eps = rng.standard_normal(tau.shape)
            tau = np.sqrt(abar) * x0hat + np.sqrt(1.0 - abar) * cov.scale * eps
        k = k_next
    return np.clip(tau, -1.0, 1.0)


def sample_flow_matching(
    velocity,
    shape: tuple,
    cov: EbfCovariance,
    rng: np.random.Generator,
    n_steps: int = 10,
) -> np.ndarray:
    """Integrate the velocity field from scaled noise (t=1) to data (t=0).

    Explicit Euler with `n_steps` uniform steps; `velocity` maps (chunk, t)
    to dchunk/dt. Linear-path fields integrate exactly.
    """
    tau = _init_noise(shape, cov, rng)
    dt = 1.0 / n_steps
    t = 1.0
    for _ in range(n_steps):
        tau = tau - dt * velocity(tau, t)
        t -= dt
    return np.clip(tau, -1.0, 1.0)


def expected_evaluations(steps: int, jumpy_interval: int) -> int:
    return math.ceil(steps / jumpy_interval)
