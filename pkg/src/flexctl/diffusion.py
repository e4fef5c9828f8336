"""Noise schedules and the forward/reverse diffusion processes.

Two formulations are supported: a discrete DDPM chain with linear betas
(the convention alpha_bar[0] means t=0, i.e. no noise, alpha_bar[t] is the
cumulative product through step t) and a continuous rectified-flow path
x_t = (1-t) x0 + t eps with velocity target eps - x0.

All functions here are pure; they accept Tensors or bare numpy arrays and
return the same kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, UsageError


class ConfigError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """Per-timestep coefficients of the discrete chain, indexed t = 1..T.

    Arrays have length T+1 with slot 0 reserved for the t=0 convention:
    beta[0] = 0, alpha[0] = 1, alpha_bar[0] = 1, sigma2[0] = 0.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma2: np.ndarray = field(init=False)
    snr: np.ndarray = field(init=False)
    weight: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        self.sigma2 = np.zeros_like(self.beta)
        self.sigma2[1:] = (1.0 - self.alpha_bar[:-1]) / (1.0 - self.alpha_bar[1:]) * self.beta[1:]
        self.snr = np.zeros_like(self.beta)
        self.snr[1:] = self.alpha_bar[1:] / (1.0 - self.alpha_bar[1:])
        # unweighted MSE objective: w(lambda_t) fixed to 1
        self.weight = np.ones_like(self.beta)


@dataclass
class FlowSchedule:
    """Straight-path interpolation coefficients a_t = 1-t, b_t = t."""

    def a(self, t: float) -> float:
        return 1.0 - t

    def b(self, t: float) -> float:
        return t


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(T=T, beta=beta)


def _coeff(values, like) -> object:
    """Shape per-sample scalars so they broadcast over trailing data dims."""
    arr = np.asarray(values, dtype=np.float64)
    data = like.data if isinstance(like, Tensor) else like
    if arr.ndim == 0:
        return data.dtype.type(arr)
    return arr.reshape(arr.shape + (1,) * (data.ndim - 1)).astype(data.dtype)


def q_sample(x0, t, eps, s: NoiseSchedule):
    """Corrupt x0 to x_t: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    t may be a single int or a per-sample integer array matching x0's
    leading dimension.
    """
    tarr = np.asarray(t)
    if np.any(tarr < 1) or np.any(tarr > s.T):
        raise UsageError(f"timestep {t} outside [1, {s.T}]")
    abar = s.alpha_bar[tarr]
    c0 = _coeff(np.sqrt(abar), x0)
    c1 = _coeff(np.sqrt(1.0 - abar), x0)
    return x0 * c0 + eps * c1


def ddpm_posterior_step(x_t, eps_hat, t: int, s: NoiseSchedule, z):
    """One ancestral reverse step: posterior mean plus sigma_t * z (z ignored at t=1)."""
    if t < 1 or t > s.T:
        raise UsageError(f"timestep {t} outside [1, {s.T}]")
    a_t = s.alpha[t]
    abar_t = s.alpha_bar[t]
    mu = (x_t - eps_hat * _coeff((1.0 - a_t) / math.sqrt(1.0 - abar_t), x_t)) * _coeff(1.0 / math.sqrt(a_t), x_t)
    sigma = math.sqrt(s.sigma2[t])
    if sigma == 0.0 or t == 1:
        return mu
    return mu + z * _coeff(sigma, x_t)


def ddim_step(x_t, eps_hat, t: int, t_prev: int, s: NoiseSchedule):
    """Deterministic reverse step; t_prev = 0 returns the x0 estimate."""
    if t_prev >= t:
        raise UsageError(f"ddim_step needs t_prev < t, got {t_prev} >= {t}")
    if t > s.T or t_prev < 0:
        raise UsageError(f"timesteps ({t}, {t_prev}) outside schedule")
    abar_t = s.alpha_bar[t]
    abar_p = s.alpha_bar[t_prev]
    x0_hat = (x_t - eps_hat * _coeff(math.sqrt(1.0 - abar_t), x_t)) * _coeff(1.0 / math.sqrt(abar_t), x_t)
    return x0_hat * _coeff(math.sqrt(abar_p), x_t) + eps_hat * _coeff(math.sqrt(1.0 - abar_p), x_t)


def ddim_timesteps(T: int, steps: int) -> list:
    """Uniform sub-schedule visited high-to-low, e.g. T=1000, 20 steps ->
    1000, 950, ..., 50; the step after the last is 0."""
    if steps < 1 or steps > T:
        raise ConfigError(f"steps {steps} outside [1, {T}]")
    return [T * (steps - i) // steps for i in range(steps)]


def flow_sample(x0, t, eps, f: FlowSchedule):
    """Interpolate along the straight path: (1-t) x0 + t eps.

    t may be a scalar in [0,1] or a per-sample array.
    """
    tarr = np.asarray(t, dtype=np.float64)
    if np.any(tarr < 0.0) or np.any(tarr > 1.0):
        raise UsageError(f"flow time {t} outside [0, 1]")
    return x0 * _coeff(1.0 - tarr, x0) + eps * _coeff(tarr, x0)


def flow_velocity_target(x0, eps):
    """Training target for the velocity head under the straight path."""
    return eps - x0


def rflow_step(x, v_hat, dt: float):
    """Explicit Euler step of the probability-flow ODE."""
    if not math.isfinite(dt):
        raise UsageError("dt must be finite")
    return x + v_hat * _coeff(dt, x)
