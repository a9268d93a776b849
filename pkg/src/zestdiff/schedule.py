"""Forward-noising schedule: cumulative signal coefficients and helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class NoiseSchedule:
    """Signal coefficients alpha[0..T] with alpha[0] = 1 and alpha[T] ~ 0."""

    T_train: int
    alpha: np.ndarray
    kind: str = "linear-beta"
    sqrt_alpha: np.ndarray = field(init=False)
    sqrt_one_minus_alpha: np.ndarray = field(init=False)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.shape != (self.T_train + 1,):
            raise ValueError(
                f"schedule needs T_train+1 = {self.T_train + 1} coefficients, "
                f"got {self.alpha.shape}")
        if self.alpha[0] != 1.0:
            raise ValueError("alpha[0] must be exactly 1")
        if not np.all(np.diff(self.alpha) < 0):
            raise ValueError("alpha must be strictly decreasing")
        if self.alpha[-1] > 1e-3:
            raise ValueError(f"alpha[T] must be <= 1e-3, got {self.alpha[-1]:.2e}")
        self.sqrt_alpha = np.sqrt(self.alpha)
        self.sqrt_one_minus_alpha = np.sqrt(1.0 - self.alpha)


def make_schedule(T_train: int = 1000, kind: str = "linear-beta") -> NoiseSchedule:
    """Build a schedule of `T_train` noising steps.

    linear-beta: per-step noise rates linearly spaced 1e-4 -> 2e-2 at the
    1000-step reference, rescaled by 1000/T_train (and clipped at 0.999) so
    the terminal signal stays <= 1e-3 at any length.
    cosine: squared-cosine signal curve with the usual 0.008 offset, with
    per-step rates clipped at 0.999 so the tail stays finite.
    """
    if T_train < 10:
        raise ValueError(f"T_train must be >= 10, got {T_train}")
    if kind == "linear-beta":
        betas = np.linspace(1e-4, 2e-2, T_train, dtype=np.float64)
        betas = np.clip(betas * (1000.0 / T_train), 0.0, 0.999)
        alpha = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "cosine":
        s = 0.008
        t = np.arange(T_train + 1, dtype=np.float64)
        f = np.cos((t / T_train + s) / (1 + s) * np.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 0.0, 0.999)
        alpha = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; use linear-beta or cosine")
    return NoiseSchedule(T_train=T_train, alpha=alpha, kind=kind)


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray,
              schedule: NoiseSchedule) -> np.ndarray:
    """Noised sample sqrt(alpha_t) * x0 + sqrt(1 - alpha_t) * eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"add_noise: x0 shape {x0.shape} != eps shape {eps.shape}")
    if not (0 <= t <= schedule.T_train):
        raise ValueError(f"add_noise: t={t} outside [0, {schedule.T_train}]")
    a = schedule.sqrt_alpha[t]
    b = schedule.sqrt_one_minus_alpha[t]
    return (a * x0 + b * eps).astype(x0.dtype, copy=False)


def invert_noise(x_t: np.ndarray, t: int, eps: np.ndarray,
                 schedule: NoiseSchedule) -> np.ndarray:
    """Exact inversion of add_noise given the true noise."""
    a = schedule.sqrt_alpha[t]
    b = schedule.sqrt_one_minus_alpha[t]
    return ((x_t - b * eps) / a).astype(x_t.dtype, copy=False)
