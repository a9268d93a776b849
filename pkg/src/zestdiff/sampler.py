"""Deterministic DDIM sampling with classifier-free guidance and the
segmentation-guidance hooks.

Each step runs the conditional and unconditional passes, extrapolates the
noise estimates, takes the DDIM step, and, during the gated fraction of
steps, descends the image against the gradient of the segmentation loss
computed from the conditional pass's attention maps.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .attention_probe import SegmentSpec, segment_estimates
from .guidance import (GuidanceConfig, build_attn_bias, guided_update,
                       zest_loss)
from .imageio import to_uint8
from .schedule import NoiseSchedule
from .tensor import ShapeError, Tensor
from .text import PromptSpec
from .unet import Denoiser


@dataclass
class SamplerConfig:
    steps: int = 50
    seed: int = 0
    t_sequence: list | None = None   # optional explicit increasing timesteps
    keep_x_snapshots: bool = False

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError(f"steps must be >= 2, got {self.steps}")
        if self.t_sequence is not None:
            ts = list(self.t_sequence)
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("t_sequence must be strictly increasing")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "seed": self.seed,
                "t_sequence": self.t_sequence,
                "keep_x_snapshots": self.keep_x_snapshots}


@dataclass
class StepTrace:
    t: int
    guided: bool
    loss: float | None
    estimates: np.ndarray | None      # (K, H, W) or None
    wall: float
    x_snapshot: np.ndarray | None = None


@dataclass
class SampleTrace:
    steps: list = field(default_factory=list)
    image: np.ndarray | None = None
    n_cond_forwards: int = 0
    n_uncond_forwards: int = 0
    n_backwards: int = 0
    total_wall: float = 0.0


def make_timesteps(T_train: int, steps: int) -> np.ndarray:
    """Strictly increasing timestep subsequence with uniform stride,
    starting at 1 and ending at T_train."""
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    if steps > T_train:
        raise ValueError(f"steps {steps} exceeds T_train {T_train}")
    ts = np.unique(np.round(np.linspace(1, T_train, steps)).astype(np.int64))
    if len(ts) != steps:
        raise ValueError(f"could not place {steps} distinct timesteps in "
                         f"[1, {T_train}]")
    return ts


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic update: predict the clean image, re-noise to t_prev."""
    if t <= t_prev or t_prev < 0:
        raise ValueError(f"ddim_step: need t > t_prev >= 0, got {t}, {t_prev}")
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"ddim_step: x shape {x_t.shape} != eps shape "
                         f"{eps_hat.shape}")
    a_t = schedule.sqrt_alpha[t]
    b_t = schedule.sqrt_one_minus_alpha[t]
    a_p = schedule.sqrt_alpha[t_prev]
    b_p = schedule.sqrt_one_minus_alpha[t_prev]
    x0_pred = (x_t - b_t * eps_hat) / a_t
    return (a_p * x0_pred + b_p * eps_hat).astype(x_t.dtype, copy=False)


def cfg_noise(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    """Classifier-free extrapolation eps_u + s * (eps_c - eps_u)."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"cfg_noise: shapes differ, {eps_cond.shape} vs "
                         f"{eps_uncond.shape}")
    return eps_uncond + s * (eps_cond - eps_uncond)


def n_guided_steps(gcfg: GuidanceConfig, steps: int, segments) -> int:
    if segments is None or gcfg.eta == 0.0:
        return 0
    return math.ceil(gcfg.tau * steps)


def sample(model: Denoiser, schedule: NoiseSchedule, prompt: PromptSpec,
           segments: SegmentSpec | None, gcfg: GuidanceConfig,
           scfg: SamplerConfig, trace: bool = False
           ) -> tuple[np.ndarray, SampleTrace]:
    """Generate one image; returns (HxWx3 uint8, SampleTrace).

    With segments present, attention-bias is applied whenever pww_weight > 0
    and the gradient update runs for the first ceil(tau * steps) steps.
    Identical inputs and seed give bitwise-identical images.
    """
    if segments is not None:
        if segments.max_token_index() >= len(prompt.tokens):
            raise ValueError(
                f"segment token index {segments.max_token_index()} outside "
                f"prompt of {len(prompt.tokens)} tokens")
    ts = (np.asarray(scfg.t_sequence, dtype=np.int64) if scfg.t_sequence
          else make_timesteps(schedule.T_train, scfg.steps))
    steps = len(ts)
    gate = n_guided_steps(gcfg, steps, segments)
    pww_on = segments is not None and gcfg.pww_weight > 0.0
    attn_res = sorted({a.resolution for a in
                       (model.enc_attn + list(model.dec_attn.values()))
                       if a is not None})

    rng = np.random.Generator(np.random.PCG64(scfg.seed))
    shape = (1, model.cfg.img_channels, model.cfg.img_size, model.cfg.img_size)
    x = rng.standard_normal(shape, dtype=np.float32).astype(model.dtype)

    out = SampleTrace()
    t_start = time.perf_counter()
    order = list(ts[::-1]) + [0]
    from .text import MAX_TOKENS
    for i in range(steps):
        t, t_prev = int(order[i]), int(order[i + 1])
        step_start = time.perf_counter()
        guided_now = i < gate
        capture_now = guided_now or (trace and segments is not None)
        bias = (build_attn_bias(segments, gcfg.pww_weight, t, schedule,
                                attn_res, MAX_TOKENS) if pww_on else None)

        loss_val = None
        est_arrays = None
        grad = None
        if guided_now:
            x_in = Tensor(x.copy(), requires_grad=True)
            eps_c, records = model.predict_noise(x_in, t, prompt, capture=True,
                                                 attn_bias=bias)
            est = segment_estimates(records, segments, gcfg.averaging,
                                    gcfg.layer_filter)
            loss, _report = zest_loss(est, segments, gcfg.loss_mode)
            loss_val = loss.item()
            tz.backward(loss)
            grad = x_in.grad
            out.n_backwards += 1
            est_arrays = est.arrays()
        else:
            with tz.no_grad():
                eps_c, records = model.predict_noise(
                    Tensor(x), t, prompt, capture=capture_now, attn_bias=bias)
                if capture_now:
                    est = segment_estimates(records, segments, gcfg.averaging,
                                            gcfg.layer_filter)
                    _, report = zest_loss(est, segments, gcfg.loss_mode)
                    loss_val = report.total
                    est_arrays = est.arrays()
        out.n_cond_forwards += 1
        with tz.no_grad():
            eps_u, _ = model.predict_noise(Tensor(x), t, None, capture=False)
        out.n_uncond_forwards += 1

        eps = cfg_noise(eps_c.data, eps_u.data, gcfg.cfg_scale)
        x_prev = ddim_step(x, eps, t, t_prev, schedule)
        if guided_now:
            x_prev = guided_update(x_prev, grad, t, gcfg, schedule)
        x = x_prev

        out.steps.append(StepTrace(
            t=t, guided=guided_now, loss=loss_val, estimates=est_arrays,
            wall=time.perf_counter() - step_start,
            x_snapshot=x.copy() if scfg.keep_x_snapshots else None))

    out.total_wall = time.perf_counter() - t_start
    image = to_uint8(x[0])
    out.image = image
    return image, out
