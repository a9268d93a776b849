"""Segmentation guidance: the loss, the gated gradient update, and the
attention-bias baseline.

The loss compares attention-derived segment estimates to the conditioning
masks with per-segment binary cross-entropy, optionally adding the same BCE
on max-normalized estimates ("combined", the default). The update walks
x_{t-1} against the normalized gradient, scaled by eta and a step weight
that decays from one (pure noise) to zero (clean image).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .attention_probe import Estimates, SegmentSpec
from .schedule import NoiseSchedule
from .tensor import NumericalError, ShapeError, Tensor

NORM_MODES = ("none", "L1", "L2", "Linf")
LOSS_MODES = ("bce", "combined")
LAMBDA_MODES = ("sqrt-one-minus-alpha", "linear")


@dataclass
class GuidanceConfig:
    eta: float = 1.0
    tau: float = 0.5
    norm_mode: str = "Linf"
    loss_mode: str = "combined"
    layer_filter: str = "res-both"
    averaging: str = "global"
    pww_weight: float = 0.0
    cfg_scale: float = 3.0
    lambda_mode: str = "sqrt-one-minus-alpha"

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError(f"tau must be in [0,1], got {self.tau}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode {self.norm_mode!r} not in {NORM_MODES}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode {self.loss_mode!r} not in {LOSS_MODES}")
        if self.pww_weight < 0:
            raise ValueError(f"pww_weight must be >= 0, got {self.pww_weight}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValueError(f"lambda_mode {self.lambda_mode!r} not in {LAMBDA_MODES}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "eta", "tau", "norm_mode", "loss_mode", "layer_filter", "averaging",
            "pww_weight", "cfg_scale", "lambda_mode")}

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        return cls(**d)


@dataclass
class LossReport:
    total: float
    bce: list = field(default_factory=list)       # per-segment plain BCE
    norm_bce: list = field(default_factory=list)  # per-segment normalized BCE


def zest_loss(estimates, segments: SegmentSpec, loss_mode: str = "combined"
              ) -> tuple[Tensor, LossReport]:
    """Guidance loss over segment estimates.

    'combined' sums, per segment, the pixel-mean BCE of the estimate against
    its mask and the BCE of the max-normalized estimate; 'bce' keeps only
    the first term. Grouped estimates (per-layer / per-head averaging)
    contribute the mean of their per-group losses.
    """
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"loss_mode {loss_mode!r} not in {LOSS_MODES}")
    groups = estimates.groups if isinstance(estimates, Estimates) else estimates
    if not groups:
        raise ValueError("zest_loss: no estimate groups")
    first = groups[0].maps
    if first.shape[0] != segments.K:
        raise ShapeError(f"zest_loss: {first.shape[0]} estimates vs "
                         f"{segments.K} segments")
    res = first.shape[1]
    masks = segments.masks if segments.masks.shape[1] == res \
        else segments.masks_at(res)
    if masks.shape[1:] != first.shape[1:]:
        raise ShapeError(f"zest_loss: estimate resolution {first.shape[1:]} "
                         f"!= mask resolution {masks.shape[1:]}")
    target = Tensor(masks.astype(first.dtype))

    bce_acc = np.zeros(segments.K, dtype=np.float64)
    nrm_acc = np.zeros(segments.K, dtype=np.float64)
    total = None
    for g in groups:
        est = g.maps
        bce_seg = tz.mean(tz.bce(est, target), axis=(1, 2))
        g_total = tz.tsum(bce_seg)
        bce_acc += bce_seg.data
        if loss_mode == "combined":
            peak = tz.clamp(tz.amax(est, axis=(1, 2), keepdims=True), 1e-6, np.inf)
            nrm_seg = tz.mean(tz.bce(tz.div(est, peak), target), axis=(1, 2))
            g_total = tz.add(g_total, tz.tsum(nrm_seg))
            nrm_acc += nrm_seg.data
        total = g_total if total is None else tz.add(total, g_total)
    total = tz.mul(total, 1.0 / len(groups))
    report = LossReport(total=total.item(),
                        bce=list(bce_acc / len(groups)),
                        norm_bce=list(nrm_acc / len(groups)))
    return total, report


def lambda_schedule(t: int, schedule: NoiseSchedule,
                    mode: str = "sqrt-one-minus-alpha") -> float:
    """Step-weight in [0,1]: 0 at t=0, ~1 at t=T, monotone in t."""
    if not (0 <= t <= schedule.T_train):
        raise ValueError(f"t={t} outside schedule range [0, {schedule.T_train}]")
    if mode == "sqrt-one-minus-alpha":
        return float(schedule.sqrt_one_minus_alpha[t])
    if mode == "linear":
        return t / schedule.T_train
    raise ValueError(f"unknown lambda mode {mode!r}")


def normalize_grad(g: np.ndarray, mode: str = "Linf") -> np.ndarray:
    """Rescale a gradient by norm mode; the L1/L2 modes include a numel
    factor so a constant-magnitude gradient steps equally under all three."""
    if mode not in NORM_MODES:
        raise ValueError(f"norm mode {mode!r} not in {NORM_MODES}")
    g = np.asarray(g)
    if not np.isfinite(g).all():
        raise NumericalError("normalize_grad: gradient has non-finite entries")
    if mode == "none":
        return g
    if mode == "L1":
        n = np.abs(g).sum()
        return g if n < 1e-12 else g * (g.size / n)
    if mode == "L2":
        n = np.sqrt((g.astype(np.float64) ** 2).sum())
        return g if n < 1e-12 else g * (np.sqrt(g.size) / n)
    n = np.abs(g).max()
    return g if n < 1e-12 else g / n


def guided_update(x_prev: np.ndarray, grad: np.ndarray, t: int,
                  gcfg: GuidanceConfig, schedule: NoiseSchedule) -> np.ndarray:
    """Descent step on the denoised iterate along the normalized gradient."""
    x_prev = np.asarray(x_prev)
    grad = np.asarray(grad)
    if x_prev.shape != grad.shape:
        raise ShapeError(f"guided_update: x shape {x_prev.shape} != grad "
                         f"shape {grad.shape}")
    lam = lambda_schedule(t, schedule, gcfg.lambda_mode)
    step = gcfg.eta * lam
    if step == 0.0:
        return x_prev.copy()
    return (x_prev - step * normalize_grad(grad, gcfg.norm_mode)).astype(
        x_prev.dtype, copy=False)


# -- attention-bias baseline -----------------------------------------------------


def pww_mask(segments: SegmentSpec, resolution: int, n_tokens: int) -> np.ndarray:
    """(HW, N) indicator: 1 where pixel p is in segment i and token j in T_i."""
    masks = segments.masks_at(resolution)
    m = np.zeros((resolution * resolution, n_tokens), dtype=np.float32)
    for i, ts in enumerate(segments.token_sets):
        flat = masks[i].reshape(-1)
        for j in ts:
            if not (0 <= j < n_tokens):
                raise ValueError(f"token index {j} out of range (N={n_tokens})")
            m[:, j] = np.maximum(m[:, j], flat)
    return m


def pww_bias(logits, segments: SegmentSpec, weight: float, t: int,
             schedule: NoiseSchedule):
    """Additive pre-softmax bias on (masked pixel, segment token) pairs.

    Adds weight * lambda(t) to the logits wherever the pixel lies inside a
    segment and the token annotates it. With weight 0 the logits pass
    through unchanged.
    """
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    hw, n = arr.shape[-2], arr.shape[-1]
    res = int(round(hw ** 0.5))
    if res * res != hw:
        raise ShapeError(f"pww_bias: {hw} pixels is not a square map")
    if weight == 0.0:
        return logits
    bias = weight * lambda_schedule(t, schedule) * pww_mask(segments, res, n)
    if isinstance(logits, Tensor):
        return tz.add(logits, Tensor(bias.astype(logits.dtype)))
    return arr + bias


def build_attn_bias(segments: SegmentSpec, weight: float, t: int,
                    schedule: NoiseSchedule, resolutions, n_tokens: int) -> dict:
    """Per-resolution additive bias maps for the denoiser's attention hook."""
    if weight == 0.0:
        return {}
    lam = lambda_schedule(t, schedule)
    return {res: (weight * lam * pww_mask(segments, res, n_tokens)).astype(np.float32)
            for res in resolutions}
