"""Noise-prediction training with decoupled weight decay, plus checkpoints."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .ntc import read_ntc, write_ntc
from .schedule import NoiseSchedule, make_schedule
from .shapes import ShapesDataset
from .tensor import Tensor
from .text import NULL_ID, PAD_ID, VOCAB
from .unet import Denoiser, DenoiserConfig


@dataclass
class TrainConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule_kind: str = "linear-beta"
    T_train: int = 1000
    steps: int = 4500
    batch: int = 16
    lr: float = 1e-3
    lr_final: float = 1e-4
    warmup: int = 100
    weight_decay: float = 1e-4
    cond_drop: float = 0.1
    val_every: int = 250
    val_size: int = 64
    grad_clip: float = 1.0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "schedule_kind", "T_train", "steps", "batch", "lr", "lr_final",
            "warmup", "weight_decay", "cond_drop", "val_every", "val_size",
            "grad_clip")}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = DenoiserConfig.from_dict(d.pop("model", {}))
        return cls(model=model, **d)


@dataclass
class Checkpoint:
    params: dict
    cfg: DenoiserConfig
    schedule: NoiseSchedule
    vocab: list
    meta: dict
    opt_state: dict | None = None

    def build_model(self, requires_grad: bool = False) -> Denoiser:
        model = Denoiser(self.cfg, seed=0, params=self.params)
        model.set_requires_grad(requires_grad)
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    arrays["schedule/alpha"] = ckpt.schedule.alpha
    if ckpt.opt_state:
        for k, v in ckpt.opt_state["m"].items():
            arrays[f"opt/m/{k}"] = v
        for k, v in ckpt.opt_state["v"].items():
            arrays[f"opt/v/{k}"] = v
    meta = dict(ckpt.meta)
    meta["config"] = ckpt.cfg.to_dict()
    meta["vocab"] = list(ckpt.vocab)
    meta["schedule_kind"] = ckpt.schedule.kind
    meta["T_train"] = ckpt.schedule.T_train
    if ckpt.opt_state:
        meta["opt_step"] = ckpt.opt_state["step"]
    write_ntc(path, arrays, meta=meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_ntc(path)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    cfg = DenoiserConfig.from_dict(meta["config"])
    schedule = NoiseSchedule(T_train=meta["T_train"], alpha=arrays["schedule/alpha"],
                             kind=meta.get("schedule_kind", "linear-beta"))
    if meta.get("vocab") != VOCAB:
        raise ValueError("checkpoint vocabulary does not match this build")
    opt_state = None
    m = {k[len("opt/m/"):]: v for k, v in arrays.items() if k.startswith("opt/m/")}
    if m:
        v = {k[len("opt/v/"):]: v_ for k, v_ in arrays.items() if k.startswith("opt/v/")}
        opt_state = {"m": m, "v": v, "step": meta.get("opt_step", 0)}
    clean_meta = {k: v for k, v in meta.items()
                  if k not in ("config", "vocab", "schedule_kind", "T_train", "opt_step")}
    return Checkpoint(params=params, cfg=cfg, schedule=schedule, vocab=VOCAB,
                      meta=clean_meta, opt_state=opt_state)


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class AdamW:
    def __init__(self, params: dict, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, state: dict | None = None):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        if state is None:
            self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
            self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
            self.step_count = 0
        else:
            self.m = {k: v.astype(params[k].data.dtype) for k, v in state["m"].items()}
            self.v = {k: v.astype(params[k].data.dtype) for k, v in state["v"].items()}
            self.step_count = state["step"]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bc1 = 1.0 - self.b1 ** self.step_count
        bc2 = 1.0 - self.b2 ** self.step_count
        for k, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.wd:
                upd = upd + self.wd * t.data
            t.data = t.data - lr * upd
            t.grad = None

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "step": self.step_count}


def _lr_at(step: int, cfg: TrainConfig) -> float:
    """LR at a global step: linear warmup then cosine decay over cfg.steps."""
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(cfg.steps - cfg.warmup, 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))


def _mse_loss(model: Denoiser, x_t, t_arr, ids, eps_true) -> Tensor:
    ctx = model.encode_tokens(ids)
    eps_hat = model.forward(Tensor(x_t), t_arr, ctx)
    d = tz.sub(eps_hat, Tensor(eps_true))
    return tz.mean(tz.mul(d, d))


def _val_loss(model: Denoiser, sched, images, rows, rng_seed: int) -> float:
    """Noise-prediction loss on a fixed validation batch (fixed noise draws)."""
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    n = images.shape[0]
    t_arr = rng.integers(1, sched.T_train + 1, size=n)
    eps = rng.standard_normal(images.shape).astype(images.dtype)
    a = sched.sqrt_alpha[t_arr].astype(images.dtype)[:, None, None, None]
    b = sched.sqrt_one_minus_alpha[t_arr].astype(images.dtype)[:, None, None, None]
    x_t = a * images + b * eps
    with tz.no_grad():
        loss = _mse_loss(model, x_t, t_arr, rows, eps)
    return loss.item()


def train(dataset: ShapesDataset, cfg: TrainConfig, seed: int,
          log_path=None, resume: Checkpoint | None = None,
          progress=None) -> Checkpoint:
    """Train the noise estimator up to cfg.steps global steps.

    Conditioning is dropped (null tokens) with probability cond_drop per
    sample. Divergence aborts and returns the last good snapshot (flagged
    in meta["aborted"]). cfg.steps counts total steps, so resuming from a
    checkpoint continues the exact same RNG stream and LR curve. The same
    seed reproduces the identical loss curve.
    """
    if len(dataset) == 0 or len(dataset.train_idx) == 0:
        raise ValueError("train: dataset is empty")
    sched = make_schedule(cfg.T_train, cfg.schedule_kind)
    model = Denoiser(cfg.model, seed=seed)
    opt_state = None
    start_step = 0
    if resume is not None:
        model.load_params(resume.params)
        opt_state = resume.opt_state
        start_step = resume.meta.get("steps", 0)
    model.set_requires_grad(True)
    opt = AdamW(model.params, cfg.lr, cfg.weight_decay, state=opt_state)

    images = dataset.images.astype(np.float32)
    rows = dataset.token_rows
    train_idx = dataset.train_idx
    val_idx = dataset.val_idx if len(dataset.val_idx) else dataset.train_idx
    val_sel = val_idx[:cfg.val_size]
    null_row = np.full(rows.shape[1], PAD_ID, dtype=np.int64)
    null_row[:] = NULL_ID

    rng = np.random.Generator(np.random.PCG64(seed))
    # burn resume steps so a resumed run continues the same stream
    for _ in range(start_step):
        rng.integers(0, 1 << 30, size=4)

    baseline_val = _val_loss(model, sched, images[val_sel], rows[val_sel], seed + 1)
    if resume is None:
        baseline_store = baseline_val
    else:
        baseline_store = resume.meta.get("baseline_val_loss", baseline_val)

    log_rows = []
    snapshot = (model.param_arrays(), {"m": {k: v.copy() for k, v in opt.m.items()},
                                       "v": {k: v.copy() for k, v in opt.v.items()},
                                       "step": opt.step_count}, start_step)
    last_loss = float("nan")
    aborted = False
    for step in range(start_step, cfg.steps):
        seeds = rng.integers(0, 1 << 30, size=4)
        srng = np.random.Generator(np.random.PCG64(int(seeds[0])))
        idx = srng.choice(train_idx, size=cfg.batch, replace=True)
        t_arr = srng.integers(1, cfg.T_train + 1, size=cfg.batch)
        eps = srng.standard_normal((cfg.batch,) + images.shape[1:]).astype(np.float32)
        drop = srng.random(cfg.batch) < cfg.cond_drop
        ids = rows[idx].copy()
        ids[drop] = null_row
        a = sched.sqrt_alpha[t_arr].astype(np.float32)[:, None, None, None]
        b = sched.sqrt_one_minus_alpha[t_arr].astype(np.float32)[:, None, None, None]
        x_t = a * images[idx] + b * eps

        loss = _mse_loss(model, x_t, t_arr, ids, eps)
        last_loss = loss.item()
        if not math.isfinite(last_loss):
            aborted = True
            break
        tz.backward(loss)
        if cfg.grad_clip:
            norm = math.sqrt(sum(float((t.grad ** 2).sum())
                                 for t in model.params.values() if t.grad is not None))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                for t in model.params.values():
                    if t.grad is not None:
                        t.grad *= scale
        lr = _lr_at(step, cfg)
        opt.step(lr)
        log_rows.append((step, last_loss, lr))
        if progress and (step + 1) % progress == 0:
            val = _val_loss(model, sched, images[val_sel], rows[val_sel], seed + 1)
            print(f"step {step + 1} loss {last_loss:.4f} val {val:.4f} lr {lr:.2e}",
                  flush=True)
        if (step + 1) % cfg.val_every == 0:
            snapshot = (model.param_arrays(),
                        {"m": {k: v.copy() for k, v in opt.m.items()},
                         "v": {k: v.copy() for k, v in opt.v.items()},
                         "step": opt.step_count}, step + 1)

    if aborted:
        params, opt_snap, done_steps = snapshot
    else:
        params = model.param_arrays()
        opt_snap = opt.state()
        done_steps = max(cfg.steps, start_step)

    final_model = Denoiser(cfg.model, seed=seed, params=params)
    final_model.set_requires_grad(False)
    val = _val_loss(final_model, sched, images[val_sel], rows[val_sel], seed + 1)
    meta = {
        "steps": done_steps, "seed": seed, "train_loss_last": last_loss,
        "val_loss": val, "baseline_val_loss": baseline_store,
        "aborted": aborted, "train_config": cfg.to_dict(),
    }
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        with open(log_path, mode, newline="") as f:
            w = csv.writer(f)
            if mode == "w":
                w.writerow(["step", "loss", "lr"])
            w.writerows(log_rows)
    return Checkpoint(params=params, cfg=cfg.model, schedule=sched, vocab=VOCAB,
                      meta=meta, opt_state=opt_snap)
