"""Benchmark runner: sample scenes, segment with the oracle, score mIoU.

Shared by the eval/ablate CLI commands and the acceptance suite. Scene
construction and per-scene sampler seeds are derived deterministically from
the benchmark seed, so every method/config in a comparison sees the
identical scene and seed set. Scenes parallelize across processes when
ZESTDIFF_THREADS (or the threads argument) allows.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .attention_probe import SegmentSpec
from .guidance import GuidanceConfig
from .imageio import from_uint8
from .sampler import SamplerConfig, sample
from .shapes import (OBJECT_ANCHORS, classify_shape, generate_scene, miou,
                     oracle_segment, scene_seed)
from .text import PromptSpec

METHODS = ("none", "pww", "zest", "zest+pww")

_DETECT_MIN_AREA = 26  # 2.5% of 32*32


def method_config(method: str, pww_weight: float, base: GuidanceConfig | None = None
                  ) -> GuidanceConfig:
    """Guidance config for a benchmark method name."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    d = (base or GuidanceConfig()).to_dict()
    if method == "none":
        d["eta"] = 0.0
        d["pww_weight"] = 0.0
    elif method == "pww":
        d["eta"] = 0.0
        d["pww_weight"] = pww_weight
    elif method == "zest":
        d["pww_weight"] = 0.0
    else:
        d["pww_weight"] = pww_weight
    return GuidanceConfig.from_dict(d)


def bench_scene(seed: int, index: int):
    """The index-th benchmark scene for a benchmark seed (K cycles 1,2,3)."""
    k = index % 3 + 1
    return generate_scene(scene_seed(seed, index), k)


def sampler_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 1]).generate_state(1)[0])


def detect_objects(image_float: np.ndarray) -> set:
    """Oracle-detected (color, shape) pairs in a [-1,1] image."""
    seg = oracle_segment(image_float)
    found = set()
    for color in OBJECT_ANCHORS:
        mask = seg[color]
        if mask.sum() >= _DETECT_MIN_AREA:
            found.add((color, classify_shape(mask)))
    return found


@dataclass
class SceneResult:
    index: int
    miou: float
    caption_ok: bool
    wall: float


@dataclass
class EvalResult:
    n: int
    miou_mean: float
    miou_stderr: float
    caption_token_accuracy: float
    time_per_sample: float
    per_scene: list = field(default_factory=list)

    def metrics(self) -> dict:
        return {
            "miou_mean": self.miou_mean,
            "miou_stderr": self.miou_stderr,
            "caption_token_accuracy": self.caption_token_accuracy,
            "time_per_sample": self.time_per_sample,
        }


def evaluate_scene(model, schedule, scene, samp_seed: int, gcfg: GuidanceConfig,
                   steps: int = 50, use_segments: bool = True) -> SceneResult:
    prompt = PromptSpec(scene.tokens)
    segments = SegmentSpec.from_scene(scene) if use_segments else None
    scfg = SamplerConfig(steps=steps, seed=samp_seed)
    img, trace = sample(model, schedule, prompt, segments, gcfg, scfg)
    fimg = from_uint8(img)
    seg = oracle_segment(fimg)
    gt = {color: mask for (color, _s), mask in zip(scene.objects, scene.masks)}
    pred = {color: seg[color] for color in gt}
    score = miou(pred, gt)
    expected = set(scene.objects)
    caption_ok = detect_objects(fimg) == expected
    return SceneResult(index=-1, miou=score, caption_ok=caption_ok,
                       wall=trace.total_wall)


_WORKER = {}


def _worker_init(ckpt_path):
    from .training import load_checkpoint
    ckpt = load_checkpoint(ckpt_path)
    _WORKER["model"] = ckpt.build_model()
    _WORKER["schedule"] = ckpt.schedule


def _worker_run(args):
    seed, index, gcfg_dict, steps, use_segments = args
    scene = bench_scene(seed, index)
    res = evaluate_scene(_WORKER["model"], _WORKER["schedule"], scene,
                         sampler_seed(seed, index),
                         GuidanceConfig.from_dict(gcfg_dict), steps,
                         use_segments)
    res.index = index
    return res


def resolve_threads(threads: int | None = None) -> int:
    env = os.environ.get("ZESTDIFF_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    if threads is None:
        return max(1, cap)
    return max(1, min(threads, cap))


def run_benchmark(n: int, seed: int, gcfg: GuidanceConfig, *,
                  model=None, schedule=None, ckpt_path=None, steps: int = 50,
                  use_segments: bool = True, threads: int | None = None,
                  progress=None) -> EvalResult:
    """Evaluate a guidance config over the standard benchmark scene set."""
    threads = resolve_threads(threads)
    results = []
    if threads > 1 and ckpt_path is not None:
        import multiprocessing as mp
        ctx = mp.get_context("spawn")
        jobs = [(seed, i, gcfg.to_dict(), steps, use_segments) for i in range(n)]
        with ctx.Pool(threads, initializer=_worker_init,
                      initargs=(ckpt_path,)) as pool:
            for res in pool.imap_unordered(_worker_run, jobs):
                results.append(res)
                if progress and len(results) % progress == 0:
                    print(f"  scene {len(results)}/{n}", flush=True)
    else:
        if model is None or schedule is None:
            if ckpt_path is None:
                raise ValueError("run_benchmark needs a model or a ckpt_path")
            from .training import load_checkpoint
            ckpt = load_checkpoint(ckpt_path)
            model, schedule = ckpt.build_model(), ckpt.schedule
        for i in range(n):
            scene = bench_scene(seed, i)
            res = evaluate_scene(model, schedule, scene, sampler_seed(seed, i),
                                 gcfg, steps, use_segments)
            res.index = i
            results.append(res)
            if progress and (i + 1) % progress == 0:
                print(f"  scene {i + 1}/{n}", flush=True)
    results.sort(key=lambda r: r.index)
    mious = np.array([r.miou for r in results])
    stderr = float(mious.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EvalResult(
        n=n,
        miou_mean=float(mious.mean()),
        miou_stderr=stderr,
        caption_token_accuracy=float(np.mean([r.caption_ok for r in results])),
        time_per_sample=float(np.mean([r.wall for r in results])),
        per_scene=results)


# -- pixel-statistics divergence (informational FID stand-in) -----------------


def pixel_moments(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of flattened [-1,1] images (n, 3, H, W)."""
    flat = images.reshape(images.shape[0], -1).astype(np.float64)
    mu = flat.mean(axis=0)
    cov = np.cov(flat, rowvar=False)
    return mu, cov


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Frechet distance between two Gaussians (squared form)."""
    diff = float(((mu1 - mu2) ** 2).sum())
    w1, v1 = np.linalg.eigh(cov1)
    w1 = np.clip(w1, 0, None)
    s1h = (v1 * np.sqrt(w1)) @ v1.T
    mid = s1h @ cov2 @ s1h
    w = np.linalg.eigvalsh(mid)
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    return diff + float(np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
