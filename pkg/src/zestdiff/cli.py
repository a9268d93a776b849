"""Command-line surface: train, sample, eval, ablate, probe.

Every command writes a manifest.json next to its outputs recording the
command, config, seed, checkpoint hash, input content hashes, output paths
and headline metrics, so any run can be reproduced from its manifest.
Exit codes: 0 ok, 2 usage/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attention_probe import SegmentSpec, attention_trace
from .evalrun import (METHODS, method_config, run_benchmark, frechet_distance,
                      pixel_moments, resolve_threads)
from .guidance import GuidanceConfig
from .imageio import read_pgm, write_ppm
from .ntc import read_ntc, write_ntc
from .sampler import SamplerConfig, sample
from .shapes import build_dataset, load_dataset, make_scenes
from .tensor import NumericalError
from .text import PromptSpec
from .training import (TrainConfig, checkpoint_hash, load_checkpoint,
                       save_checkpoint, train)


class UsageError(Exception):
    """Input or usage problem; maps to exit code 2."""


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _default_pww_weight() -> float:
    cfg = Path(__file__).parent / "configs" / "pww.json"
    if cfg.exists():
        return float(json.loads(cfg.read_text())["pww_weight"])
    return 1.0


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _manifest(out_dir, command: str, args: dict, seed, ckpt_path=None,
              inputs=None, outputs=None, metrics=None, wall=None) -> None:
    man = {
        "version": __version__,
        "command": command,
        "args": args,
        "seed": seed,
        "checkpoint_sha256": _sha256(ckpt_path) if ckpt_path else None,
        "input_hashes": {str(k): _sha256(v) for k, v in (inputs or {}).items()},
        "outputs": [str(p) for p in (outputs or [])],
        "metrics": metrics or {},
        "wall_time": wall,
    }
    _write_json(Path(out_dir) / "manifest.json", man)


def _load_ckpt(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _guidance_from_args(args) -> GuidanceConfig:
    base = method_config(args.method, _default_pww_weight())
    d = base.to_dict()
    for flag, key in (("eta", "eta"), ("tau", "tau"), ("norm", "norm_mode"),
                      ("loss", "loss_mode"), ("layer_filter", "layer_filter"),
                      ("averaging", "averaging"), ("pww_weight", "pww_weight"),
                      ("cfg_scale", "cfg_scale")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    try:
        return GuidanceConfig.from_dict(d)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_segments(path, prompt: PromptSpec) -> SegmentSpec:
    """Segment-input file: JSON listing PGM masks and token lists or texts."""
    try:
        spec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read segment file {path}: {e}") from None
    words = prompt.words()
    masks, token_sets, texts = [], [], []
    base = Path(path).parent
    for ent in spec.get("segments", []):
        mask_path = base / ent["mask"]
        if not mask_path.exists():
            raise UsageError(f"mask file not found: {mask_path}")
        arr = read_pgm(mask_path)
        if "mask_index" in ent:
            m = (arr == int(ent["mask_index"])).astype(np.float32)
        else:
            m = (arr > 0).astype(np.float32)
        masks.append(m)
        if "tokens" in ent:
            idx = tuple(int(i) for i in ent["tokens"])
        elif "text" in ent:
            seq = ent["text"].split()
            idx = None
            for start in range(len(words) - len(seq) + 1):
                if words[start:start + len(seq)] == seq:
                    idx = tuple(range(start, start + len(seq)))
                    break
            if idx is None:
                raise UsageError(
                    f"segment text {ent['text']!r} not found in prompt")
        else:
            raise UsageError("each segment needs a 'tokens' or 'text' field")
        for i in idx:
            if not (0 <= i < len(prompt.tokens)):
                raise UsageError(f"segment token index {i} outside prompt "
                                 f"of {len(prompt.tokens)} tokens")
        token_sets.append(idx)
        texts.append(ent.get("text", ""))
    if not masks:
        raise UsageError(f"no segments in {path}")
    try:
        return SegmentSpec(masks_full=np.stack(masks), token_sets=token_sets,
                           texts=texts)
    except ValueError as e:
        raise UsageError(str(e)) from None


# -- commands ------------------------------------------------------------------


def cmd_dataset(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    build_dataset(args.n, args.seed, out)
    _manifest(out, "dataset", {"n": args.n}, args.seed,
              outputs=[out / "images.ntc", out / "captions.jsonl"],
              wall=time.time() - t0)
    print(f"dataset of {args.n} scenes written to {out}")
    return 0


def cmd_train(args) -> int:
    t0 = time.time()
    if not Path(args.data).exists():
        raise UsageError(f"dataset not found: {args.data}")
    cfg = TrainConfig()
    inputs = {"dataset": Path(args.data) / "images.ntc"}
    if args.config:
        try:
            cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as e:
            raise UsageError(f"bad training config {args.config}: {e}") from None
        inputs["config"] = args.config
    if args.steps:
        cfg.steps = args.steps
    dataset = load_dataset(args.data)
    resume = _load_ckpt(args.resume) if args.resume else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = args.log or out.with_suffix(".log.csv")
    ckpt = train(dataset, cfg, args.seed, log_path=log_path, resume=resume,
                 progress=args.progress)
    save_checkpoint(ckpt, out)
    metrics = {"val_loss": ckpt.meta["val_loss"],
               "baseline_val_loss": ckpt.meta["baseline_val_loss"],
               "steps": ckpt.meta["steps"]}
    _manifest(out.parent, "train", {"config": cfg.to_dict()}, args.seed,
              ckpt_path=out, inputs=inputs, outputs=[out, log_path],
              metrics=metrics, wall=time.time() - t0)
    if ckpt.meta.get("aborted"):
        print(f"training diverged; last good checkpoint saved to {out}",
              file=sys.stderr)
        return 3
    print(f"checkpoint saved to {out} (val loss {ckpt.meta['val_loss']:.4f}, "
          f"baseline {ckpt.meta['baseline_val_loss']:.4f})")
    return 0


def cmd_sample(args) -> int:
    t0 = time.time()
    ckpt = _load_ckpt(args.ckpt)
    model = ckpt.build_model()
    try:
        prompt = PromptSpec.from_text(args.prompt)
    except ValueError as e:
        raise UsageError(str(e)) from None
    segments = _load_segments(args.segments, prompt) if args.segments else None
    gcfg = _guidance_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    inputs = {}
    if args.segments:
        inputs["segments"] = args.segments
    for k in range(args.count):
        scfg = SamplerConfig(steps=args.steps, seed=args.seed + k)
        try:
            img, trace = sample(model, ckpt.schedule, prompt, segments, gcfg,
                                scfg, trace=args.trace)
        except ValueError as e:
            raise UsageError(str(e)) from None
        if any(s.loss is not None and not np.isfinite(s.loss)
               for s in trace.steps):
            raise NumericalError("sampling produced a non-finite loss")
        img_path = out / f"sample_{args.seed + k:06d}.ppm"
        write_ppm(img_path, img)
        outputs.append(img_path)
        if args.trace:
            trace_path = out / f"trace_{args.seed + k:06d}.ntc"
            if segments is not None:
                attention_trace(trace, trace_path)
                outputs.append(trace_path)
                from .plotting import overlay_strip
                for s in range(segments.K):
                    strip_path = out / f"overlay_{args.seed + k:06d}_seg{s}.ppm"
                    overlay_strip(strip_path,
                                  [st.estimates[s] for st in trace.steps],
                                  segments.masks[s])
                    outputs.append(strip_path)
    _manifest(out, "sample",
              {"prompt": args.prompt, "method": args.method,
               "guidance": gcfg.to_dict(), "steps": args.steps,
               "count": args.count},
              args.seed, ckpt_path=args.ckpt, inputs=inputs, outputs=outputs,
              wall=time.time() - t0)
    print(f"{len(outputs)} file(s) written to {out}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.time()
    if args.n < 10:
        print(f"warning: n={args.n} is small; metrics will be noisy",
              file=sys.stderr)
    ckpt = _load_ckpt(args.ckpt)
    gcfg = _guidance_from_args(args)
    threads = resolve_threads(args.threads)
    kwargs = {"ckpt_path": args.ckpt} if threads > 1 else {}
    if threads == 1:
        kwargs = {"model": ckpt.build_model(), "schedule": ckpt.schedule,
                  "ckpt_path": args.ckpt}
    result = run_benchmark(args.n, args.seed, gcfg, steps=args.steps,
                           use_segments=args.method != "none",
                           threads=threads, progress=args.progress, **kwargs)
    metrics = result.metrics()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pixel_stats:
        metrics["pixel_frechet"] = _pixel_frechet(args, ckpt, gcfg)
    _write_json(out / "metrics.json", metrics)
    _manifest(out, "eval",
              {"method": args.method, "n": args.n, "steps": args.steps,
               "guidance": gcfg.to_dict()},
              args.seed, ckpt_path=args.ckpt, outputs=[out / "metrics.json"],
              metrics=metrics, wall=time.time() - t0)
    print(json.dumps(metrics, sort_keys=True, indent=2))
    return 0


def _pixel_frechet(args, ckpt, gcfg) -> float:
    """Informational pixel-moment divergence against a reference stats file."""
    from .imageio import from_uint8
    arrays, _meta = read_ntc(args.pixel_stats)
    model = ckpt.build_model()
    imgs = []
    for i in range(args.n):
        from .evalrun import bench_scene, sampler_seed
        scene = bench_scene(args.seed, i)
        prompt = PromptSpec(scene.tokens)
        segs = SegmentSpec.from_scene(scene) if args.method != "none" else None
        img, _ = sample(model, ckpt.schedule, prompt, segs, gcfg,
                        SamplerConfig(steps=args.steps,
                                      seed=sampler_seed(args.seed, i)))
        imgs.append(from_uint8(img))
    mu, cov = pixel_moments(np.stack(imgs))
    return frechet_distance(mu, cov, arrays["mu"], arrays["cov"])


_ABLATION_GRIDS = {
    "tau": [0.1, 0.25, 0.5, 1.0],
    "norm_mode": ["none", "L1", "L2", "Linf"],
    "layer_filter": ["all", "encoder-only", "decoder-only", "res-high-only",
                     "res-low-only", "res-both"],
    "averaging": ["per-head", "per-layer", "global"],
    "loss_mode": ["bce", "combined"],
    "method": list(METHODS),
}


def _ablation_base() -> GuidanceConfig:
    """Gradient guidance isolated: plain BCE loss, no attention bias."""
    return GuidanceConfig(eta=1.0, tau=0.5, norm_mode="Linf", loss_mode="bce",
                          layer_filter="res-both", averaging="global",
                          pww_weight=0.0)


def ablation_config(axis: str, value) -> tuple[GuidanceConfig, bool]:
    """(guidance config, use_segments) for one grid point."""
    base = _ablation_base()
    if axis == "method":
        return (method_config(str(value), _default_pww_weight()),
                value != "none")
    d = base.to_dict()
    d[axis] = value
    return GuidanceConfig.from_dict(d), True


def cmd_ablate(args) -> int:
    t0 = time.time()
    if args.axis not in _ABLATION_GRIDS:
        raise UsageError(f"unknown axis {args.axis!r}; valid axes: "
                         f"{sorted(_ABLATION_GRIDS)}")
    if args.values:
        raw = args.values.split(",")
        values = [float(v) if args.axis == "tau" else v.strip() for v in raw]
    else:
        values = _ABLATION_GRIDS[args.axis]
    ckpt = _load_ckpt(args.ckpt)
    threads = resolve_threads(args.threads)
    model = ckpt.build_model() if threads == 1 else None
    entries = []
    for v in values:
        try:
            gcfg, use_segments = ablation_config(args.axis, v)
        except ValueError as e:
            raise UsageError(str(e)) from None
        tv = time.time()
        result = run_benchmark(
            args.n, args.seed, gcfg, steps=args.steps, threads=threads,
            use_segments=use_segments, model=model, schedule=ckpt.schedule,
            ckpt_path=args.ckpt, progress=args.progress)
        entries.append({"value": v, "miou_mean": result.miou_mean,
                        "miou_stderr": result.miou_stderr,
                        "caption_token_accuracy": result.caption_token_accuracy,
                        "wall_time": time.time() - tv})
        print(f"{args.axis}={v}: mIoU {result.miou_mean:.4f} "
              f"+- {result.miou_stderr:.4f}")
    report = {"axis": args.axis, "n": args.n, "seed": args.seed,
              "entries": entries}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablation.json", report)
    from .plotting import bar_chart
    plot_path = out / "ablation.ppm"
    bar_chart(plot_path, [str(e["value"]) for e in entries],
              [e["miou_mean"] for e in entries],
              [e["miou_stderr"] for e in entries])
    _manifest(out, "ablate", {"axis": args.axis, "values": values,
                              "n": args.n, "steps": args.steps},
              args.seed, ckpt_path=args.ckpt,
              outputs=[out / "ablation.json", plot_path],
              metrics={e["value"]: e["miou_mean"] for e in entries},
              wall=time.time() - t0)
    return 0


def cmd_probe(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    if args.build_stats:
        scenes = make_scenes(args.n, args.seed)
        mu, cov = pixel_moments(np.stack([s.image for s in scenes]))
        out.parent.mkdir(parents=True, exist_ok=True)
        write_ntc(out, {"mu": mu, "cov": cov},
                  meta={"n": args.n, "seed": args.seed})
        print(f"pixel statistics of {args.n} scenes written to {out}")
        return 0
    if not args.trace_file:
        raise UsageError("probe needs --trace-file or --build-stats")
    try:
        arrays, meta = read_ntc(args.trace_file)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read trace {args.trace_file}: {e}") from None
    out.mkdir(parents=True, exist_ok=True)
    from .plotting import line_plot, overlay_strip
    losses = arrays["losses"]
    line_plot(out / "loss_curve.ppm",
              [v for v in losses if np.isfinite(v)])
    n_steps = int(meta["n_steps"])
    n_segs = int(meta["n_segments"])
    outputs = [out / "loss_curve.ppm"]
    for k in range(n_segs):
        ests = [arrays[f"step{i:03d}/seg{k}"] for i in range(n_steps)]
        ref = ests[-1]
        p = out / f"trace_seg{k}.ppm"
        overlay_strip(p, ests, (ref >= 0.5 * max(ref.max(), 1e-9)).astype(float))
        outputs.append(p)
    _manifest(out, "probe", {"trace_file": args.trace_file}, None,
              inputs={"trace": args.trace_file}, outputs=outputs,
              wall=time.time() - t0)
    print(f"{len(outputs)} plot(s) written to {out}")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="zestdiff",
        description="Desk-scale guided diffusion on the shapes benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="generate a shapes dataset")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_dataset)

    t = sub.add_parser("train", help="train the denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--log", default=None)
    t.add_argument("--progress", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    def add_guidance_flags(sp):
        sp.add_argument("--method", choices=METHODS, default="zest+pww")
        sp.add_argument("--eta", type=float, default=None)
        sp.add_argument("--tau", type=float, default=None)
        sp.add_argument("--norm", default=None)
        sp.add_argument("--loss", default=None)
        sp.add_argument("--layer-filter", dest="layer_filter", default=None)
        sp.add_argument("--averaging", default=None)
        sp.add_argument("--pww-weight", dest="pww_weight", type=float,
                        default=None)
        sp.add_argument("--cfg-scale", dest="cfg_scale", type=float,
                        default=None)
        sp.add_argument("--steps", type=int, default=50)
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="generate images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--segments", default=None)
    add_guidance_flags(s)
    s.add_argument("--trace", action="store_true")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="benchmark a method")
    e.add_argument("--ckpt", required=True)
    add_guidance_flags(e)
    e.add_argument("--n", type=int, default=200)
    e.add_argument("--out", required=True)
    e.add_argument("--threads", type=int, default=None)
    e.add_argument("--progress", type=int, default=None)
    e.add_argument("--pixel-stats", dest="pixel_stats", default=None)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one guidance axis")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--axis", required=True)
    a.add_argument("--values", default=None)
    a.add_argument("--n", type=int, default=200)
    a.add_argument("--steps", type=int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--threads", type=int, default=None)
    a.add_argument("--progress", type=int, default=None)
    a.set_defaults(fn=cmd_ablate)

    pr = sub.add_parser("probe", help="plot a trace or build pixel stats")
    pr.add_argument("--trace-file", dest="trace_file", default=None)
    pr.add_argument("--build-stats", dest="build_stats", action="store_true")
    pr.add_argument("--n", type=int, default=5000)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_probe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
