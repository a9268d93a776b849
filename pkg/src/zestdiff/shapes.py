"""Procedural shapes benchmark: scenes, oracle segmenter, mIoU, datasets.

Scenes are 32x32 images of flat-colored geometric shapes on a flat
background, with exact (non-antialiased) masks, a caption in the fixed
grammar, and per-object token index sets. The palette-nearest-neighbour
oracle segmenter plus mIoU form the evaluation loop.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import text
from .imageio import to_uint8, write_pgm, write_ppm
from .ntc import read_ntc, write_ntc

IMG = 32
MIN_AREA = 52  # >= 5% of 32*32

OBJECT_ANCHORS = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "cyan": (-1.0, 1.0, 1.0),
    "magenta": (1.0, -1.0, 1.0),
}
BACKGROUND_ANCHORS = {
    "white": (1.0, 1.0, 1.0),
    "black": (-1.0, -1.0, -1.0),
    "gray": (0.0, 0.0, 0.0),
}
PALETTE = {**OBJECT_ANCHORS, **BACKGROUND_ANCHORS}


def palette_separation() -> float:
    """Smallest max-channel distance between any two palette anchors."""
    names = sorted(PALETTE)
    best = np.inf
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            d = np.abs(np.subtract(PALETTE[a], PALETTE[b])).max()
            best = min(best, d)
    return float(best)


@dataclass
class Scene:
    image: np.ndarray            # (3, 32, 32) float32 in [-1, 1]
    masks: list                  # per-object (32, 32) bool, canonical order
    objects: list                # [(color, shape), ...] canonical order
    bg_color: str
    caption: list                # caption words
    tokens: list                 # token ids (unpadded)
    token_sets: list             # per-object tuple of caption token indices
    seed: int
    reseeds: int = 0


def _pixel_grid():
    c = np.arange(IMG) + 0.5
    return np.meshgrid(c, c, indexing="xy")  # X: columns, Y: rows


_X, _Y = _pixel_grid()


def _raster(shape: str, cx: float, cy: float, size: float) -> np.ndarray:
    if shape == "circle":
        return (_X - cx) ** 2 + (_Y - cy) ** 2 <= size ** 2
    if shape == "square":
        return (np.abs(_X - cx) <= size) & (np.abs(_Y - cy) <= size)
    if shape == "triangle":
        ax, ay = cx, cy - size
        bx, by = cx - size * 0.8660254, cy + size * 0.5
        cx2, cy2 = cx + size * 0.8660254, cy + size * 0.5

        def half(px, py, qx, qy):
            return (qx - px) * (_Y - py) - (qy - py) * (_X - px)

        d1, d2, d3 = half(ax, ay, bx, by), half(bx, by, cx2, cy2), half(cx2, cy2, ax, ay)
        return (d1 >= 0) & (d2 >= 0) & (d3 >= 0)
    raise ValueError(f"unknown shape {shape!r}")


_SIZE_RANGE = {"circle": (4.3, 6.5), "square": (3.8, 5.8), "triangle": (6.6, 8.5)}


def generate_scene(seed: int, K: int) -> Scene:
    """Deterministic scene with K disjoint objects, each covering >= 5%."""
    if not (1 <= K <= 3):
        raise ValueError(f"K must be in 1..3, got {K}")
    reseeds = 0
    cur = seed
    while True:
        rng = np.random.Generator(np.random.PCG64(cur))
        colors = rng.choice(sorted(OBJECT_ANCHORS), size=K, replace=False)
        shapes = rng.choice(text.SHAPES, size=K)
        bg = str(rng.choice(sorted(BACKGROUND_ANCHORS)))
        placed = []
        occupied = np.zeros((IMG, IMG), dtype=bool)
        ok = True
        for color, shape in zip(colors, shapes):
            lo, hi = _SIZE_RANGE[str(shape)]
            good = None
            for _ in range(100):
                size = rng.uniform(lo, hi)
                margin = size + 1.0
                cx = rng.uniform(margin, IMG - margin)
                cy = rng.uniform(margin, IMG - margin)
                mask = _raster(str(shape), cx, cy, size)
                if mask.sum() >= MIN_AREA and not (mask & occupied).any():
                    good = (mask, cx, cy)
                    break
            if good is None:
                ok = False
                break
            mask, cx, cy = good
            occupied |= mask
            placed.append({"color": str(color), "shape": str(shape),
                           "mask": mask, "cx": cx, "cy": cy})
        if ok:
            break
        reseeds += 1
        cur = cur + 1
    placed.sort(key=lambda o: (o["cy"], o["cx"]))

    img = np.empty((3, IMG, IMG), dtype=np.float32)
    for ch in range(3):
        img[ch] = BACKGROUND_ANCHORS[bg][ch]
    for obj in placed:
        col = OBJECT_ANCHORS[obj["color"]]
        for ch in range(3):
            img[ch][obj["mask"]] = col[ch]

    objects = [(o["color"], o["shape"]) for o in placed]
    caption, token_sets = text.caption_for(objects, bg)
    tokens = text.encode_words(caption)
    return Scene(image=img, masks=[o["mask"] for o in placed], objects=objects,
                 bg_color=bg, caption=caption, tokens=tokens,
                 token_sets=token_sets, seed=seed, reseeds=reseeds)


def oracle_segment(image: np.ndarray, palette: dict | None = None) -> dict:
    """Assign each pixel to its nearest palette anchor; returns name -> mask."""
    palette = palette or PALETTE
    names = sorted(palette)
    anchors = np.array([palette[n] for n in names], dtype=np.float64)
    px = np.asarray(image, dtype=np.float64).reshape(3, -1).T  # (HW, 3)
    d = ((px[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
    idx = d.argmin(axis=1).reshape(image.shape[1], image.shape[2])
    return {n: idx == i for i, n in enumerate(names)}


def iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def miou(pred_masks: dict, gt_masks: dict) -> float:
    """Mean IoU over classes aligned by color name.

    Classes empty on both sides are skipped; empty ground truth against a
    non-empty prediction scores 0.
    """
    scores = []
    for name in sorted(set(pred_masks) | set(gt_masks)):
        p = pred_masks.get(name)
        g = gt_masks.get(name)
        p_any = p is not None and p.any()
        g_any = g is not None and g.any()
        if not p_any and not g_any:
            continue
        if p_any and g_any:
            if p.shape != g.shape:
                raise ValueError(
                    f"miou: resolution mismatch for {name}: {p.shape} vs {g.shape}")
            scores.append(iou(p, g))
        else:
            scores.append(0.0)
    if not scores:
        raise ValueError("miou: no non-empty classes to score")
    return float(np.mean(scores))


def classify_shape(mask: np.ndarray) -> str:
    """Nearest bounding-box fill ratio: circle ~0.785, square ~1.0, triangle ~0.5."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("classify_shape: empty mask")
    bbox = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    fill = mask.sum() / bbox
    ref = {"square": 1.0, "circle": np.pi / 4.0, "triangle": 0.5}
    return min(ref, key=lambda k: abs(ref[k] - fill))


# -- datasets -----------------------------------------------------------------


@dataclass
class ShapesDataset:
    images: np.ndarray     # (n, 3, 32, 32) float32
    token_rows: np.ndarray  # (n, MAX_TOKENS) int64, padded
    train_idx: np.ndarray
    val_idx: np.ndarray
    meta: dict

    def __len__(self):
        return self.images.shape[0]


def _split_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n)
    val = idx[idx % 20 == 19]
    train = idx[idx % 20 != 19]
    return train, val


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def make_scenes(n: int, seed: int, k_choices=(1, 2, 3)) -> list[Scene]:
    rng = np.random.Generator(np.random.PCG64(seed))
    ks = rng.choice(k_choices, size=n)
    return [generate_scene(scene_seed(seed, i), int(ks[i])) for i in range(n)]


def dataset_from_scenes(scenes, meta: dict | None = None) -> ShapesDataset:
    n = len(scenes)
    images = np.stack([s.image for s in scenes])
    rows = np.full((n, text.MAX_TOKENS), text.PAD_ID, dtype=np.int64)
    for i, s in enumerate(scenes):
        rows[i, :len(s.tokens)] = s.tokens
    train, val = _split_indices(n)
    return ShapesDataset(images=images, token_rows=rows, train_idx=train,
                         val_idx=val, meta=meta or {})


def build_dataset(n: int, seed: int, out_dir) -> ShapesDataset:
    """Generate n scenes and serialize them under out_dir."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "ppm").mkdir(parents=True, exist_ok=True)
    scenes = make_scenes(n, seed)
    ds = dataset_from_scenes(scenes, meta={"n": n, "seed": seed})
    if len(ds.val_idx) == 0:
        warnings.warn(f"dataset of {n} scenes has an empty validation split")
    write_ntc(out / "images.ntc",
              {"images": ds.images, "token_rows": ds.token_rows,
               "train_idx": ds.train_idx, "val_idx": ds.val_idx},
              meta={"n": n, "seed": seed})
    with open(out / "captions.jsonl", "w") as f:
        for i, s in enumerate(scenes):
            rec = {
                "id": i,
                "caption": " ".join(s.caption),
                "tokens": list(map(int, s.tokens)),
                "bg": s.bg_color,
                "objects": [list(o) for o in s.objects],
                "segments": [
                    {"mask_ref": f"masks/{i:06d}.pgm",
                     "mask_index": k + 1,
                     "token_indices": list(map(int, s.token_sets[k]))}
                    for k in range(len(s.masks))
                ],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    for i, s in enumerate(scenes):
        idx_map = np.zeros((IMG, IMG), dtype=np.uint8)
        for k, m in enumerate(s.masks):
            idx_map[m] = k + 1
        write_pgm(out / "masks" / f"{i:06d}.pgm", idx_map)
        write_ppm(out / "ppm" / f"{i:06d}.ppm", to_uint8(s.image))
    return ds


def load_dataset(path) -> ShapesDataset:
    arrays, meta = read_ntc(Path(path) / "images.ntc")
    return ShapesDataset(images=arrays["images"].astype(np.float32),
                         token_rows=arrays["token_rows"],
                         train_idx=arrays["train_idx"], val_idx=arrays["val_idx"],
                         meta=meta)
