"""Turn captured cross-attention into soft segment estimates.

Selected attention maps are upsampled to the highest attention resolution
and averaged; each segment's estimate sums the maps of its tokens. The
averaging policy controls grouping: one global estimate (default), one per
layer, or one per (layer, head), which feeds the head-averaging ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .ntc import write_ntc
from .tensor import Tensor
from .text import MAX_TOKENS

LAYER_FILTERS = ("all", "encoder-only", "decoder-only",
                 "res-high-only", "res-low-only", "res-both")
AVERAGING_MODES = ("global", "per-layer", "per-head")


@dataclass
class SegmentSpec:
    """K binary masks with the prompt-token index sets they annotate.

    masks_full holds the source-resolution masks (for evaluation and for
    deriving per-layer masks); masks holds the working copy at the highest
    attention resolution, downsampled by area-majority at 0.5.
    """

    masks_full: np.ndarray          # (K, H, W) float 0/1 at source resolution
    token_sets: list                # per-segment tuple of prompt token indices
    texts: list = field(default_factory=list)
    work_resolution: int = 16
    masks: np.ndarray = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.masks_full, dtype=np.float32)
        if m.ndim != 3:
            raise ValueError(f"segment masks must be (K,H,W), got {m.shape}")
        if not np.isin(m, (0.0, 1.0)).all():
            raise ValueError("segment masks must be binary")
        if len(self.token_sets) != m.shape[0]:
            raise ValueError(
                f"{m.shape[0]} masks but {len(self.token_sets)} token sets")
        for i, ts in enumerate(self.token_sets):
            if len(ts) == 0:
                raise ValueError(f"token set of segment {i} is empty")
        self.masks_full = m
        self.token_sets = [tuple(int(j) for j in ts) for ts in self.token_sets]
        self.masks = np.stack(
            [downsample_mask(mk, self.work_resolution) for mk in m])

    @property
    def K(self) -> int:
        return self.masks_full.shape[0]

    def masks_at(self, res: int) -> np.ndarray:
        if res == self.work_resolution:
            return self.masks
        return np.stack([downsample_mask(mk, res) for mk in self.masks_full])

    @classmethod
    def from_scene(cls, scene, work_resolution: int = 16) -> "SegmentSpec":
        return cls(
            masks_full=np.stack([m.astype(np.float32) for m in scene.masks]),
            token_sets=list(scene.token_sets),
            texts=[" ".join(scene.caption[j] for j in ts) for ts in scene.token_sets],
            work_resolution=work_resolution)

    def max_token_index(self) -> int:
        return max(max(ts) for ts in self.token_sets)


def downsample_mask(mask: np.ndarray, res: int) -> np.ndarray:
    """Area-majority downsample of a binary mask (threshold 0.5)."""
    mask = np.asarray(mask, dtype=np.float32)
    h, w = mask.shape
    if h == res and w == res:
        return mask.copy()
    if h % res or w % res:
        raise ValueError(f"mask {mask.shape} not an integer multiple of {res}")
    fh, fw = h // res, w // res
    pooled = mask.reshape(res, fh, res, fw).mean(axis=(1, 3))
    return (pooled >= 0.5).astype(np.float32)


def filter_records(records, layer_filter: str = "res-both"):
    """Select attention records by the layer-filter vocabulary."""
    if layer_filter not in LAYER_FILTERS:
        raise ValueError(f"unknown layer filter {layer_filter!r}; "
                         f"choose from {LAYER_FILTERS}")
    if not records:
        raise ValueError(f"no attention records to filter with {layer_filter!r}")
    resolutions = sorted({r.resolution for r in records})
    if layer_filter in ("all", "res-both"):
        sel = list(records)
    elif layer_filter == "encoder-only":
        sel = [r for r in records if r.branch == "encoder"]
    elif layer_filter == "decoder-only":
        sel = [r for r in records if r.branch == "decoder"]
    elif layer_filter == "res-high-only":
        sel = [r for r in records if r.resolution == resolutions[-1]]
    else:
        sel = [r for r in records if r.resolution == resolutions[0]]
    if not sel:
        raise ValueError(f"layer filter {layer_filter!r} selected no records")
    return sel


def upsample_to_max(records) -> tuple[list, int]:
    """Per-token maps (N, H, W) aligned to the highest resolution among records.

    Returns (list of tensors parallel to records, max_resolution).
    """
    if not records:
        raise ValueError("upsample_to_max: empty record selection")
    max_res = max(r.resolution for r in records)
    out = []
    for r in records:
        hw, n = r.map.shape
        res = int(math.isqrt(hw))
        per_tok = tz.reshape(tz.permute(r.map, (1, 0)), (n, res, res))
        if res != max_res:
            per_tok = tz.bilinear_resize(per_tok, max_res, max_res)
        out.append(per_tok)
    return out, max_res


@dataclass
class SegmentEstimate:
    """Per-segment soft maps for one averaging group."""

    group_key: str
    maps: Tensor            # (K, H, W), entries in [0, 1] per map term scale


@dataclass
class Estimates:
    groups: list            # list[SegmentEstimate]
    resolution: int
    averaging: str

    def single(self) -> Tensor:
        if len(self.groups) != 1:
            raise ValueError(f"expected one group, have {len(self.groups)}")
        return self.groups[0].maps

    def arrays(self) -> np.ndarray:
        """Mean over groups as plain numpy (K, H, W)."""
        acc = self.groups[0].maps.data.astype(np.float64).copy()
        for g in self.groups[1:]:
            acc += g.maps.data
        return acc / len(self.groups)


def _selection_matrix(token_sets, n_tokens: int, dtype) -> np.ndarray:
    sel = np.zeros((len(token_sets), n_tokens), dtype=dtype)
    for i, ts in enumerate(token_sets):
        for j in ts:
            if not (0 <= j < n_tokens):
                raise ValueError(f"token index {j} out of range (N={n_tokens})")
            sel[i, j] += 1.0
    return sel


def _mean_tensors(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = tz.add(acc, t)
    return tz.mul(acc, 1.0 / len(tensors))


def segment_estimates(records, segments: SegmentSpec, averaging: str = "global",
                      layer_filter: str = "res-both") -> Estimates:
    """Soft segmentation estimates from attention records.

    Every selected (layer, head) map is upsampled to the highest selected
    resolution; a segment's estimate averages those maps and sums over the
    segment's tokens. Grouping follows the averaging mode.
    """
    if averaging not in AVERAGING_MODES:
        raise ValueError(f"unknown averaging {averaging!r}; choose {AVERAGING_MODES}")
    sel_records = filter_records(records, layer_filter)
    maps, max_res = upsample_to_max(sel_records)
    n_tokens = sel_records[0].map.shape[1]
    sel = Tensor(_selection_matrix(segments.token_sets, n_tokens,
                                   maps[0].dtype))
    per_record = [
        tz.reshape(tz.matmul(sel, tz.reshape(m, (n_tokens, max_res * max_res))),
                   (segments.K, max_res, max_res))
        for m in maps]

    if averaging == "global":
        keys = {"global": list(range(len(per_record)))}
    elif averaging == "per-layer":
        keys = {}
        for idx, r in enumerate(sel_records):
            keys.setdefault(r.layer_id, []).append(idx)
    else:
        keys = {}
        for idx, r in enumerate(sel_records):
            keys.setdefault(f"{r.layer_id}.h{r.head}", []).append(idx)

    groups = [SegmentEstimate(group_key=k,
                              maps=_mean_tensors([per_record[i] for i in idxs]))
              for k, idxs in sorted(keys.items())]
    return Estimates(groups=groups, resolution=max_res, averaging=averaging)


# -- pooled class keys ---------------------------------------------------------


def class_probability_maps(queries: np.ndarray, pooled_keys: np.ndarray,
                           scale: float) -> np.ndarray:
    """Softmax over classes of query/key energies: (HW, d) x (C, d) -> (HW, C)."""
    logits = (np.asarray(queries) @ np.asarray(pooled_keys).T) * scale
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def pooled_class_keys_estimates(model, x_t, t: int, class_texts,
                                layer_filter: str = "res-both") -> np.ndarray:
    """Per-class probability maps using one pooled key embedding per class.

    Each class text is embedded by the toy encoder and mean-pooled; energies
    against the U-Net queries are averaged over selected layers and heads,
    then softmaxed across classes. Returns (C, H, W) with per-pixel
    distributions over classes.
    """
    from .text import encode_words  # local import to avoid cycle at module load

    if not class_texts:
        raise ValueError("need at least one class text")
    pooled = []
    with tz.no_grad():
        for ct in class_texts:
            ids = np.asarray(encode_words(ct.split()), dtype=np.int64)
            tok = tz.embedding(model.token_table, ids)
            pos = tz.embedding(model.pos_table, np.arange(len(ids)))
            pooled.append(tz.add(tok, pos).data.mean(axis=0))
        pooled = np.stack(pooled)  # (C, d_text)

        probe: list = []
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=model.dtype))
        ctx = model.encode_prompt(None, batch=x.shape[0])
        model.forward(x, np.full(x.shape[0], t), ctx, step_t=t, query_probe=probe)

    layers = [(layer, q) for layer, q, _k in probe]

    class _Rec:  # adapter so filter_records can run on probe entries
        def __init__(self, layer):
            self.resolution = layer.resolution
            self.branch = layer.branch
            self.layer_id = layer.layer_id

    recs = [_Rec(layer) for layer, _ in layers]
    keep = filter_records(recs, layer_filter)
    keep_ids = {id(r) for r in keep}
    max_res = max(r.resolution for r in keep)

    energy_sum = None
    count = 0
    for (layer, q), rec in zip(layers, recs):
        if id(rec) not in keep_ids:
            continue
        kc = pooled @ layer.wk.w.data + layer.wk.b.data  # (C, channels)
        hw = q.shape[1]
        res = int(math.isqrt(hw))
        for h in range(layer.heads):
            sl = slice(h * layer.d_head, (h + 1) * layer.d_head)
            e = (q.data[0][:, sl] @ kc[:, sl].T) / math.sqrt(layer.d_head)
            e = e.reshape(res, res, -1).astype(np.float64)
            if res != max_res:
                from .tensor import _resize_matrix
                R = _resize_matrix(res, max_res, "float64")
                e = np.einsum("oi,ijc->ojc", R, e)
                e = np.einsum("pj,ojc->opc", R, e)
            energy_sum = e if energy_sum is None else energy_sum + e
            count += 1
    mean_energy = (energy_sum / count).reshape(max_res * max_res, -1)
    mean_energy -= mean_energy.max(axis=1, keepdims=True)
    p = np.exp(mean_energy)
    p /= p.sum(axis=1, keepdims=True)
    return p.reshape(max_res, max_res, -1).transpose(2, 0, 1)


# -- trace persistence ---------------------------------------------------------


def attention_trace(trace, path) -> None:
    """Serialize per-step segment estimates and losses from a sample trace."""
    steps = trace.steps
    if not steps or any(s.estimates is None for s in steps):
        raise ValueError("attention_trace: run the sampler with capture "
                         "(trace and segments) enabled")
    arrays = {}
    for i, s in enumerate(steps):
        for k in range(s.estimates.shape[0]):
            arrays[f"step{i:03d}/seg{k}"] = s.estimates[k].astype(np.float32)
    arrays["losses"] = np.array(
        [np.nan if s.loss is None else s.loss for s in steps], dtype=np.float64)
    arrays["step_t"] = np.array([s.t for s in steps], dtype=np.int64)
    arrays["wall_times"] = np.array([s.wall for s in steps], dtype=np.float64)
    write_ntc(path, arrays, meta={"n_steps": len(steps),
                                  "n_segments": int(steps[0].estimates.shape[0])})
