"""Cross-attention U-Net noise estimator with capture hooks.

The network predicts the noise content of a noised image given the timestep
and a token-embedding context. Cross-attention sits at the configured
resolutions in both the encoder and decoder; each attention layer can
report its per-head row-stochastic maps (capture) and accept an additive
pre-softmax bias (the attention-bias baseline hooks in there).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .tensor import Tensor
from .text import MAX_TOKENS, NULL_ID, VOCAB, PromptSpec, null_prompt_ids


@dataclass
class DenoiserConfig:
    img_size: int = 32
    img_channels: int = 3
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 4)
    attention_resolutions: tuple = (16, 8)
    heads: int = 4
    time_dim: int = 64
    d_text: int = 64
    gn_groups: int = 8

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attention_resolutions = tuple(self.attention_resolutions)
        levels = [self.img_size // (2 ** i) for i in range(len(self.channel_mults))]
        present = [r for r in self.attention_resolutions if r in levels]
        if len(set(present)) < 2:
            raise ValueError(
                f"need >= 2 distinct attention resolutions among levels {levels}, "
                f"got {self.attention_resolutions}")
        if self.heads < 2:
            raise ValueError(f"need >= 2 attention heads, got {self.heads}")
        for mult in self.channel_mults:
            if (self.base_channels * mult) % self.heads:
                raise ValueError("channels at every level must divide the head count")

    def to_dict(self) -> dict:
        return {
            "img_size": self.img_size, "img_channels": self.img_channels,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "attention_resolutions": list(self.attention_resolutions),
            "heads": self.heads, "time_dim": self.time_dim,
            "d_text": self.d_text, "gn_groups": self.gn_groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


@dataclass
class AttentionRecord:
    """One captured cross-attention map: (H*W, N), rows sum to 1."""

    layer_id: str
    resolution: int
    branch: str
    head: int
    step_t: int
    map: Tensor


def _gn_groups(preferred: int, channels: int) -> int:
    return math.gcd(preferred, channels)


class _ParamStore:
    """Creates and registers named parameter tensors."""

    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def make(self, name: str, shape, init: str = "he", fan_in: int | None = None) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif init == "normal":
            data = (self.rng.standard_normal(shape) * 0.02).astype(self.dtype)
        else:
            fi = fan_in if fan_in is not None else shape[0]
            std = math.sqrt((2.0 if init == "he" else 1.0) / fi)
            data = (self.rng.standard_normal(shape) * std).astype(self.dtype)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t


class Linear:
    def __init__(self, ps, name, d_in, d_out, zero=False):
        init = "zeros" if zero else "xavier"
        self.w = ps.make(f"{name}.w", (d_in, d_out), init=init, fan_in=d_in)
        self.b = ps.make(f"{name}.b", (d_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return tz.add(tz.matmul(x, self.w), self.b)


class Conv:
    def __init__(self, ps, name, c_in, c_out, k=3, stride=1, pad=1, zero=False):
        init = "zeros" if zero else "he"
        self.w = ps.make(f"{name}.w", (c_out, c_in, k, k), init=init, fan_in=c_in * k * k)
        self.b = ps.make(f"{name}.b", (c_out, 1, 1), init="zeros")
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return tz.add(tz.conv2d(x, self.w, stride=self.stride, pad=self.pad), self.b)


class GroupNorm:
    def __init__(self, ps, name, channels, preferred_groups):
        self.gamma = ps.make(f"{name}.gamma", (channels,), init="ones")
        self.beta = ps.make(f"{name}.beta", (channels,), init="zeros")
        self.groups = _gn_groups(preferred_groups, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return tz.group_norm(x, self.gamma, self.beta, self.groups)


class ResBlock:
    """GN-SiLU-conv twice with a timestep bias between; zero-init second conv."""

    def __init__(self, ps, name, c_in, c_out, time_dim, groups):
        self.gn1 = GroupNorm(ps, f"{name}.gn1", c_in, groups)
        self.conv1 = Conv(ps, f"{name}.conv1", c_in, c_out)
        self.tproj = Linear(ps, f"{name}.tproj", time_dim, c_out)
        self.gn2 = GroupNorm(ps, f"{name}.gn2", c_out, groups)
        self.conv2 = Conv(ps, f"{name}.conv2", c_out, c_out, zero=True)
        self.skip = None
        if c_in != c_out:
            self.skip = Conv(ps, f"{name}.skip", c_in, c_out, k=1, pad=0)
        self.c_out = c_out

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(tz.silu(self.gn1(x)))
        tb = tz.reshape(self.tproj(temb), (temb.shape[0], self.c_out, 1, 1))
        h = tz.add(h, tb)
        h = self.conv2(tz.silu(self.gn2(h)))
        res = x if self.skip is None else self.skip(x)
        return tz.add(h, res)


class CrossAttention:
    """Multi-head attention from image positions to text tokens."""

    def __init__(self, ps, name, channels, d_text, heads, groups, layer_id,
                 resolution, branch):
        self.gn = GroupNorm(ps, f"{name}.gn", channels, groups)
        self.wq = Linear(ps, f"{name}.wq", channels, channels)
        self.wk = Linear(ps, f"{name}.wk", d_text, channels)
        self.wv = Linear(ps, f"{name}.wv", d_text, channels)
        self.wo = Linear(ps, f"{name}.wo", channels, channels, zero=True)
        self.heads = heads
        self.d_head = channels // heads
        self.channels = channels
        self.layer_id = layer_id
        self.resolution = resolution
        self.branch = branch

    def __call__(self, x: Tensor, ctx: Tensor, step_t: int, capture, bias,
                 query_probe=None) -> Tensor:
        B, C, H, W = x.shape
        n = ctx.shape[1]
        flat = tz.reshape(tz.permute(self.gn(x), (0, 2, 3, 1)), (B, H * W, C))
        q = self.wq(flat)
        k = self.wk(ctx)
        v = self.wv(ctx)
        if query_probe is not None:
            query_probe.append((self, q, k))
        hsp = (B, -1, self.heads, self.d_head)
        qh = tz.permute(tz.reshape(q, hsp), (0, 2, 1, 3))
        kh = tz.permute(tz.reshape(k, hsp), (0, 2, 3, 1))
        vh = tz.permute(tz.reshape(v, hsp), (0, 2, 1, 3))
        logits = tz.mul(tz.matmul(qh, kh), 1.0 / math.sqrt(self.d_head))
        if bias is not None:
            logits = tz.add(logits, bias)
        attn = tz.softmax(logits, axis=-1)
        if capture is not None:
            maps = tz.reshape(attn, (B * self.heads, H * W, n))
            for h in range(self.heads):
                capture.append(AttentionRecord(
                    layer_id=self.layer_id, resolution=self.resolution,
                    branch=self.branch, head=h, step_t=step_t,
                    map=tz.select(maps, 0, h)))
        out = tz.matmul(attn, vh)
        out = tz.reshape(tz.permute(out, (0, 2, 1, 3)), (B, H * W, C))
        out = self.wo(out)
        out = tz.permute(tz.reshape(out, (B, H, W, C)), (0, 3, 1, 2))
        return tz.add(x, out)


def _sinusoidal(t_arr: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t_arr[:, None].astype(np.float64) * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb.astype(dtype)


class Denoiser:
    """The full noise estimator, owning its parameters."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0, dtype=np.float32,
                 params: dict | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        ps = _ParamStore(np.random.Generator(np.random.PCG64(seed)), self.dtype)
        c = cfg.base_channels
        chans = [c * m for m in cfg.channel_mults]
        levels = [cfg.img_size // (2 ** i) for i in range(len(chans))]
        g = cfg.gn_groups

        self.token_table = ps.make("text.tokens", (len(VOCAB), cfg.d_text), init="normal")
        self.pos_table = ps.make("text.pos", (MAX_TOKENS, cfg.d_text), init="normal")
        self.time1 = Linear(ps, "time.l1", cfg.time_dim, cfg.time_dim)
        self.time2 = Linear(ps, "time.l2", cfg.time_dim, cfg.time_dim)

        self.conv_in = Conv(ps, "conv_in", cfg.img_channels, chans[0])
        self.enc_blocks, self.enc_attn, self.downs = [], [], []
        for i, (ch, res) in enumerate(zip(chans, levels)):
            self.enc_blocks.append(ResBlock(ps, f"enc{i}.res", ch, ch, cfg.time_dim, g))
            attn = None
            if res in cfg.attention_resolutions:
                attn = CrossAttention(ps, f"enc{i}.attn", ch, cfg.d_text, cfg.heads,
                                      g, f"enc{res}", res, "encoder")
            self.enc_attn.append(attn)
            if i < len(chans) - 1:
                self.downs.append(Conv(ps, f"down{i}", ch, chans[i + 1], stride=2))
        self.mid1 = ResBlock(ps, "mid.res1", chans[-1], chans[-1], cfg.time_dim, g)
        self.mid2 = ResBlock(ps, "mid.res2", chans[-1], chans[-1], cfg.time_dim, g)
        self.dec_blocks, self.dec_attn, self.ups = {}, {}, {}
        for i in reversed(range(len(chans))):
            ch, res = chans[i], levels[i]
            self.dec_blocks[i] = ResBlock(ps, f"dec{i}.res", 2 * ch, ch, cfg.time_dim, g)
            attn = None
            if res in cfg.attention_resolutions:
                attn = CrossAttention(ps, f"dec{i}.attn", ch, cfg.d_text, cfg.heads,
                                      g, f"dec{res}", res, "decoder")
            self.dec_attn[i] = attn
            if i > 0:
                self.ups[i] = Conv(ps, f"up{i}", ch, chans[i - 1])
        self.out_gn = GroupNorm(ps, "out.gn", chans[0], g)
        self.out_conv = Conv(ps, "out.conv", chans[0], cfg.img_channels, zero=True)

        self.params = ps.params
        if params is not None:
            self.load_params(params)
        self.levels = levels

    # -- parameter management ------------------------------------------------

    def load_params(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter mismatch; missing {sorted(missing)[:4]}, "
                             f"unexpected {sorted(extra)[:4]}")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def param_arrays(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def attention_layer_ids(self) -> list[str]:
        ids = [a.layer_id for a in self.enc_attn if a is not None]
        ids += [self.dec_attn[i].layer_id for i in sorted(self.dec_attn)
                if self.dec_attn[i] is not None]
        return ids

    # -- conditioning ----------------------------------------------------------

    def encode_tokens(self, ids_batch: np.ndarray) -> Tensor:
        """Token + position embeddings for padded id rows (B, MAX_TOKENS)."""
        ids_batch = np.asarray(ids_batch, dtype=np.int64)
        tok = tz.embedding(self.token_table, ids_batch)
        pos = tz.embedding(self.pos_table, np.arange(ids_batch.shape[1]))
        return tz.add(tok, pos)

    def encode_prompt(self, prompt: PromptSpec | None, batch: int = 1) -> Tensor:
        ids = prompt.padded() if prompt is not None else null_prompt_ids()
        return self.encode_tokens(np.tile(np.asarray(ids, dtype=np.int64), (batch, 1)))

    # -- forward ---------------------------------------------------------------

    def forward(self, x: Tensor, t_arr: np.ndarray, ctx: Tensor, step_t: int = -1,
                capture: list | None = None, attn_bias: dict | None = None,
                query_probe: list | None = None) -> Tensor:
        temb = Tensor(_sinusoidal(np.asarray(t_arr), self.cfg.time_dim, self.dtype))
        temb = self.time2(tz.silu(self.time1(temb)))

        def bias_for(res):
            if attn_bias is None:
                return None
            b = attn_bias.get(res)
            return Tensor(np.asarray(b, dtype=self.dtype)) if b is not None else None

        h = self.conv_in(x)
        skips = []
        for i, block in enumerate(self.enc_blocks):
            h = block(h, temb)
            attn = self.enc_attn[i]
            if attn is not None:
                h = attn(h, ctx, step_t, capture, bias_for(attn.resolution),
                         query_probe)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid1(h, temb)
        h = self.mid2(h, temb)
        for i in reversed(range(len(self.enc_blocks))):
            h = tz.concat([h, skips[i]], axis=1)
            h = self.dec_blocks[i](h, temb)
            attn = self.dec_attn[i]
            if attn is not None:
                h = attn(h, ctx, step_t, capture, bias_for(attn.resolution),
                         query_probe)
            if i > 0:
                h = self.ups[i](tz.upsample_nearest2(h))
        return self.out_conv(tz.silu(self.out_gn(h)))

    def predict_noise(self, x_t, t: int, prompt: PromptSpec | None,
                      capture: bool = False, attn_bias: dict | None = None
                      ) -> tuple[Tensor, list[AttentionRecord]]:
        """Noise estimate for one image; optionally capture attention maps.

        `prompt=None` uses the learned null conditioning. With capture on,
        returns one record per (attention layer, head); capture changes no
        arithmetic, so outputs are bitwise identical either way.
        """
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.dtype))
        expect = (self.cfg.img_channels, self.cfg.img_size, self.cfg.img_size)
        if x.shape[1:] != expect or x.ndim != 4:
            raise ValueError(f"predict_noise: input shape {x.shape} != (B,)+{expect}")
        records: list[AttentionRecord] = []
        ctx = self.encode_prompt(prompt, batch=x.shape[0])
        eps = self.forward(x, np.full(x.shape[0], t), ctx, step_t=t,
                           capture=records if capture else None,
                           attn_bias=attn_bias)
        return eps, records
