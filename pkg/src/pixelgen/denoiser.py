"""Tiny DiT-style x-prediction network.

Conditioning (time + class) is injected additively into every token after
patch embedding. Blocks are pre-norm: RMSNorm -> attention with 2-D rotary
positions -> residual, then RMSNorm -> SwiGLU -> residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pixelgen import rng as rngmod
from pixelgen.errors import ConfigError, ContractError
from pixelgen.nn import Linear, Module, RMSNorm, normal_init, parameter
from pixelgen.tensor import (
    Tensor,
    _emit,
    add,
    as_tensor,
    matmul,
    mul,
    register,
    reshape,
    silu,
    softmax,
    take_rows,
    transpose,
)


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    width: int = 64
    depth: int = 4
    heads: int = 4
    num_classes: int = 8
    repa_tap: int | None = None
    repa_dim: int = 32
    class_drop_prob: float = 0.1
    time_freqs: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if (self.width // self.heads) % 4:
            raise ConfigError(f"head dim {self.width // self.heads} not divisible by 4 (rope2d)")
        if not 0 <= self.tap < self.depth:
            raise ConfigError(f"repa_tap {self.tap} outside [0, {self.depth})")

    @property
    def tap(self) -> int:
        return self.depth // 2 if self.repa_tap is None else self.repa_tap

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def mlp_hidden(self) -> int:
        return 4 * ((8 * self.width // 3 + 3) // 4)


@dataclass
class DenoiserOutput:
    x_pred: Tensor
    hidden: Tensor


# ------------------------------------------------------------------ patches


def patchify(img, p: int) -> Tensor:
    """B×C×H×W -> B×P×(p·p·C), patches in row-major grid order."""
    img = as_tensor(img)
    b, c, h, w = img.shape
    if h % p or w % p:
        raise ConfigError(f"image {h}×{w} not divisible by patch size {p}")
    x = reshape(img, (b, c, h // p, p, w // p, p))
    x = transpose(x, (0, 2, 4, 3, 5, 1))
    return reshape(x, (b, (h // p) * (w // p), p * p * c))


def unpatchify(tokens, p: int, channels: int, h: int, w: int) -> Tensor:
    tokens = as_tensor(tokens)
    b = tokens.shape[0]
    x = reshape(tokens, (b, h // p, w // p, p, p, channels))
    x = transpose(x, (0, 5, 1, 3, 2, 4))
    return reshape(x, (b, channels, h, w))


# -------------------------------------------------------------------- rope2d


def _rope_angles(grid: int, head_dim: int, base: float = 100.0) -> np.ndarray:
    """Angles of shape P×(head_dim/2): first half from the row, second from the column."""
    quarter = head_dim // 4
    freqs = base ** (-np.arange(quarter) / quarter)
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return np.concatenate([rows[:, None] * freqs, cols[:, None] * freqs], axis=1)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    a, b = x[..., :half], x[..., half:]
    return np.concatenate([a * cos - b * sin, a * sin + b * cos], axis=-1)


def rope2d(x, grid: int) -> Tensor:
    """Rotate pairs ``(i, i + d/2)`` of each head vector by its grid-position angle.

    Pair ``i`` uses the row angle for ``i < d/4`` and the column angle otherwise,
    so dot products of rotated queries and keys depend on relative offsets only.
    """
    x = as_tensor(x)
    head_dim = x.shape[-1]
    if head_dim % 4:
        raise ConfigError(f"rope2d needs head dim divisible by 4, got {head_dim}")
    if x.shape[-2] != grid * grid:
        raise ConfigError(f"rope2d: {x.shape[-2]} tokens do not form a {grid}×{grid} grid")
    ang = _rope_angles(grid, head_dim).astype(x.data.dtype)
    cos, sin = np.cos(ang), np.sin(ang)
    return _emit("rope2d", _rotate(x.data, cos, sin), (x,), (cos, sin))


@register("rope2d")
def _rope2d_bw(ctx, g):
    cos, sin = ctx
    return (_rotate(g, cos, -sin),)


# ----------------------------------------------------------------- attention


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, p, d = x.shape
    return transpose(reshape(x, (b, p, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, p, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, p, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over B×heads×P×d_h; returns (output, weights)."""
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


class Attention(Module):
    def __init__(self, rng, width: int, heads: int, grid: int | None):
        self.qkv = Linear(rng, width, 3 * width)
        self.proj = Linear(rng, width, width)
        self.heads = heads
        self.grid = grid

    def __call__(self, x: Tensor) -> Tensor:
        b, p, d = x.shape
        qkv = reshape(self.qkv(x), (b, p, 3, self.heads, d // self.heads))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = (_select(qkv, i) for i in range(3))
        if self.grid is not None:
            q, k = rope2d(q, self.grid), rope2d(k, self.grid)
        out, _ = attention(q, k, v)
        return self.proj(merge_heads(out))


def _select(x: Tensor, i: int) -> Tensor:
    return _emit("select", x.data[i], (x,), (x.shape, i))


@register("select")
def _select_bw(ctx, g):
    shape, i = ctx
    out = np.zeros(shape, dtype=g.dtype)
    out[i] = g
    return (out,)


class SwiGLU(Module):
    def __init__(self, rng, width: int, hidden: int):
        self.gate = Linear(rng, width, hidden)
        self.up = Linear(rng, width, hidden)
        self.down = Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(mul(silu(self.gate(x)), self.up(x)))


class Block(Module):
    def __init__(self, rng, cfg: DenoiserConfig):
        self.norm1 = RMSNorm(cfg.width)
        self.attn = Attention(rng, cfg.width, cfg.heads, cfg.grid)
        self.norm2 = RMSNorm(cfg.width)
        self.mlp = SwiGLU(rng, cfg.width, cfg.mlp_hidden)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.norm1(x)))
        return add(x, self.mlp(self.norm2(x)))


# ------------------------------------------------------------------ embedding


def timestep_features(t, n_freqs: int) -> np.ndarray:
    """[cos(t·ω), sin(t·ω)] with ω geometric in [1, 1e4]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    omega = np.geomspace(1.0, 1e4, n_freqs)
    return np.concatenate([np.cos(t * omega), np.sin(t * omega)], axis=1)


class Denoiser(Module):
    def __init__(self, cfg: DenoiserConfig):
        self.cfg = cfg
        rng = rngmod.stream(cfg.seed, "init")
        d = cfg.width
        self.patch_embed = Linear(rng, cfg.patch_dim, d)
        self.time_mlp1 = Linear(rng, 2 * cfg.time_freqs, d)
        self.time_mlp2 = Linear(rng, d, d)
        self.class_embed = parameter(normal_init(rng, (cfg.num_classes + 1, d), 0.02))
        self.blocks = [Block(rng, cfg) for _ in range(cfg.depth)]
        self.final_norm = RMSNorm(d)
        self.head = Linear(rng, d, cfg.patch_dim, std=None)
        self.repa_proj = Linear(rng, d, cfg.repa_dim)
        self.calls = 0

    def time_class_embed(self, t, c) -> Tensor:
        c = np.asarray(c, dtype=np.int64).reshape(-1)
        if np.any(c < 0) or np.any(c > self.cfg.num_classes):
            raise ContractError(f"class ids must lie in [0, {self.cfg.num_classes}], got {c}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), c.shape)
        feats = Tensor(timestep_features(t, self.cfg.time_freqs))
        temb = self.time_mlp2(silu(self.time_mlp1(feats)))
        return add(temb, take_rows(self.class_embed, c))

    def forward(self, x_t, t, c) -> DenoiserOutput:
        cfg = self.cfg
        self.calls += 1
        x_t = as_tensor(x_t)
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
        c = np.broadcast_to(np.asarray(c, dtype=np.int64).reshape(-1), (b,))
        h = self.patch_embed(patchify(x_t, cfg.patch_size))
        cond = self.time_class_embed(t, c)
        h = add(h, reshape(cond, (b, 1, cfg.width)))
        hidden = None
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            if i == cfg.tap:
                hidden = h
        out = self.head(self.final_norm(h))
        x_pred = unpatchify(out, cfg.patch_size, cfg.channels, cfg.image_size, cfg.image_size)
        return DenoiserOutput(x_pred, hidden)

    __call__ = forward

    def forward_cfg_pair(self, x_t, t, c) -> tuple[DenoiserOutput, DenoiserOutput]:
        b = np.shape(x_t)[0]
        cond = self.forward(x_t, t, c)
        uncond = self.forward(x_t, t, np.full(b, self.cfg.null_class))
        return cond, uncond

    def denoiser_parameters(self):
        """Named parameters excluding the alignment projector."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("repa_proj")]

    def drop_labels(self, c, seed: int, step: int, indices) -> np.ndarray:
        """Replace each label by the null class with ``class_drop_prob`` (keyed per sample)."""
        c = np.array(c, dtype=np.int64)
        u = rngmod.per_index_uniform(seed, "label_drop", step, indices)
        c[u < self.cfg.class_drop_prob] = self.cfg.null_class
        return c


def count_parameters(cfg: DenoiserConfig) -> int:
    """Closed-form parameter count of :class:`Denoiser` for ``cfg``."""
    d, hdn, pd = cfg.width, cfg.mlp_hidden, cfg.patch_dim
    block = d + (d * 3 * d + 3 * d) + (d * d + d) + d + 2 * (d * hdn + hdn) + (hdn * d + d)
    return (
        (pd * d + d)
        + (2 * cfg.time_freqs * d + d)
        + (d * d + d)
        + (cfg.num_classes + 1) * d
        + cfg.depth * block
        + d
        + (d * pd + pd)
        + (d * cfg.repa_dim + cfg.repa_dim)
    )
