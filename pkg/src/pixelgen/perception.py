"""Frozen feature extractors and the auxiliary training losses.

Two small randomly initialised, frozen networks stand in for the pretrained
perceptual backbones:

* :class:`LocalFeatureNet` - a stride-2 conv pyramid whose per-stage
  activations drive the multi-level local loss.
* :class:`GlobalFeatureNet` - a patch-token encoder whose per-patch features
  drive the global cosine loss, the representation-alignment loss and the
  evaluation embedding.

The reference branch (features of the clean image) is always computed outside
the tape.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from pixelgen import rng as rngmod
from pixelgen.denoiser import attention, merge_heads, patchify, split_heads
from pixelgen.errors import ConfigError, DimensionError
from pixelgen.flow import DiffusionBatch, fm_loss
from pixelgen.nn import Linear, Module, l2_normalize, normal_init, parameter, rms_norm
from pixelgen.tensor import (
    Tensor,
    add,
    as_tensor,
    conv2d,
    gelu_tanh,
    mean,
    mul,
    no_tape,
    silu,
    square,
    sub,
    sum as tsum,
    take_rows,
    transpose,
)


@dataclass(frozen=True)
class PerceptualConfig:
    lambda1: float = 0.1
    lambda2: float = 0.01
    gate_threshold: float = 0.3
    repa_weight: float = 0.5
    layer_weights: tuple | None = None
    global_layer: int = -1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.repa_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ConfigError(f"gate threshold must lie in [0, 1], got {self.gate_threshold}")


# ------------------------------------------------------------------ extractors


class LocalFeatureNet(Module):
    """Stack of 3×3 stride-2 conv + SiLU stages with frozen seeded weights."""

    def __init__(self, widths=(8, 16, 32), in_channels: int = 3, seed: int = 1):
        rng = rngmod.stream(seed, "extractor", 0, 0)
        self.widths = tuple(widths)
        self.kernels = []
        self.biases = []
        c_in = in_channels
        for w in self.widths:
            std = math.sqrt(2.0 / (9 * c_in))
            self.kernels.append(parameter(normal_init(rng, (w, c_in, 3, 3), std), trainable=False))
            self.biases.append(parameter(normal_init(rng, (w,), 0.1), trainable=False))
            c_in = w

    def named_parameters(self, prefix: str = ""):
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"{prefix}stage{i}.kernel", k
            yield f"{prefix}stage{i}.bias", b

    def __call__(self, img) -> list[Tensor]:
        img = as_tensor(img)
        n = len(self.widths)
        h, w = img.shape[2:]
        if h % 2**n or w % 2**n:
            raise ConfigError(f"image {h}×{w} not divisible by 2^{n}")
        feats = []
        x = img
        for k, b in zip(self.kernels, self.biases):
            x = silu(conv2d(x, k, stride=2, bias=b))
            feats.append(x)
        return feats


def _sinusoid_2d(grid: int, dim: int) -> np.ndarray:
    quarter = dim // 4
    omega = 1.0 / 10.0 ** (np.arange(quarter) / max(quarter, 1))
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    parts = [np.sin(rows[:, None] * omega), np.cos(rows[:, None] * omega),
             np.sin(cols[:, None] * omega), np.cos(cols[:, None] * omega)]
    return np.concatenate(parts, axis=1)


class GlobalFeatureNet(Module):
    """Patch embedding followed by attention + MLP stages; all weights frozen.

    With ``mixing=False`` the attention sublayers and positional codes are
    dropped, leaving a purely patch-local map.
    """

    def __init__(self, patch: int = 4, dim: int = 32, stages: int = 2, heads: int = 2,
                 seed: int = 2, mixing: bool = True, in_channels: int = 3):
        rng = rngmod.stream(seed, "extractor", 1, 0)
        self.patch, self.dim, self.heads, self.mixing = patch, dim, heads, mixing
        pd = patch * patch * in_channels
        self.embed = Linear(rng, pd, dim, std=1.0 / math.sqrt(pd), trainable=False)
        self.embed.bias.data = normal_init(rng, (dim,), 0.1)
        self.layers = []
        for _ in range(stages):
            self.layers.append(_MixStage(rng, dim, heads))

    def __call__(self, img, layer: int = -1) -> Tensor:
        """Per-patch features (B×P×D) after stage ``layer`` (0 = embedding, -1 = last)."""
        img = as_tensor(img)
        h, w = img.shape[2:]
        q = self.patch
        if h % q or w % q:
            raise ConfigError(f"image {h}×{w} not divisible by patch size {q}")
        if h != w:
            raise ConfigError("global features need a square image")
        n = len(self.layers)
        layer = n + layer + 1 if layer < 0 else layer
        if not 0 <= layer <= n:
            raise ConfigError(f"layer {layer} outside [0, {n}]")
        x = self.embed(patchify(img, q))
        pos = Tensor(_sinusoid_2d(h // q, self.dim)) if self.mixing else None
        for stage in self.layers[:layer]:
            x = stage(x, pos, self.mixing)
        return rms_norm(x)


class _MixStage(Module):
    def __init__(self, rng, dim: int, heads: int):
        s = 1.0 / math.sqrt(dim)
        self.heads = heads
        self.q = Linear(rng, dim, dim, std=s, bias=False, trainable=False)
        self.k = Linear(rng, dim, dim, std=s, bias=False, trainable=False)
        self.v = Linear(rng, dim, dim, std=s, bias=False, trainable=False)
        self.o = Linear(rng, dim, dim, std=s, bias=False, trainable=False)
        self.fc1 = Linear(rng, dim, 2 * dim, std=s, trainable=False)
        self.fc2 = Linear(rng, 2 * dim, dim, std=1.0 / math.sqrt(2 * dim), trainable=False)

    def __call__(self, x: Tensor, pos: Tensor | None, mixing: bool) -> Tensor:
        if mixing:
            hq = add(rms_norm(x), pos)
            q = split_heads(self.q(hq), self.heads)
            k = split_heads(self.k(hq), self.heads)
            v = split_heads(self.v(rms_norm(x)), self.heads)
            out, _ = attention(q, k, v)
            x = add(x, self.o(merge_heads(out)))
        return add(x, self.fc2(gelu_tanh(self.fc1(rms_norm(x)))))


# ---------------------------------------------------------------------- losses


def channel_normalize(feat: Tensor) -> Tensor:
    """B×C×H×W -> B×H×W×C with each location's channel vector unit-normalized."""
    return l2_normalize(transpose(feat, (0, 2, 3, 1)), 1e-14)


def local_features(net: LocalFeatureNet, img) -> list[Tensor]:
    return net(img)


def _layer_weights(net_widths, cfg_weights) -> list[np.ndarray]:
    if cfg_weights is None:
        return [np.full(c, 1.0 / c) for c in net_widths]
    out = [np.asarray(w, dtype=np.float64) for w in cfg_weights]
    if len(out) != len(net_widths) or any(w.shape != (c,) for w, c in zip(out, net_widths)):
        raise ConfigError("layer weights must give one vector per stage of matching width")
    if any(np.any(w < 0) for w in out):
        raise ConfigError("layer weights must be non-negative")
    return out


def lpips_from_features(fa: list, fb: list, weights: list[np.ndarray]) -> Tensor:
    """Per-sample Σ_l mean_{h,w} Σ_c w_c (n(fa) - n(fb))_c², shape (B,)."""
    total = None
    for a, b, w in zip(fa, fb, weights):
        d = sub(channel_normalize(a), channel_normalize(b))
        per_loc = tsum(mul(square(d), Tensor(w)), axis=-1)
        term = mean(per_loc, axis=(1, 2))
        total = term if total is None else add(total, term)
    return total


def lpips_per_sample(net: LocalFeatureNet, a, b, weights=None) -> Tensor:
    a = as_tensor(a)
    b = b.data if isinstance(b, Tensor) else b
    if a.shape != np.shape(b):
        raise DimensionError(f"lpips inputs differ in shape: {a.shape} vs {np.shape(b)}")
    with no_tape():
        fb = net(b)
    return lpips_from_features(net(a), fb, _layer_weights(net.widths, weights))


def lpips_loss(net: LocalFeatureNet, a, b, cfg: PerceptualConfig | None = None) -> Tensor:
    weights = None if cfg is None else cfg.layer_weights
    return mean(lpips_per_sample(net, a, b, weights))


def cosine_dissimilarity(fa, fb) -> Tensor:
    """Per-sample mean over rows of ``1 - cos``; norms are offset by 1e-8."""
    fa, fb = as_tensor(fa), as_tensor(fb)
    if fa.shape != fb.shape:
        raise DimensionError(f"feature shapes differ: {fa.shape} vs {fb.shape}")
    cos = tsum(mul(l2_normalize(fa, 1e-8), l2_normalize(fb, 1e-8)), axis=-1)
    return mean(sub(1.0, cos), axis=-1)


def global_features(net: GlobalFeatureNet, img, layer: int = -1) -> Tensor:
    return net(img, layer)


def pdino_per_sample(net: GlobalFeatureNet, a, b, layer: int = -1) -> Tensor:
    a = as_tensor(a)
    b = b.data if isinstance(b, Tensor) else b
    if a.shape != np.shape(b):
        raise DimensionError(f"pdino inputs differ in shape: {a.shape} vs {np.shape(b)}")
    with no_tape():
        fb = net(b, layer)
    return cosine_dissimilarity(net(a, layer), fb)


def pdino_loss(net: GlobalFeatureNet, a, b, cfg: PerceptualConfig | None = None) -> Tensor:
    layer = -1 if cfg is None else cfg.global_layer
    return mean(pdino_per_sample(net, a, b, layer))


def repa_per_sample(hidden, x_clean, proj, net: GlobalFeatureNet, layer: int = -1) -> Tensor:
    with no_tape():
        target = net(x_clean, layer)
    if hidden.shape[1] != target.shape[1]:
        raise DimensionError(f"hidden has {hidden.shape[1]} tokens, target has {target.shape[1]} patches")
    return cosine_dissimilarity(proj(hidden), target)


def repa_loss(hidden, x_clean, proj, net: GlobalFeatureNet, layer: int = -1) -> Tensor:
    return mean(repa_per_sample(hidden, x_clean, proj, net, layer))


def gate(t, tau: float) -> np.ndarray:
    """1.0 where the sample is in the low-noise regime ``t >= tau``, else 0.0."""
    return (np.asarray(t) >= tau).astype(np.float64)


# ------------------------------------------------------------- combined loss


@dataclass
class LossBreakdown:
    total: float
    fm: float
    lpips: float
    pdino: float
    repa: float
    gate_fraction: float
    loss: Tensor | None = field(default=None, repr=False)

    def recombine(self, cfg: PerceptualConfig) -> float:
        return combine(self.fm, self.lpips, self.pdino, self.repa, cfg)

    def as_row(self) -> dict:
        return {"loss_total": self.total, "loss_fm": self.fm, "loss_lpips": self.lpips,
                "loss_pdino": self.pdino, "loss_repa": self.repa, "gate_fraction": self.gate_fraction}


def combine(fm, lpips, pdino, repa, cfg: PerceptualConfig):
    return fm + cfg.lambda1 * lpips + cfg.lambda2 * pdino + cfg.repa_weight * repa


@dataclass
class Extractors:
    local: LocalFeatureNet
    glob: GlobalFeatureNet

    def parameters(self):
        return self.local.parameters() + self.glob.parameters()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.data.tobytes())
        return h.hexdigest()

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"local/{k}": p.data.copy() for k, p in self.local.named_parameters()}
        out.update({f"global/{k}": p.data.copy() for k, p in self.glob.named_parameters()})
        return out

    def load_tensors(self, blob) -> None:
        """Replace the frozen weights, e.g. with externally distilled extractors of the same shape."""
        own = self.state_tensors()
        if set(own) != set(blob):
            raise ConfigError(f"extractor tensors differ: missing {sorted(set(own) - set(blob))[:3]}, "
                              f"unexpected {sorted(set(blob) - set(own))[:3]}")
        params = {f"local/{k}": p for k, p in self.local.named_parameters()}
        params.update({f"global/{k}": p for k, p in self.glob.named_parameters()})
        for k, p in params.items():
            if blob[k].shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {blob[k].shape}")
        for k, p in params.items():
            p.data = np.asarray(blob[k], dtype=p.data.dtype).copy()

    def save(self, path):
        from pixelgen import checkpoint

        return checkpoint.save(path, self.state_tensors())

    def load(self, path) -> "Extractors":
        from pixelgen import checkpoint

        self.load_tensors(checkpoint.load(path))
        return self


def _gated_mean(per_sample_fn, x_pred: Tensor, active: np.ndarray, batch_size: int) -> Tensor | None:
    """Σ over active samples of the per-sample loss, divided by the full batch size.

    Gated-off samples never enter the computation, so their gradient rows
    are exactly zero.
    """
    if active.size == 0:
        return None
    sub_pred = x_pred if active.size == batch_size else take_rows(x_pred, active)
    return mul(tsum(per_sample_fn(sub_pred, active)), 1.0 / batch_size)


def total_loss(x_pred, hidden, batch: DiffusionBatch, cfg: PerceptualConfig,
               nets: Extractors, proj=None) -> LossBreakdown:
    """Flow-matching loss plus gated perceptual terms plus representation alignment."""
    x_pred = as_tensor(x_pred)
    b = x_pred.shape[0]
    g = gate(batch.t, cfg.gate_threshold)
    active = np.flatnonzero(g)
    l_fm = fm_loss(x_pred, batch)
    total = l_fm
    vals = {"lpips": 0.0, "pdino": 0.0, "repa": 0.0}

    if cfg.lambda1 > 0:
        l_lp = _gated_mean(lambda xp, idx: lpips_per_sample(nets.local, xp, batch.x[idx], cfg.layer_weights),
                           x_pred, active, b)
        if l_lp is not None:
            vals["lpips"] = float(l_lp.data)
            total = add(total, mul(l_lp, cfg.lambda1))
    if cfg.lambda2 > 0:
        l_pd = _gated_mean(lambda xp, idx: pdino_per_sample(nets.glob, xp, batch.x[idx], cfg.global_layer),
                           x_pred, active, b)
        if l_pd is not None:
            vals["pdino"] = float(l_pd.data)
            total = add(total, mul(l_pd, cfg.lambda2))
    if cfg.repa_weight > 0 and hidden is not None and proj is not None:
        l_re = repa_loss(hidden, batch.x, proj, nets.glob, cfg.global_layer)
        vals["repa"] = float(l_re.data)
        total = add(total, mul(l_re, cfg.repa_weight))

    return LossBreakdown(float(total.data), float(l_fm.data), vals["lpips"], vals["pdino"], vals["repa"],
                         float(g.mean()), total)
