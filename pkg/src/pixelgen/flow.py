"""Linear-interpolation diffusion process and the x-prediction flow-matching loss.

Time runs from pure noise at ``t = 0`` to the clean image at ``t = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pixelgen import rng as rngmod
from pixelgen.errors import ConfigError, ContractError, DimensionError
from pixelgen.tensor import Tensor, as_tensor, clamp_min, mean, square

DENOM_CLIP = 0.05


@dataclass(frozen=True)
class TimeSamplerConfig:
    kind: str = "logit_normal"
    mu: float = -0.8
    sigma: float = 0.8

    def __post_init__(self):
        if self.kind not in ("logit_normal", "uniform"):
            raise ConfigError(f"unknown time sampler kind {self.kind!r}")
        if not self.sigma > 0:
            raise ConfigError(f"time sampler sigma must be positive, got {self.sigma}")


def sample_time(n: int, cfg: TimeSamplerConfig, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ContractError(f"need at least one time sample, got n={n}")
    if cfg.kind == "uniform":
        return rng.random(n)
    z = rng.normal(cfg.mu, cfg.sigma, size=n)
    return 1.0 / (1.0 + np.exp(-z))


def sample_time_keyed(seed: int, step: int, indices, cfg: TimeSamplerConfig) -> np.ndarray:
    """One time per sample index, each from its own (seed, step, index) stream."""
    return np.array([sample_time(1, cfg, rngmod.stream(seed, "time", step, i))[0] for i in indices])


def _per_sample(t, ndim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def interpolate(x: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    if x.shape != eps.shape:
        raise DimensionError(f"image/noise shape mismatch: {x.shape} vs {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ContractError("interpolation time must lie in [0, 1]")
    tb = _per_sample(t_arr, x.ndim).astype(x.dtype)
    return tb * x + (1 - tb) * eps


def gt_velocity(x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    if x.shape != eps.shape:
        raise DimensionError(f"image/noise shape mismatch: {x.shape} vs {eps.shape}")
    return x - eps


@dataclass
class DiffusionBatch:
    x: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v: np.ndarray
    denom_clip: float = DENOM_CLIP
    labels: np.ndarray | None = None

    @classmethod
    def build(cls, x, eps, t, denom_clip: float = DENOM_CLIP, labels=None) -> "DiffusionBatch":
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if t.shape[0] != x.shape[0]:
            raise DimensionError(f"{t.shape[0]} times for a batch of {x.shape[0]}")
        return cls(x, eps, t, interpolate(x, eps, t), gt_velocity(x, eps), denom_clip, labels)

    def denominator(self) -> np.ndarray:
        """Per-sample ``max(1 - t, clip)`` shaped to broadcast against images."""
        d = np.maximum(1.0 - self.t, self.denom_clip)
        return _per_sample(d, self.x.ndim).astype(self.x.dtype)

    def velocity_target(self) -> np.ndarray:
        """``(x - x_t) / max(1 - t, clip)``; equals ``v`` wherever the clip is inactive."""
        return (self.x - self.x_t) / self.denominator()


def x_to_v(x_pred, x_t, t, denom_clip: float = DENOM_CLIP) -> Tensor:
    """Convert an image prediction into a velocity: ``(x_pred - x_t) / max(1 - t, clip)``."""
    if not denom_clip > 0:
        raise ContractError(f"denominator clip must be positive, got {denom_clip}")
    x_pred = as_tensor(x_pred)
    if x_pred.shape != np.shape(x_t):
        raise DimensionError(f"prediction {x_pred.shape} vs noisy image {np.shape(x_t)}")
    one_minus_t = Tensor(1.0 - _per_sample(t, x_pred.ndim))
    denom = clamp_min(one_minus_t, denom_clip)
    return (x_pred - Tensor(x_t)) / denom


def fm_loss(x_pred, batch: DiffusionBatch) -> Tensor:
    """Mean over batch, channels and pixels of ``((x_pred - x) / max(1 - t, clip))**2``."""
    per_sample = fm_loss_per_sample(x_pred, batch)
    return mean(per_sample)


def fm_loss_per_sample(x_pred, batch: DiffusionBatch) -> Tensor:
    x_pred = as_tensor(x_pred)
    if x_pred.shape != batch.x.shape:
        raise DimensionError(f"prediction {x_pred.shape} vs images {batch.x.shape}")
    diff = (x_pred - Tensor(batch.x)) / Tensor(batch.denominator())
    return mean(square(diff), axis=tuple(range(1, x_pred.ndim)))


def velocity_space_loss(v_pred, v_target) -> Tensor:
    """Mean squared velocity error, the form the x-space loss must agree with."""
    return mean(square(as_tensor(v_pred) - Tensor(v_target)))


def v_to_eps(v_pred: np.ndarray, x_t: np.ndarray, t) -> np.ndarray:
    """Noise implied by a velocity at time ``t`` (diagnostic only): ``x_t - t * v``."""
    return x_t - _per_sample(t, x_t.ndim) * v_pred
