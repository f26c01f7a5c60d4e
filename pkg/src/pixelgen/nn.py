"""Parameter containers and fused layer ops built on :mod:`pixelgen.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from pixelgen.errors import ConfigError, DimensionError
from pixelgen.tensor import Tensor, _emit, as_tensor, default_dtype, register


class Module:
    """Tree of named parameters; children are found by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key in sorted(vars(self)):
            val = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise ConfigError(f"state is missing parameters: {missing[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Parameter(Tensor):
    """A leaf tensor owned by a :class:`Module`."""

    __slots__ = ()


def parameter(data: np.ndarray, trainable: bool = True) -> Parameter:
    return Parameter(data, requires_grad=trainable)


def normal_init(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(default_dtype())


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, std: float | None = 0.02, bias: bool = True, trainable=True):
        w = np.zeros((d_in, d_out)) if std is None else normal_init(rng, (d_in, d_out), std)
        self.weight = parameter(w, trainable)
        self.bias = parameter(np.zeros(d_out), trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        from pixelgen.tensor import linear

        return linear(x, self.weight, self.bias)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, trainable=True):
        self.gain = parameter(np.ones(dim), trainable)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return rms_norm(x, self.gain, self.eps)


def rms_norm(x, gain=None, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to unit root-mean-square, then scale by ``gain``."""
    x = as_tensor(x)
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * r
    if gain is None:
        return _emit("rms_norm", xhat, (x,), (xhat, r, None))
    gain = as_tensor(gain)
    return _emit("rms_norm", xhat * gain.data, (x, gain), (xhat, r, gain.data))


@register("rms_norm")
def _rms_norm_bw(ctx, g):
    xhat, r, gain = ctx
    gy = g if gain is None else g * gain
    gx = r * (gy - xhat * np.mean(gy * xhat, axis=-1, keepdims=True))
    if gain is None:
        return (gx,)
    gg = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    return gx, gg


def l2_normalize(x, eps: float = 1e-10) -> Tensor:
    """Unit-normalize along the last axis: ``x / (||x|| + eps)``."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    inv = 1.0 / (n + eps)
    y = x.data * inv
    return _emit("l2_normalize", y, (x,), (y, inv, n))


@register("l2_normalize")
def _l2_normalize_bw(ctx, g):
    y, inv, n = ctx
    proj = np.sum(g * y, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(n > 0, 1.0 / (n * inv), 0.0)
    return (inv * (g - y * proj * coef),)
