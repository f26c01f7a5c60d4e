"""Deterministic ODE samplers integrating from noise (t=0) to image (t=1).

The integrators take a plain velocity callable ``v(x, t)`` so they can be
checked against analytic ODEs; :func:`sample` binds that callable to a
denoiser through :func:`velocity_at`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from pixelgen import rng as rngmod
from pixelgen.errors import ConfigError, ContractError
from pixelgen.flow import DENOM_CLIP, x_to_v
from pixelgen.tensor import default_dtype, no_tape

VelocityFn = Callable[[np.ndarray, float], np.ndarray]

SOLVERS = ("euler", "heun", "adams2")


@dataclass(frozen=True)
class SamplerConfig:
    solver: str = "euler"
    steps: int = 50
    timeshift: float = 1.0
    cfg_scale: float = 1.0
    cfg_interval: tuple[float, float] = (0.1, 0.9)
    denom_clip: float = DENOM_CLIP
    shift_toward: str = "clean"

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if self.steps < 1 or (self.solver == "adams2" and self.steps < 2):
            raise ConfigError(f"{self.solver} needs more steps than {self.steps}")
        if self.timeshift < 1:
            raise ConfigError(f"timeshift must be >= 1, got {self.timeshift}")
        if self.cfg_scale < 1:
            raise ConfigError(f"cfg scale must be >= 1, got {self.cfg_scale}")
        lo, hi = self.cfg_interval
        if not 0 <= lo < hi <= 1:
            raise ConfigError(f"cfg interval must satisfy 0 <= lo < hi <= 1, got {self.cfg_interval}")
        if self.shift_toward not in ("clean", "noise"):
            raise ConfigError(f"shift_toward must be 'clean' or 'noise', got {self.shift_toward!r}")


def timeshift_grid(n: int, s: float = 1.0, toward: str = "clean") -> np.ndarray:
    """``t_i = s·u / (1 + (s-1)·u)`` on ``u_i = i/n``.

    ``toward="noise"`` mirrors the map (``1 - shift(1 - u)``), packing steps
    near the noise end instead.
    """
    if n < 1:
        raise ConfigError(f"grid needs at least one step, got {n}")
    if s < 1:
        raise ConfigError(f"timeshift must be >= 1, got {s}")
    u = np.arange(n + 1) / n
    if toward == "noise":
        w = 1.0 - u
        t = 1.0 - s * w / (1.0 + (s - 1.0) * w)
    else:
        t = s * u / (1.0 + (s - 1.0) * u)
    t[0], t[-1] = 0.0, 1.0
    return t


def guided_velocity(v_cond, v_uncond, t: float, cfg: SamplerConfig):
    lo, hi = cfg.cfg_interval
    if cfg.cfg_scale == 1.0 or not lo <= t <= hi:
        return v_cond
    return v_uncond + cfg.cfg_scale * (v_cond - v_uncond)


def velocity_at(model, x: np.ndarray, t: float, c, cfg: SamplerConfig) -> np.ndarray:
    """Velocity of the (optionally guided) model at a shared time ``t``."""
    lo, hi = cfg.cfg_interval
    with no_tape():
        if cfg.cfg_scale != 1.0 and lo <= t <= hi:
            cond, uncond = model.forward_cfg_pair(x, t, c)
            v_c = x_to_v(cond.x_pred, x, t, cfg.denom_clip).data
            v_u = x_to_v(uncond.x_pred, x, t, cfg.denom_clip).data
            return guided_velocity(v_c, v_u, t, cfg)
        out = model.forward(x, t, c)
        return x_to_v(out.x_pred, x, t, cfg.denom_clip).data


def euler_step(x, v, h: float):
    return x + h * v


def heun_step(velocity: VelocityFn, x, t: float, t_next: float, v_t=None, final: bool = False):
    """Predictor-corrector step; ``final=True`` keeps only the Euler predictor."""
    h = t_next - t
    v0 = velocity(x, t) if v_t is None else v_t
    x_pred = x + h * v0
    if final:
        return x_pred
    v1 = velocity(x_pred, t_next)
    return x + (0.5 * h) * (v0 + v1)


def adams2_step(x, v_n, v_prev, h_n: float, h_prev: float):
    """Variable-step two-step Adams-Bashforth."""
    if not h_prev > 0:
        raise ContractError(f"previous step size must be positive, got {h_prev}")
    r = h_n / (2.0 * h_prev)
    return x + h_n * ((1.0 + r) * v_n - r * v_prev)


def integrate(velocity: VelocityFn, x0, grid: np.ndarray, solver: str):
    """Integrate ``dx/dt = velocity(x, t)`` across ``grid`` with the given solver."""
    x = x0
    v_prev, h_prev = None, None
    n = len(grid) - 1
    for i in range(n):
        t, t_next = float(grid[i]), float(grid[i + 1])
        h = t_next - t
        if solver == "euler":
            x = euler_step(x, velocity(x, t), h)
        elif solver == "heun":
            x = heun_step(velocity, x, t, t_next, final=(i == n - 1))
        elif solver == "adams2":
            v = velocity(x, t)
            x = euler_step(x, v, h) if v_prev is None else adams2_step(x, v, v_prev, h, h_prev)
            v_prev, h_prev = v, h
        else:
            raise ConfigError(f"unknown solver {solver!r}")
    return x


def initial_noise(seed: int, n: int, shape: tuple, dtype=np.float32, start: int = 0) -> np.ndarray:
    return rngmod.per_index_normal(seed, "sample_noise", 0, range(start, start + n), shape).astype(dtype)


def sample(model, n_images: int, classes, cfg: SamplerConfig, seed: int, *, clamp: bool = True,
           start: int = 0) -> np.ndarray:
    """Generate ``n_images`` by integrating the model's velocity field.

    Image ``i`` starts from the noise stream keyed by ``start + i``, so any
    split of a request into chunks yields identical pixels.
    """
    mc = model.cfg
    shape = (mc.channels, mc.image_size, mc.image_size)
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (n_images,)).copy()
    x0 = initial_noise(seed, n_images, shape, default_dtype(), start)
    grid = timeshift_grid(cfg.steps, cfg.timeshift, cfg.shift_toward)
    x = integrate(lambda x, t: velocity_at(model, x, t, classes, cfg), x0, grid, cfg.solver)
    return np.clip(x, -1.0, 1.0) if clamp else x


def expected_evaluations(cfg: SamplerConfig) -> int:
    """Model forward calls used by :func:`sample` (CFG doubling included)."""
    grid = timeshift_grid(cfg.steps, cfg.timeshift, cfg.shift_toward)
    times = list(grid[:-1])
    if cfg.solver == "heun":
        times += list(grid[1:-1])
    lo, hi = cfg.cfg_interval
    guided = cfg.cfg_scale != 1.0
    return int(sum(2 if guided and lo <= t <= hi else 1 for t in times))
