"""Self-checks run by ``pixelgen check``: gradients, solver orders, invariants."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from pixelgen import tensor as T
from pixelgen.denoiser import Denoiser, DenoiserConfig, _select, rope2d
from pixelgen.flow import DiffusionBatch, TimeSamplerConfig, fm_loss, sample_time, velocity_space_loss, x_to_v
from pixelgen.nn import l2_normalize, rms_norm
from pixelgen.perception import Extractors, GlobalFeatureNet, LocalFeatureNet, PerceptualConfig, total_loss
from pixelgen.samplers import SamplerConfig, guided_velocity, integrate, timeshift_grid
from pixelgen.tensor import Tensor, precision

OP_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# ---------------------------------------------------------------- op probes


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _std(rng, shape):
    return rng.standard_normal(shape)


def _clamp_input(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, x + 0.2, x)  # keep away from the kink at 0


# op name -> (input generators, forward)
OP_PROBES: dict[str, tuple[tuple[Callable, ...], Callable]] = {
    "add": ((lambda r: _std(r, (3, 4)), lambda r: _std(r, (4,))), T.add),
    "sub": ((lambda r: _std(r, (3, 4)), lambda r: _std(r, (3, 1))), T.sub),
    "mul": ((lambda r: _std(r, (3, 4)), lambda r: _std(r, (1, 4))), T.mul),
    "div": ((lambda r: _std(r, (3, 4)), lambda r: _pos(r, (3, 4))), T.div),
    "neg": ((lambda r: _std(r, (5,)),), T.neg),
    "exp": ((lambda r: _std(r, (5,)),), T.exp),
    "log": ((lambda r: _pos(r, (5,)),), T.log),
    "sqrt": ((lambda r: _pos(r, (5,)),), T.sqrt),
    "square": ((lambda r: _std(r, (5,)),), T.square),
    "sigmoid": ((lambda r: 3 * _std(r, (6,)),), T.sigmoid),
    "silu": ((lambda r: 3 * _std(r, (6,)),), T.silu),
    "gelu_tanh": ((lambda r: 3 * _std(r, (6,)),), T.gelu_tanh),
    "clamp_min": ((lambda r: _clamp_input(r, (8,)),), lambda a: T.clamp_min(a, 0.0)),
    "sum": ((lambda r: _std(r, (2, 3, 4)),), lambda a: T.sum(a, axis=(0, 2), keepdims=True)),
    "mean": ((lambda r: _std(r, (2, 3, 4)),), lambda a: T.mean(a, axis=1)),
    "softmax": ((lambda r: _std(r, (2, 5)),), lambda a: T.softmax(a, axis=-1)),
    "matmul": ((lambda r: _std(r, (2, 3, 4)), lambda r: _std(r, (2, 4, 5))), T.matmul),
    "linear": ((lambda r: _std(r, (2, 3, 4)), lambda r: _std(r, (4, 5)), lambda r: _std(r, (5,))), T.linear),
    "reshape": ((lambda r: _std(r, (2, 6)),), lambda a: T.reshape(a, (3, 4))),
    "transpose": ((lambda r: _std(r, (2, 3, 4)),), lambda a: T.transpose(a, (2, 0, 1))),
    "take_rows": ((lambda r: _std(r, (4, 3)),), lambda a: T.take_rows(a, np.array([2, 0, 2, 3]))),
    "concat": ((lambda r: _std(r, (2, 3)), lambda r: _std(r, (1, 3))), lambda a, b: T.concat([a, b], axis=0)),
    "conv2d": ((lambda r: _std(r, (2, 2, 5, 5)), lambda r: _std(r, (3, 2, 3, 3)), lambda r: _std(r, (3,))),
               lambda x, k, b: T.conv2d(x, k, stride=2, bias=b)),
    "rope2d": ((lambda r: _std(r, (2, 4, 8)),), lambda a: rope2d(a, 2)),
    "select": ((lambda r: _std(r, (3, 2, 4)),), lambda a: _select(a, 1)),
    "rms_norm": ((lambda r: _std(r, (3, 6)), lambda r: _pos(r, (6,))), rms_norm),
    "l2_normalize": ((lambda r: _std(r, (3, 6)),), lambda a: l2_normalize(a, 1e-10)),
}


def op_gradient_error(name: str, seed: int = 0) -> float:
    """Max relative finite-difference error of op ``name`` over all of its inputs."""
    gens, fwd = OP_PROBES[name]
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        inputs = [g(rng) for g in gens]
        out_shape = fwd(*[Tensor(a) for a in inputs]).shape
        weights = Tensor(rng.standard_normal(out_shape))
        worst = 0.0
        for i in range(len(inputs)):

            def f(xi, i=i):
                args = [xi if j == i else Tensor(a) for j, a in enumerate(inputs)]
                return T.sum(T.mul(fwd(*args), weights))

            worst = max(worst, T.finite_diff_check(f, Tensor(inputs[i])))
    return worst


def check_ops(tol: float = OP_TOL) -> list[CheckResult]:
    results = []
    for name in sorted(T.BACKWARD_RULES):
        if name not in OP_PROBES:
            results.append(CheckResult(f"grad[{name}]", False, "no finite-difference probe registered"))
            continue
        err = op_gradient_error(name)
        results.append(CheckResult(f"grad[{name}]", bool(err < tol), f"max rel err {err:.2e} (tol {tol:.0e})"))
    return results


# -------------------------------------------------------- full objective


def toy_objective(seed: int = 0):
    """A d=8, depth-1 denoiser on a 2×3×8×8 batch with every loss term active.

    Must be called under 64-bit precision. Returns ``(model, loss_fn)``.
    """
    cfg = DenoiserConfig(image_size=8, patch_size=4, width=8, depth=1, heads=2, repa_tap=0, seed=seed)
    model = Denoiser(cfg)
    rng = np.random.default_rng(seed)
    # the zero-initialized head would block every gradient path but the alignment one
    model.head.weight.data = rng.standard_normal(model.head.weight.shape) * 0.1
    nets = Extractors(LocalFeatureNet(widths=(4, 8), seed=1), GlobalFeatureNet(seed=2))
    x = np.clip(rng.standard_normal((2, 3, 8, 8)) * 0.5, -1, 1)
    eps = rng.standard_normal((2, 3, 8, 8))
    batch = DiffusionBatch.build(x, eps, np.array([0.45, 0.8]))
    pcfg = PerceptualConfig(gate_threshold=0.3)
    labels = np.array([1, 3])

    def loss():
        out = model(batch.x_t, batch.t, labels)
        return total_loss(out.x_pred, out.hidden, batch, pcfg, nets, model.repa_proj).loss

    return model, loss


def check_model_gradient(tol: float = MODEL_TOL) -> CheckResult:
    t0 = time.perf_counter()
    with precision(np.float64):
        model, loss = toy_objective()
        err, worst = T.param_finite_diff_check(loss, model.named_parameters())
    dt = time.perf_counter() - t0
    return CheckResult("grad[full objective]", bool(err < tol),
                       f"max rel err {err:.2e} at {worst or '-'} over {model.num_parameters()} params ({dt:.1f}s)")


# ------------------------------------------------------------ solver order


def solver_error(solver: str, n: int) -> float:
    """|x(1) - e^{-1}| for dx/dt = -x, x(0) = 1 on a uniform n-step grid."""
    x1 = integrate(lambda x, t: -x, np.array([1.0]), timeshift_grid(n), solver)
    return float(abs(x1[0] - np.exp(-1.0)))


def measured_order(solver: str, n: int = 32, reference_steps: int = 100_000) -> float:
    ref = integrate(lambda x, t: -x, np.array([1.0]), timeshift_grid(reference_steps), "heun")[0]
    e1 = abs(integrate(lambda x, t: -x, np.array([1.0]), timeshift_grid(n), solver)[0] - ref)
    e2 = abs(integrate(lambda x, t: -x, np.array([1.0]), timeshift_grid(2 * n), solver)[0] - ref)
    return float(np.log2(e1 / e2))


def check_solver_orders() -> list[CheckResult]:
    expected = {"euler": 1.0, "heun": 2.0, "adams2": 2.0}
    out = []
    for solver, p in expected.items():
        q = measured_order(solver)
        out.append(CheckResult(f"order[{solver}]", bool(abs(q - p) <= 0.4), f"measured {q:.3f}, expected {p}±0.4"))
    return out


# --------------------------------------------------------------- invariants


def check_invariants(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    with precision(np.float64):
        # x-space loss equals velocity-space loss
        x = rng.uniform(-1, 1, (4, 3, 8, 8))
        eps = rng.standard_normal(x.shape)
        t = rng.uniform(0, 1, 4)
        b = DiffusionBatch.build(x, eps, t)
        xp = Tensor(rng.uniform(-1, 1, x.shape))
        gap = abs(float(fm_loss(xp, b).data)
                  - float(velocity_space_loss(x_to_v(xp, b.x_t, t), b.velocity_target()).data))
        out.append(CheckResult("fm x/v identity", gap < 1e-6, f"gap {gap:.1e}"))

        # gating: with every t below tau the perceptual terms contribute nothing
        model, _ = toy_objective(seed)
        nets = Extractors(LocalFeatureNet(widths=(4, 8), seed=1), GlobalFeatureNet(seed=2))
        xs = np.clip(rng.standard_normal((3, 3, 8, 8)) * 0.5, -1, 1)
        lo = DiffusionBatch.build(xs, rng.standard_normal(xs.shape), rng.uniform(0, 0.29, 3))
        xp_full = Tensor(rng.uniform(-1, 1, xs.shape), requires_grad=True)
        with T.Tape() as tape:
            tape.backward(total_loss(xp_full, None, lo, PerceptualConfig(repa_weight=0), nets).loss)
        xp_fm = Tensor(xp_full.data.copy(), requires_grad=True)
        with T.Tape() as tape:
            tape.backward(fm_loss(xp_fm, lo))
        same = bool(np.array_equal(xp_full.grad, xp_fm.grad))
        out.append(CheckResult("noise gating exact", same, "gradient identical to FM-only" if same else "differs"))

    # guidance outside its interval returns the conditional velocity untouched
    vc, vu = rng.standard_normal(5), rng.standard_normal(5)
    cfg = SamplerConfig(cfg_scale=2.25)
    ok = all(guided_velocity(vc, vu, tt, cfg) is vc for tt in (0.0, 0.05, 0.95, 1.0))
    out.append(CheckResult("cfg interval", ok, "conditional velocity outside [lo, hi]"))

    # logit-normal time sampler moments
    ts = sample_time(100_000, TimeSamplerConfig(), np.random.default_rng(seed))
    z = np.log(ts / (1 - ts))
    ok = abs(z.mean() + 0.8) < 0.01 and abs(z.std() - 0.8) < 0.01
    out.append(CheckResult("logit-normal moments", bool(ok), f"mean {z.mean():.4f}, std {z.std():.4f}"))

    from pixelgen import checkpoint

    blob = {"a": rng.standard_normal((3, 2)).astype(np.float32), "b": np.arange(5, dtype=np.int64)}
    back = checkpoint.decode(checkpoint.encode(blob))
    ok = all(np.array_equal(blob[k], back[k]) and blob[k].dtype == back[k].dtype for k in blob)
    out.append(CheckResult("checkpoint round trip", ok, "bitwise" if ok else "mismatch"))
    return out


def run_all(include_model: bool = True) -> list[CheckResult]:
    results = check_ops()
    if include_model:
        results.append(check_model_gradient())
    results += check_solver_orders()
    results += check_invariants()
    return results
