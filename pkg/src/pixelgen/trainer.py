"""Optimizer, EMA, the training step and the run loop with checkpoint/resume."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from pixelgen import checkpoint, data
from pixelgen import rng as rngmod
from pixelgen.denoiser import Denoiser, DenoiserConfig
from pixelgen.errors import ConfigError, DimensionError, FormatError, NumericalError
from pixelgen.flow import DENOM_CLIP, DiffusionBatch, TimeSamplerConfig, sample_time_keyed
from pixelgen.perception import Extractors, LossBreakdown, PerceptualConfig, total_loss
from pixelgen.samplers import SamplerConfig, sample
from pixelgen.tensor import Tape

log = logging.getLogger(__name__)

METRICS_HEADER = "step,loss_total,loss_fm,loss_lpips,loss_pdino,loss_repa,grad_norm,gate_fraction"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    adam_eps: float = 1e-8
    ema_decay: float = 0.9999
    grad_clip: float = 1.0
    batch_size: int = 32
    train_steps: int = 2000
    seed: int = 0
    dataset_seed: int = 0
    epoch_size: int = 4096
    denom_clip: float = DENOM_CLIP
    time_sampler: TimeSamplerConfig = field(default_factory=TimeSamplerConfig)
    checkpoint_every: int = 500
    sample_every: int = 500
    threads: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError(f"ema decay must lie in [0, 1), got {self.ema_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.train_steps < 0:
            raise ConfigError(f"train_steps must be >= 0, got {self.train_steps}")
        if not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **hyper) -> "OptimizerState":
        m = {k: np.zeros_like(_array(p)) for k, p in params.items()}
        v = {k: np.zeros_like(_array(p)) for k, p in params.items()}
        return cls(m, v, **hyper)


def _array(p) -> np.ndarray:
    return p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p


def adamw_update(params: Mapping, grads: Mapping[str, np.ndarray], state: OptimizerState):
    """One bias-corrected Adam step with decoupled weight decay, applied in place.

    ``params`` maps names to tensors (or arrays); returns the same mapping.
    """
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        w = _array(p)
        g = grads[name]
        if g.shape != w.shape or state.m[name].shape != w.shape:
            raise DimensionError(f"{name}: param {w.shape}, grad {g.shape}, moment {state.m[name].shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            w -= (state.lr * state.weight_decay) * w
        w -= state.lr * step
    return params


# ------------------------------------------------------------------------ ema


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float = 0.9999

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ConfigError(f"ema decay must lie in [0, 1), got {self.decay}")

    @classmethod
    def from_params(cls, params: Mapping, decay: float = 0.9999) -> "EmaState":
        return cls({k: _array(p).copy() for k, p in params.items()}, decay)


def ema_update(ema: EmaState, params: Mapping) -> EmaState:
    d = ema.decay
    for name, p in params.items():
        s = ema.shadow[name]
        w = _array(p)
        if s.shape != w.shape:
            raise DimensionError(f"{name}: shadow {s.shape} vs param {w.shape}")
        s *= d
        s += (1.0 - d) * w
    return ema


# ------------------------------------------------------------------- clipping


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in sorted(grads))))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``max_norm / norm`` if the global norm exceeds it.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------- train step


@dataclass
class StepResult:
    step: int
    breakdown: LossBreakdown
    grad_norm: float

    def csv_row(self) -> str:
        b = self.breakdown
        vals = [b.total, b.fm, b.lpips, b.pdino, b.repa, self.grad_norm, b.gate_fraction]
        return ",".join([str(self.step)] + [repr(float(v)) for v in vals])


def make_batch(images: np.ndarray, labels: np.ndarray, step: int, cfg: TrainConfig) -> DiffusionBatch:
    """Draw t and noise for each sample from streams keyed by (seed, step, slot)."""
    idx = range(len(images))
    t = sample_time_keyed(cfg.seed, step, idx, cfg.time_sampler)
    eps = rngmod.per_index_normal(cfg.seed, "noise", step, idx, images.shape[1:]).astype(images.dtype)
    return DiffusionBatch.build(images, eps, t, cfg.denom_clip, labels)


def compute_loss(model: Denoiser, batch: DiffusionBatch, labels: np.ndarray, pcfg: PerceptualConfig,
                 nets: Extractors) -> LossBreakdown:
    out = model(batch.x_t, batch.t, labels)
    return total_loss(out.x_pred, out.hidden, batch, pcfg, nets, model.repa_proj)


def train_step(model: Denoiser, images: np.ndarray, labels: np.ndarray, step: int, pcfg: PerceptualConfig,
               opt: OptimizerState, ema: EmaState, nets: Extractors, cfg: TrainConfig) -> StepResult:
    """Sample t and noise, predict, compute the combined loss, backprop, clip, update, average."""
    batch = make_batch(images, labels, step, cfg)
    dropped = model.drop_labels(labels, cfg.seed, step, range(len(labels)))
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        br = compute_loss(model, batch, dropped, pcfg, nets)
    parts = (br.total, br.fm, br.lpips, br.pdino, br.repa)
    if not all(np.isfinite(parts)):
        raise NumericalError(f"non-finite loss at step {step}: {br}")
    tape.backward(br.loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()
             if p.requires_grad}
    grads, norm = clip_grad_norm(grads, cfg.grad_clip)
    if not np.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm at step {step}: {br}")
    trainable = {k: params[k] for k in grads}
    adamw_update(trainable, grads, opt)
    ema_update(ema, trainable)
    for p in params.values():
        p.grad = None
    br.loss = None
    return StepResult(step, br, norm)


# ---------------------------------------------------------------- trainer


class Trainer:
    """Owns the model, optimizer and EMA for one run."""

    def __init__(self, model_cfg: DenoiserConfig, pcfg: PerceptualConfig, cfg: TrainConfig,
                 nets: Extractors | None = None, meta: dict | None = None):
        self.model_cfg, self.pcfg, self.cfg = model_cfg, pcfg, cfg
        self.model = Denoiser(model_cfg)
        self.nets = nets if nets is not None else default_extractors()
        trainable = {k: p for k, p in self.model.named_parameters() if p.requires_grad}
        self.opt = OptimizerState.zeros_like(trainable, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                                             weight_decay=cfg.weight_decay, eps=cfg.adam_eps)
        self.ema = EmaState.from_params(trainable, cfg.ema_decay)
        self.step = 0
        self.meta = dict(meta or {})
        self._extractor_sum = self.nets.checksum()

    def run(self, steps: int, on_step: Callable[[StepResult], None] | None = None) -> list[StepResult]:
        results = []
        it = data.batch_iter(self.cfg.dataset_seed, self.cfg.batch_size, self.cfg.seed, self.cfg.epoch_size,
                             start_step=self.step, threads=self.cfg.threads)
        for _ in range(steps):
            step, images, labels = next(it)
            res = train_step(self.model, images, labels, step, self.pcfg, self.opt, self.ema, self.nets, self.cfg)
            self.step = step + 1
            results.append(res)
            if on_step is not None:
                on_step(res)
        if self.nets.checksum() != self._extractor_sum:
            raise NumericalError("frozen extractor weights changed during training")
        return results

    def ema_model(self) -> Denoiser:
        m = Denoiser(self.model_cfg)
        state = self.model.state_dict()
        state.update(self.ema.shadow)
        m.load_state_dict(state)
        return m

    # ---- checkpoint state

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        out.update({f"ema/{k}": v for k, v in self.ema.shadow.items()})
        out.update({f"opt/m/{k}": v for k, v in self.opt.m.items()})
        out.update({f"opt/v/{k}": v for k, v in self.opt.v.items()})
        out["meta/step"] = np.array([self.step], dtype=np.int64)
        out["meta/opt_step"] = np.array([self.opt.step], dtype=np.int64)
        out.update(_meta_tensors(self.meta))
        return out

    def load_tensors(self, blob: Mapping[str, np.ndarray]) -> None:
        """Restore from :meth:`state_tensors` output; validates everything before mutating."""
        model_state = _strip(blob, "model/")
        ema = _strip(blob, "ema/")
        m, v = _strip(blob, "opt/m/"), _strip(blob, "opt/v/")
        if "meta/step" not in blob or "meta/opt_step" not in blob:
            raise FormatError("checkpoint lacks training state (meta/step)")
        own = dict(self.model.named_parameters())
        for name, group in (("ema", ema), ("opt/m", m), ("opt/v", v)):
            if set(group) != set(self.ema.shadow):
                raise FormatError(f"checkpoint {name} tensors do not match the model")
            for k, arr in group.items():
                if arr.shape != own[k].shape:
                    raise DimensionError(f"{name}/{k}: expected {own[k].shape}, got {arr.shape}")
        self.model.load_state_dict(model_state)
        self.ema.shadow = {k: a.copy() for k, a in ema.items()}
        self.opt.m = {k: a.copy() for k, a in m.items()}
        self.opt.v = {k: a.copy() for k, a in v.items()}
        self.step = int(blob["meta/step"][0])
        self.opt.step = int(blob["meta/opt_step"][0])

    def save(self, path) -> Path:
        return save_checkpoint(path, self)

    def save_ema(self, path) -> Path:
        out = {f"model/{k}": v for k, v in self.ema_model().state_dict().items()}
        out["meta/step"] = np.array([self.step], dtype=np.int64)
        out.update(_meta_tensors(self.meta))
        return checkpoint.save(path, out)


def _strip(blob: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in blob.items() if k.startswith(prefix)}


def _meta_tensors(meta: dict) -> dict[str, np.ndarray]:
    if not meta:
        return {}
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return {"meta/config": np.frombuffer(raw, dtype=np.uint8).copy()}


def read_meta(blob: Mapping[str, np.ndarray]) -> dict:
    if "meta/config" not in blob:
        return {}
    return json.loads(blob["meta/config"].tobytes().decode("utf-8"))


def save_checkpoint(path, trainer: Trainer) -> Path:
    return checkpoint.save(path, trainer.state_tensors())


def load_checkpoint(path, trainer: Trainer) -> Trainer:
    trainer.load_tensors(checkpoint.load(path))
    return trainer


def load_model(path, model_cfg: DenoiserConfig) -> Denoiser:
    """Build a denoiser from the ``model/`` tensors of any checkpoint."""
    blob = checkpoint.load(path)
    model = Denoiser(model_cfg)
    model.load_state_dict(_strip(blob, "model/"))
    return model


def default_extractors(local_seed: int = 1, global_seed: int = 2) -> Extractors:
    from pixelgen.perception import GlobalFeatureNet, LocalFeatureNet

    return Extractors(LocalFeatureNet(seed=local_seed), GlobalFeatureNet(seed=global_seed))


# ---------------------------------------------------------------- run loop


def preview_grid(model: Denoiser, seed: int, per_class: int = 2) -> np.ndarray:
    classes = np.repeat(np.arange(model.cfg.num_classes), per_class)
    return sample(model, len(classes), classes, SamplerConfig(solver="euler", steps=25), seed)


def run(trainer: Trainer, out_dir, steps: int | None = None, resume: bool = False) -> list[StepResult]:
    """Train to ``steps`` total, writing metrics.csv, periodic checkpoints and preview grids.

    With ``resume`` the run continues from ``out_dir/final.ckpt`` and appends to the CSV.
    """
    cfg = trainer.cfg
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total = cfg.train_steps if steps is None else steps
    metrics_path = out / "metrics.csv"
    if resume:
        load_checkpoint(out / "final.ckpt", trainer)
        _truncate_metrics(metrics_path, trainer.step)
    else:
        metrics_path.write_text(METRICS_HEADER + "\n")
    remaining = max(total - trainer.step, 0)
    t0 = time.perf_counter()

    with metrics_path.open("a") as fh:

        def on_step(res: StepResult) -> None:
            fh.write(res.csv_row() + "\n")
            done = res.step + 1
            if done % 100 == 0:
                fh.flush()
                log.info("step %d loss %.5f fm %.5f (%.1fs)", done, res.breakdown.total,
                         res.breakdown.fm, time.perf_counter() - t0)
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < total:
                trainer.save(out / f"step_{done}.ckpt")
            if cfg.sample_every and done % cfg.sample_every == 0:
                data.write_image_grid(preview_grid(trainer.ema_model(), cfg.seed), out / f"samples_{done}.ppm",
                                      columns=trainer.model_cfg.num_classes)

        results = trainer.run(remaining, on_step)

    trainer.save(out / "final.ckpt")
    trainer.save_ema(out / "ema.ckpt")
    if not (out / f"samples_{trainer.step}.ppm").exists():
        data.write_image_grid(preview_grid(trainer.ema_model(), cfg.seed), out / f"samples_{trainer.step}.ppm",
                              columns=trainer.model_cfg.num_classes)
    return results


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop CSV rows at or beyond ``step`` so a resumed run rewrites them."""
    if not path.exists():
        path.write_text(METRICS_HEADER + "\n")
        return
    lines = path.read_text().splitlines()
    keep = [lines[0]] + [ln for ln in lines[1:] if ln and int(ln.split(",", 1)[0]) < step]
    path.write_text("\n".join(keep) + "\n")


def config_dict(model_cfg: DenoiserConfig, pcfg: PerceptualConfig, cfg: TrainConfig) -> dict:
    return {"model": asdict(model_cfg), "perceptual": asdict(pcfg), "train": asdict(cfg)}
