"""Flat ``key = value`` run configuration.

Every knob has a default and a one-line description. A file sets any subset
of keys; ``--key value`` command-line overrides win over the file, and
``PIXELGEN_SEED`` supplies the seed when neither sets it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from pixelgen.errors import ConfigError


@dataclass(frozen=True)
class Knob:
    default: Any
    doc: str
    choices: tuple | None = None


KNOBS: dict[str, Knob] = {
    # objective
    "lambda1": Knob(0.1, "weight of the local (multi-level conv) perceptual loss"),
    "lambda2": Knob(0.01, "weight of the global (patch cosine) perceptual loss"),
    "gate_threshold": Knob(0.3, "perceptual losses apply only to samples with t >= this"),
    "repa_weight": Knob(0.5, "weight of the hidden-feature alignment loss"),
    "repa_tap": Knob(-1, "block whose output is aligned (-1 = depth // 2)"),
    "global_layer": Knob(-1, "stage of the global extractor used for features (-1 = last)"),
    # time sampling and parameterization
    "time_sampler": Knob("logit_normal", "training time distribution", ("logit_normal", "uniform")),
    "time_mu": Knob(-0.8, "mean of logit(t)"),
    "time_sigma": Knob(0.8, "std of logit(t)"),
    "denom_clip": Knob(0.05, "lower clip of (1 - t) in the velocity conversion"),
    # model
    "patch_size": Knob(4, "denoiser patch size"),
    "width": Knob(64, "denoiser hidden width"),
    "depth": Knob(4, "number of transformer blocks"),
    "heads": Knob(4, "attention heads"),
    "class_drop_prob": Knob(0.1, "probability of replacing a label by the null class"),
    "model_seed": Knob(0, "denoiser initialization seed"),
    # frozen extractors
    "local_seed": Knob(1, "seed of the local perceptual extractor"),
    "global_seed": Knob(2, "seed of the global perceptual extractor"),
    "eval_extractor_seed": Knob(7, "seed of the evaluation feature extractor"),
    # optimization
    "lr": Knob(1e-4, "AdamW learning rate (constant)"),
    "beta1": Knob(0.9, "AdamW beta1"),
    "beta2": Knob(0.999, "AdamW beta2"),
    "weight_decay": Knob(0.0, "AdamW decoupled weight decay"),
    "adam_eps": Knob(1e-8, "AdamW epsilon"),
    "ema_decay": Knob(0.9999, "EMA decay of the sampling weights"),
    "grad_clip": Knob(1.0, "global gradient-norm clip"),
    "batch_size": Knob(32, "images per step"),
    "train_steps": Knob(2000, "total optimizer steps"),
    "seed": Knob(0, "run seed (falls back to PIXELGEN_SEED)"),
    "dataset_seed": Knob(0, "procedural dataset seed"),
    "epoch_size": Knob(4096, "size of the virtual epoch batches are drawn from"),
    "checkpoint_every": Knob(500, "steps between step_<n>.ckpt files (0 = off)"),
    "sample_every": Knob(500, "steps between samples_<n>.ppm preview grids (0 = off)"),
    "resume": Knob(False, "continue from out_dir/final.ckpt"),
    "threads": Knob(1, "worker threads for data and evaluation (results do not depend on it)"),
    "out_dir": Knob("runs/default", "directory for checkpoints, metrics and images"),
    # sampling
    "solver": Knob("euler", "ODE solver", ("euler", "heun", "adams2")),
    "steps": Knob(50, "ODE steps"),
    "timeshift": Knob(1.0, "time-grid shift s (1 = uniform grid)"),
    "shift_toward": Knob("clean", "end of the trajectory the shifted grid concentrates on", ("clean", "noise")),
    "cfg_scale": Knob(1.0, "classifier-free guidance scale (1 = off)"),
    "cfg_interval_lo": Knob(0.1, "guidance applies for t >= this"),
    "cfg_interval_hi": Knob(0.9, "guidance applies for t <= this"),
    "ckpt": Knob("", "checkpoint to load (default out_dir/ema.ckpt)"),
    "n_samples": Knob(64, "images written by the sample command"),
    "sample_seed": Knob(0, "noise seed of the sample command"),
    "output": Knob("", "image grid path (default out_dir/grid_<solver>.ppm)"),
    "columns": Knob(8, "grid columns"),
    "png": Knob(False, "also write a PNG next to each PPM"),
    # evaluation
    "eval_n": Knob(1024, "real and generated images per evaluation"),
    "eval_seed": Knob(1234, "noise seed for evaluation samples"),
    "knn_k": Knob(3, "k of the k-NN precision/recall radii"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key: str, raw: str, where: str = "") -> Any:
    """Parse ``raw`` with the type of ``key``'s default."""
    prefix = f"{where}: " if where else ""
    if key not in KNOBS:
        raise ConfigError(f"{prefix}unknown key {key!r}")
    knob = KNOBS[key]
    default = knob.default
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                val = True
            elif low in _FALSE:
                val = False
            else:
                raise ValueError(text)
        elif isinstance(default, int):
            val = int(text)
        elif isinstance(default, float):
            val = float(text)
        else:
            val = text
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{prefix}{key} expects {kind}, got {raw.strip()!r}") from None
    if knob.choices and val not in knob.choices:
        raise ConfigError(f"{prefix}{key} must be one of {knob.choices}, got {val!r}")
    return val


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}"
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value', got {body!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key in out:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        out[key] = coerce(key, value, where)
    return out


def parse_file(path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


class RunConfig(dict):
    """Complete key -> value map; missing keys take their defaults."""

    @classmethod
    def build(cls, file: str | None = None, overrides: dict[str, str] | None = None,
              env: dict[str, str] | None = None) -> "RunConfig":
        env = os.environ if env is None else env
        cfg = cls({k: kn.default for k, kn in KNOBS.items()})
        from_file = parse_file(file) if file else {}
        cli = {k: coerce(k, v, f"--{k}") for k, v in (overrides or {}).items()}
        if "seed" not in from_file and "seed" not in cli and env.get("PIXELGEN_SEED"):
            cfg["seed"] = coerce("seed", env["PIXELGEN_SEED"], "PIXELGEN_SEED")
        cfg.update(from_file)
        cfg.update(cli)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        # constructing the typed configs runs every range check
        self.model_config()
        self.perceptual_config()
        self.train_config()
        self.sampler_config()
        if self["eval_n"] <= self["knn_k"]:
            raise ConfigError(f"eval_n ({self['eval_n']}) must exceed knn_k ({self['knn_k']})")

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self[k])}\n" for k in KNOBS)

    # ---- typed views

    def model_config(self):
        from pixelgen.denoiser import DenoiserConfig

        return DenoiserConfig(patch_size=self["patch_size"], width=self["width"], depth=self["depth"],
                              heads=self["heads"], repa_tap=None if self["repa_tap"] < 0 else self["repa_tap"],
                              class_drop_prob=self["class_drop_prob"], seed=self["model_seed"])

    def perceptual_config(self):
        from pixelgen.perception import PerceptualConfig

        return PerceptualConfig(lambda1=self["lambda1"], lambda2=self["lambda2"],
                                gate_threshold=self["gate_threshold"], repa_weight=self["repa_weight"],
                                global_layer=self["global_layer"])

    def train_config(self):
        from pixelgen.flow import TimeSamplerConfig
        from pixelgen.trainer import TrainConfig

        ts = TimeSamplerConfig(self["time_sampler"], self["time_mu"], self["time_sigma"])
        return TrainConfig(lr=self["lr"], beta1=self["beta1"], beta2=self["beta2"],
                           weight_decay=self["weight_decay"], adam_eps=self["adam_eps"],
                           ema_decay=self["ema_decay"], grad_clip=self["grad_clip"],
                           batch_size=self["batch_size"], train_steps=self["train_steps"], seed=self["seed"],
                           dataset_seed=self["dataset_seed"], epoch_size=self["epoch_size"],
                           denom_clip=self["denom_clip"], time_sampler=ts,
                           checkpoint_every=self["checkpoint_every"], sample_every=self["sample_every"],
                           threads=self["threads"])

    def sampler_config(self):
        from pixelgen.samplers import SamplerConfig

        return SamplerConfig(solver=self["solver"], steps=self["steps"], timeshift=self["timeshift"],
                             cfg_scale=self["cfg_scale"],
                             cfg_interval=(self["cfg_interval_lo"], self["cfg_interval_hi"]),
                             denom_clip=self["denom_clip"], shift_toward=self["shift_toward"])


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
