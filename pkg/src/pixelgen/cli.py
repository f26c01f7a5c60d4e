"""``pixelgen {train|sample|eval|check} [--config FILE] [--key value ...]``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from pixelgen.config import KNOBS, RunConfig
from pixelgen.errors import ConfigError, NumericalError, PixelGenError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

COMMANDS = {
    "train": "train a denoiser and write final.ckpt, ema.ckpt, metrics.csv and samples_<step>.ppm",
    "sample": "load a checkpoint and write an image grid",
    "eval": "report feature-Frechet distance and k-NN precision/recall",
    "check": "run gradient, solver-order and invariant self-checks",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixelgen", description="Pixel-space flow-matching toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--verbose", action="store_true", help="log progress")
        group = p.add_argument_group("knobs (override the config file)")
        for key, knob in KNOBS.items():
            group.add_argument(f"--{key}", dest=f"knob_{key}", metavar="V",
                               help=f"{knob.doc} [default: {knob.default!r}]")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {k[len("knob_"):]: v for k, v in vars(args).items() if k.startswith("knob_") and v is not None}
    return RunConfig.build(args.config, overrides)


def _extractors(cfg: RunConfig):
    from pixelgen.trainer import default_extractors

    return default_extractors(cfg["local_seed"], cfg["global_seed"])


def _meta(cfg: RunConfig) -> dict:
    return {"config": cfg.to_text()}


def cmd_train(cfg: RunConfig) -> int:
    from pixelgen import trainer as tr

    t = tr.Trainer(cfg.model_config(), cfg.perceptual_config(), cfg.train_config(), _extractors(cfg), _meta(cfg))
    out = Path(cfg["out_dir"])
    if cfg["resume"] and not (out / "final.ckpt").exists():
        raise ConfigError(f"resume requested but {out / 'final.ckpt'} does not exist")
    results = tr.run(t, out, resume=cfg["resume"])
    last = results[-1].breakdown.total if results else float("nan")
    print(f"trained to step {t.step}; last loss {last:.6f}; outputs in {out}")
    return EXIT_OK


def _checkpoint_path(cfg: RunConfig) -> Path:
    path = Path(cfg["ckpt"]) if cfg["ckpt"] else Path(cfg["out_dir"]) / "ema.ckpt"
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return path


def _load_model(cfg: RunConfig, path: Path):
    """Rebuild the model with the architecture recorded in the checkpoint when present."""
    from pixelgen import checkpoint
    from pixelgen.config import parse_text
    from pixelgen.denoiser import Denoiser
    from pixelgen.trainer import _strip, read_meta

    blob = checkpoint.load(path)
    model_cfg = cfg.model_config()
    meta = read_meta(blob)
    if "config" in meta:
        stored = RunConfig({k: kn.default for k, kn in KNOBS.items()})
        stored.update(parse_text(meta["config"], f"{path}[meta]"))
        model_cfg = stored.model_config()
    model = Denoiser(model_cfg)
    model.load_state_dict(_strip(blob, "model/"))
    return model


def cmd_sample(cfg: RunConfig) -> int:
    from pixelgen.data import write_image_grid
    from pixelgen.metrics import generate

    path = _checkpoint_path(cfg)
    model = _load_model(cfg, path)
    images = generate(model, cfg.sampler_config(), cfg["n_samples"], cfg["sample_seed"])
    if not np.all(np.isfinite(images)):
        raise NumericalError("sampler produced non-finite pixels")
    output = Path(cfg["output"]) if cfg["output"] else Path(cfg["out_dir"]) / f"grid_{cfg['solver']}.ppm"
    output.parent.mkdir(parents=True, exist_ok=True)
    write_image_grid(images, output, cfg["columns"], png=cfg["png"])
    print(f"wrote {len(images)} samples to {output}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    from pixelgen.metrics import MetricsReport, eval_extractor, evaluate

    path = _checkpoint_path(cfg)
    model = _load_model(cfg, path)
    report = evaluate(model, cfg.sampler_config(), cfg["eval_n"], seed=cfg["eval_seed"],
                      dataset_seed=cfg["dataset_seed"], k=cfg["knn_k"],
                      net=eval_extractor(cfg["eval_extractor_seed"]), threads=cfg["threads"])
    if not all(np.isfinite([report.frechet, report.precision, report.recall])):
        raise NumericalError(f"non-finite metrics: {report}")
    print(report)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(MetricsReport.CSV_HEADER + "\n" + report.csv_row() + "\n")
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    from pixelgen.diagnostics import run_all
    from pixelgen.tensor import default_dtype, precision

    with precision(np.float64):
        print(f"precision: {np.dtype(default_dtype()).name}")
        results = run_all()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_OK if not failed else EXIT_NUMERICAL


HANDLERS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "check": cmd_check}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PixelGenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
