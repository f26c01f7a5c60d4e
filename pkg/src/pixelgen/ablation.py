"""Component ablation: baseline vs. added perceptual terms vs. gating, across seeds."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from pixelgen.denoiser import DenoiserConfig
from pixelgen.metrics import MetricsReport, evaluate
from pixelgen.perception import PerceptualConfig
from pixelgen.samplers import SamplerConfig
from pixelgen.trainer import TrainConfig, Trainer, default_extractors

# REPA stays on everywhere; only the perceptual weights and the gate change
VARIANTS: dict[str, PerceptualConfig] = {
    "a": PerceptualConfig(lambda1=0.0, lambda2=0.0, gate_threshold=0.0),
    "b": PerceptualConfig(lambda1=0.1, lambda2=0.0, gate_threshold=0.0),
    "c": PerceptualConfig(lambda1=0.1, lambda2=0.01, gate_threshold=0.0),
    "d": PerceptualConfig(lambda1=0.1, lambda2=0.01, gate_threshold=0.3),
}


@dataclass(frozen=True)
class AblationSettings:
    steps: int = 2000
    lr: float = 1e-3
    ema_decay: float = 0.999
    batch_size: int = 32
    eval_n: int = 1024
    eval_solver: str = "euler"
    eval_steps: int = 50


@dataclass
class RunRecord:
    variant: str
    seed: int
    report: MetricsReport
    final_fm: float
    seconds: float


def train_and_evaluate(variant: str, seed: int, settings: AblationSettings) -> RunRecord:
    t0 = time.perf_counter()
    cfg = TrainConfig(lr=settings.lr, ema_decay=settings.ema_decay, batch_size=settings.batch_size,
                      train_steps=settings.steps, seed=seed)
    trainer = Trainer(DenoiserConfig(seed=seed), VARIANTS[variant], cfg, default_extractors())
    results = trainer.run(settings.steps)
    tail = results[-100:]
    fm = sum(r.breakdown.fm for r in tail) / max(len(tail), 1)
    report = evaluate(trainer.ema_model(), SamplerConfig(solver=settings.eval_solver, steps=settings.eval_steps),
                      n=settings.eval_n)
    return RunRecord(variant, seed, report, fm, time.perf_counter() - t0)


def run_ablation(seeds=(0, 1, 2), variants=("a", "b", "c", "d"), settings: AblationSettings | None = None,
                 log=print) -> list[RunRecord]:
    settings = settings or AblationSettings()
    records = []
    for seed in seeds:
        for v in variants:
            rec = train_and_evaluate(v, seed, settings)
            log(f"({v}) seed {seed}: {rec.report} fm {rec.final_fm:.4f} [{rec.seconds:.0f}s]")
            records.append(rec)
    return records


def frechet_table(records: list[RunRecord]) -> dict[str, dict[int, float]]:
    table: dict[str, dict[int, float]] = {}
    for r in records:
        table.setdefault(r.variant, {})[r.seed] = r.report.frechet
    return table


def summarize(records: list[RunRecord]) -> dict:
    """Median Fréchet per variant, (c)'s relative gain over (a), and per-seed (b)-between checks."""
    table = frechet_table(records)
    med = {v: statistics.median(s.values()) for v, s in table.items()}
    gain = 1.0 - med["c"] / med["a"] if med.get("a") else float("nan")
    between = {seed: min(table["a"][seed], table["c"][seed]) <= table["b"][seed] <= max(table["a"][seed],
                                                                                       table["c"][seed])
               for seed in table.get("b", {})}
    recall = {v: statistics.median(r.report.recall for r in records if r.variant == v) for v in table}
    return {"median_frechet": med, "c_gain_over_a": gain, "b_between": between, "median_recall": recall}


def save_records(records: list[RunRecord], path) -> Path:
    path = Path(path)
    rows = [{**asdict(r), "report": r.report.as_dict()} for r in records]
    path.write_text(json.dumps({"runs": rows, "summary": summarize(records)}, indent=2, default=str))
    return path
