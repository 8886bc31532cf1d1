"""Training loop, evaluation runner and ablation harness."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, no_grad
from .loss import GuidanceSchedule, combine, level_losses, scale_labels, sse_loss
from .metrics import MetricReport, format_table, table_cells, table_csv
from .network import Net3DPX, NetworkConfig, load_checkpoint, save_checkpoint
from .phantom import Dataset, SamplePair

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = ""
    network: NetworkConfig = field(default_factory=NetworkConfig)
    schedule: GuidanceSchedule = field(default_factory=GuidanceSchedule)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    checkpoint_every: int = 1
    eval_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.checkpoint_every < 1 or self.eval_every < 1:
            raise ConfigError("checkpoint_every and eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["network"] = self.network.to_dict()
        s = self.schedule
        d["schedule"] = {
            "n": s.n,
            "direction": s.direction,
            "zero_below": s.zero_below,
            "alphas": None if s.is_formula() else list(s.alphas),
            "normalize": s.normalize,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "network" in d:
            d["network"] = NetworkConfig.from_dict(d["network"])
        if "schedule" in d:
            sched = dict(d["schedule"])
            if sched.get("alphas") is not None:
                sched["alphas"] = tuple(sched["alphas"])
            d["schedule"] = GuidanceSchedule(**sched)
        return cls(**d)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            p.data -= update


# ---------------------------------------------------------------------------
# Run record
# ---------------------------------------------------------------------------


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()


class RunRecord:
    """Event log mirrored to a JSON-lines file."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self.events: list[dict] = []
        if self.path:
            self.path.write_text("")

    def log(self, event: str, **fields) -> dict:
        rec = {"event": event, **fields}
        self.events.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def of(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]

    @property
    def losses(self) -> list[float]:
        return [e["total"] for e in self.of("step")]

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunRecord":
        rec = cls()
        rec.path = Path(path)
        rec.events = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        return rec


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _batch(samples: Sequence[SamplePair], dtype) -> tuple[Tensor, np.ndarray]:
    px = np.stack([s.px for s in samples]).astype(dtype)
    gt = np.stack([s.flattened for s in samples]).astype(dtype)
    return Tensor(px), gt


def _check_compatible(samples: Sequence[SamplePair], cfg: NetworkConfig) -> None:
    s = samples[0]
    if tuple(s.px.shape) != (1, *cfg.input_hw):
        raise ConfigError(f"dataset px shape {s.px.shape} does not match network input {cfg.input_hw}")
    if tuple(s.flattened.shape) != (cfg.depth, *cfg.input_hw):
        raise ConfigError(f"dataset volume shape {s.flattened.shape} does not match depth {cfg.depth} x {cfg.input_hw}")


def compute_loss(model: Net3DPX, px: Tensor, gt: np.ndarray, schedule: GuidanceSchedule):
    """Forward pass and progressive loss; returns (total, per-level terms)."""
    pyramid = model(px)
    labels = scale_labels(gt, {i: t.shape[2:] for i, t in pyramid.levels.items()})
    terms = level_losses(pyramid, labels, schedule)
    return combine(terms, schedule), terms


def predict(model: Net3DPX, px: np.ndarray) -> np.ndarray:
    """Eval-mode final reconstruction for ``px[B,1,H,W]`` (or a single ``[1,H,W]``)."""
    single = px.ndim == 3
    batch = px[None] if single else px
    model.eval()
    with no_grad():
        out = model(Tensor(batch.astype(model.config.dtype))).final.data
    return out[0] if single else out


def validate(model: Net3DPX, samples: Sequence[SamplePair]) -> dict:
    report = MetricReport()
    losses = []
    for s in samples:
        pred = predict(model, s.px)
        losses.append(float(np.mean((pred.astype(np.float64) - s.flattened) ** 2)))
        report.add(s.sample_id, pred, s.flattened)
    agg = report.aggregates()
    return {"loss": float(np.mean(losses)), **{m: agg[m]["mean"] for m in ("psnr", "ssim", "dsc")}}


def train(config: TrainConfig, out_dir: str | os.PathLike, dataset: Dataset | None = None) -> tuple[Path, RunRecord]:
    """Optimize the progressive loss with Adam; returns (last checkpoint, record).

    ``best.ckpt`` (lowest validation loss) and ``last.ckpt`` are written to
    ``out_dir`` together with ``run.jsonl`` and ``config.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    ds = dataset or Dataset(config.dataset)
    train_set = ds.split("train")
    if not train_set:
        raise ConfigError("training split is empty")
    val_set = ds.split("val")
    if not val_set:
        log.warning("validation split is empty; validating on the training split")
        val_set = train_set
    _check_compatible(train_set, config.network)

    record = RunRecord(out / "run.jsonl")
    record.log("config", config=config.to_dict(), source_digest=source_digest())
    model = Net3DPX(config.network, seed=config.seed)
    params = dict(model.named_parameters())
    opt = Adam(params.values(), config.lr, (config.beta1, config.beta2), config.eps)
    dtype = np.dtype(config.network.dtype)
    schedule = config.schedule
    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    live: set[str] = set()
    best_loss = math.inf
    start = time.perf_counter()
    step = 0
    last = out / "last.ckpt"
    for epoch in range(config.epochs):
        if step >= total_steps:
            break
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        for b in range(steps_per_epoch):
            if step >= total_steps:
                break
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            px, gt = _batch([train_set[i] for i in idx], dtype)
            model.train()
            model.zero_grad()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    total, terms = compute_loss(model, px, gt, schedule)
                    total.backward()
            except NonFiniteError as exc:
                record.log("abort", step=step, epoch=epoch, reason=str(exc))
                raise TrainingDiverged(step, str(exc)) from exc
            if step < 10:
                live.update(name for name, p in params.items() if p.grad is not None and np.any(p.grad != 0))
                if step == min(9, total_steps - 1):
                    record.log("gradient_flow", dead_parameters=sorted(set(params) - live))
            opt.step()
            record.log(
                "step",
                step=step,
                epoch=epoch,
                total=float(total.data),
                levels={str(i): float(t.data) for i, t in terms.items()},
                alphas={str(i): schedule.alphas[i] for i in terms},
            )
            step += 1
        done = step >= total_steps or epoch == config.epochs - 1
        if (epoch + 1) % config.eval_every == 0 or done:
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    metrics = validate(model, val_set)
            except NonFiniteError as exc:
                record.log("abort", step=step, epoch=epoch, reason=f"validation: {exc}")
                raise TrainingDiverged(step, f"validation: {exc}") from exc
            record.log("epoch", epoch=epoch, step=step, val=metrics, elapsed_s=time.perf_counter() - start)
            if metrics["loss"] < best_loss:
                best_loss = metrics["loss"]
                save_checkpoint(out / "best.ckpt", model)
        if (epoch + 1) % config.checkpoint_every == 0 or done:
            save_checkpoint(last, model)
    record.log("done", steps=step, best_val_loss=best_loss, elapsed_s=time.perf_counter() - start)
    return last, record


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def score_predictions(items, tags: dict | None = None) -> MetricReport:
    """Build a report from ``(sample_id, prediction, ground_truth)`` triples."""
    report = MetricReport(tags=dict(tags or {}))
    for sample_id, pred, gt in items:
        report.add(sample_id, pred, gt)
    return report


def evaluate(
    checkpoint: str | os.PathLike,
    dataset: Dataset,
    split: str = "test",
    out_dir: str | os.PathLike | None = None,
    expected: NetworkConfig | None = None,
    tags: dict | None = None,
) -> MetricReport:
    model = load_checkpoint(checkpoint, expected)
    cfg = model.config
    samples = dataset.split(split)
    if samples:
        _check_compatible(samples, cfg)
    base_tags = {"decoder_type": cfg.decoder_type, "progressive": cfg.progressive, "split": split}
    base_tags.update(tags or {})
    report = score_predictions(((s.sample_id, predict(model, s.px), s.flattened) for s in samples), base_tags)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.to_csv())
        summary = {"tags": report.tags, "aggregates": report.aggregates()}
        (out / "metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=str) + "\n")
    return report


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


def ablation_cells(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """The decoder x guidance grid, plus the other schedule direction for 3DPX."""
    d = base.schedule.direction
    other = "literal" if d == "toward_output" else "toward_output"

    def cell(decoder: str, progressive: bool, direction: str) -> TrainConfig:
        net = dataclasses.replace(base.network, decoder_type=decoder, progressive=progressive)
        sched = GuidanceSchedule(base.schedule.n, direction, base.schedule.zero_below, None, base.schedule.normalize)
        return dataclasses.replace(base, network=net, schedule=sched)

    return [
        ("CNN", cell("cnn", False, d)),
        ("Progressive CNN", cell("cnn", True, d)),
        ("Hybrid MLP-CNN", cell("hybrid", False, d)),
        (f"Progressive Hybrid MLP-CNN (3DPX, {d})", cell("hybrid", True, d)),
        (f"Progressive Hybrid MLP-CNN (3DPX, {other})", cell("hybrid", True, other)),
    ]


def decomposition_error(record: RunRecord) -> float:
    """Worst relative gap between logged totals and their alpha-weighted levels."""
    worst = 0.0
    for e in record.of("step"):
        recombined = sum(e["alphas"][k] * v for k, v in e["levels"].items())
        worst = max(worst, abs(recombined - e["total"]) / max(abs(e["total"]), 1e-300))
    return worst


def ablation_suite(base: TrainConfig, out_dir: str | os.PathLike, split: str = "test") -> dict:
    """Train and evaluate every ablation cell; write table.txt / table.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = Dataset(base.dataset)
    if not dataset.ids(split):
        log.warning("split %r is empty; scoring the validation split", split)
        split = "val"
    rows, cells = [], {}
    for k, (name, cfg) in enumerate(ablation_cells(base)):
        cell_dir = out / f"cell{k}"
        try:
            train(cfg, cell_dir, dataset)
            record = RunRecord.load(cell_dir / "run.jsonl")
            report = evaluate(cell_dir / "best.ckpt", dataset, split, cell_dir, tags={"method": name})
            values = table_cells(report)
            cells[name] = {
                "dir": cell_dir.name,
                "values": values,
                "decomposition_error": decomposition_error(record),
                "direction": cfg.schedule.direction,
                "decoder_type": cfg.network.decoder_type,
                "progressive": cfg.network.progressive,
            }
        except Exception as exc:  # any failing cell is reported, not fatal
            log.exception("ablation cell %s failed", name)
            values = None
            cells[name] = {"dir": cell_dir.name, "error": f"{type(exc).__name__}: {exc}"}
        rows.append((name, values))
    title = f"Ablation on split '{split}' (desk scale)"
    text = format_table(rows, title)
    (out / "table.txt").write_text(text)
    (out / "table.csv").write_text(table_csv(rows))
    (out / "cells.json").write_text(json.dumps(cells, indent=1, sort_keys=True) + "\n")
    return {"rows": rows, "cells": cells, "table": text}
