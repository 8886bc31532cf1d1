"""Command-line entry point: synth, train, eval, reconstruct, ablate.

Exit codes: 0 success, 1 runtime failure (e.g. diverged training),
2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import container
from .autodiff import DimensionError
from .network import CheckpointError, DigestMismatch, NetworkConfig, load_checkpoint
from .phantom import Dataset, DatasetSpec, build_dataset
from .train import ConfigError, TrainConfig, TrainingDiverged, ablation_suite, evaluate, predict, train

log = logging.getLogger("recon3dpx")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
MONTAGE_TILES = 8


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config resolution: defaults < config file < --set overrides
# ---------------------------------------------------------------------------


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def unflatten(flat: dict) -> dict:
    out: dict = {}
    for key, v in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve(defaults: dict, config_file: str | None, overrides: list[str]) -> dict:
    flat = flatten(defaults)
    valid = sorted(flat)

    def apply(key, value, origin):
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r} (from {origin}); valid keys: {', '.join(valid)}")
        flat[key] = value

    if config_file:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_file}: {exc}") from None
        for k, v in flatten(loaded).items():
            apply(k, v, config_file)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        apply(k.strip(), _parse_value(v.strip()), "--set")
    return unflatten(flat)


def _train_config(args, dataset: str) -> TrainConfig:
    resolved = resolve(TrainConfig().to_dict(), args.config, args.set)
    resolved["dataset"] = dataset
    try:
        return TrainConfig.from_dict(resolved)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _prepare_out(path: Path, force: bool) -> None:
    occupied = any(path.iterdir()) if path.is_dir() else path.exists()
    if occupied:
        if not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.subjects < 1:
        raise ConfigError("--subjects must be >= 1")
    resolved = resolve(DatasetSpec().to_dict(), args.config, args.set)
    resolved["n_subjects"] = args.subjects
    resolved["seed"] = args.seed
    try:
        spec = DatasetSpec.from_dict(resolved)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} already exists; pass --force to overwrite")
    manifest = build_dataset(out, spec, force=args.force)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    subj = {k: len(v) for k, v in manifest["subjects"].items()}
    print(f"dataset: {out}")
    print(f"subjects: {spec.n_subjects} (train {subj['train']}, val {subj['val']}, test {subj['test']})")
    print(f"samples: {sum(counts.values())} (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    print(f"seed: {spec.seed}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args, str(args.data))
    out = Path(args.out)
    _prepare_out(out, args.force)
    ckpt, record = train(cfg, out)
    done = record.of("done")[-1]
    print(f"trained {done['steps']} steps; final loss {record.losses[-1]:.6g}; best val loss {done['best_val_loss']:.6g}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    expected = None
    if args.config or args.set:
        expected = _train_config(args, str(args.data)).network
    out = Path(args.out)
    _prepare_out(out, args.force)
    report = evaluate(args.checkpoint, Dataset(args.data), args.split, out, expected)
    (out / "config.json").write_text(
        json.dumps({"checkpoint": str(args.checkpoint), "split": args.split, "tags": report.tags}, indent=1, sort_keys=True)
        + "\n"
    )
    print(f"{len(report.rows)} samples: {report.summary_line()}")
    return EXIT_OK


def montage_indices(depth: int, tiles: int = MONTAGE_TILES) -> list[int]:
    if depth <= tiles:
        return list(range(depth))
    return [int(i) for i in np.linspace(0, depth - 1, tiles).round()]


def make_montage(volume: np.ndarray, tiles: int = MONTAGE_TILES, cols: int = 4) -> np.ndarray:
    """Evenly spaced depth slices tiled row-major into a uint8 image."""
    idx = montage_indices(volume.shape[0], tiles)
    rows = -(-len(idx) // cols)
    _, h, w = volume.shape
    canvas = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for k, d in enumerate(idx):
        r, c = divmod(k, cols)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = np.round(np.clip(volume[d], 0, 1) * 255)
    return canvas


def _read_px(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".png":
        from PIL import Image

        img = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
        return img[None]
    arrays = container.read(path)
    if "px" not in arrays:
        raise UsageError(f"{path} holds no 'px' tensor (found {sorted(arrays)})")
    px = arrays["px"]
    return px if px.ndim == 3 else px[None]


def cmd_reconstruct(args) -> int:
    model = load_checkpoint(args.checkpoint)
    px = _read_px(Path(args.px))
    if tuple(px.shape) != (1, *model.config.input_hw):
        raise DimensionError(f"px shape {px.shape} does not match checkpoint input {model.config.input_hw}")
    volume = predict(model, px)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    container.write(out, {"flattened": volume})
    log.info("reconstruction range [%.4f, %.4f]", float(volume.min()), float(volume.max()))
    print(f"volume {tuple(volume.shape)} -> {out}; range [{volume.min():.4f}, {volume.max():.4f}]")
    if not args.no_montage:
        from PIL import Image

        montage = Path(args.montage) if args.montage else out.with_suffix(".png")
        Image.fromarray(make_montage(volume)).save(montage)
        print(f"montage -> {montage}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_config(args, str(args.data))
    out = Path(args.out)
    _prepare_out(out, args.force)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    result = ablation_suite(cfg, out, args.split)
    print(result["table"], end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file (nested keys)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. network.depth=16")
    p.add_argument("--force", action="store_true", help="overwrite an existing output")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="recon3dpx", description="Progressive 2D-to-3D panoramic X-ray reconstruction.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a phantom dataset", formatter_class=fmt)
    p.add_argument("--subjects", type=int, default=10, help="number of phantom subjects")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    _config_args(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network on a dataset", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to score")
    p.add_argument("--out", required=True, help="report output directory")
    _config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="reconstruct one PX image", formatter_class=fmt)
    p.add_argument("--px", required=True, help="PX image (PXT1 file with a 'px' tensor, or PNG)")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="output PXT1 volume file")
    p.add_argument("--montage", default=None, help="montage PNG path (default: OUT with .png suffix)")
    p.add_argument("--no-montage", action="store_true", help="skip the depth-slice montage")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("ablate", help="run the decoder x guidance ablation grid", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for cells and tables")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to score")
    _config_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DigestMismatch as exc:
        print(f"error: {exc}\n  expected digest: {exc.expected}\n  checkpoint digest: {exc.found}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, UsageError, DimensionError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failure
        log.exception("command failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
