"""Reconstruction quality metrics and report formatting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import DimensionError

SSIM_WINDOW = 7
K1, K2 = 0.01, 0.03
METRICS = ("psnr", "dsc", "ssim")


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _same_shape(pred, gt, what: str) -> tuple[np.ndarray, np.ndarray]:
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise DimensionError(f"{what}: shape mismatch {p.shape} vs {g.shape}")
    return p, g


def psnr(pred, gt, peak: float = 1.0) -> float:
    """PSNR in dB; ``math.inf`` marks identical inputs."""
    p, g = _same_shape(pred, gt, "psnr")
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def is_identical(psnr_value: float) -> bool:
    return math.isinf(psnr_value)


def _box_sum_valid(arr: np.ndarray, k: int) -> np.ndarray:
    for axis in range(arr.ndim):
        c = np.cumsum(arr, axis=axis)
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (1, 0)
        c = np.pad(c, pad)
        n = arr.shape[axis]
        arr = np.take(c, np.arange(k, n + 1), axis=axis) - np.take(c, np.arange(0, n + 1 - k), axis=axis)
    return arr


def ssim3d(pred, gt, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Volumetric SSIM with a uniform window^3 window over valid positions."""
    p, g = _same_shape(pred, gt, "ssim3d")
    if p.ndim != 3:
        raise DimensionError(f"ssim3d expects [D,H,W], got {p.shape}")
    if min(p.shape) < window:
        raise DimensionError(f"ssim3d: every extent must be >= {window}, got {p.shape}")
    n = float(window**3)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_p = _box_sum_valid(p, window) / n
    mu_g = _box_sum_valid(g, window) / n
    var_p = _box_sum_valid(p * p, window) / n - mu_p * mu_p
    var_g = _box_sum_valid(g * g, window) / n - mu_g * mu_g
    # unclamped so that identical inputs give cov == var exactly
    cov = _box_sum_valid(p * g, window) / n - mu_p * mu_g
    num = (2 * mu_p * mu_g + c1) * (2 * cov + c2)
    den = (mu_p * mu_p + mu_g * mu_g + c1) * (var_p + var_g + c2)
    return float(np.mean(num / den))


def dsc_bone(pred, gt) -> float:
    """Dice overlap of bone masks thresholded at the ground-truth mean density."""
    p, g = _same_shape(pred, gt, "dsc_bone")
    tau = g.mean()
    a = g >= tau
    b = p >= tau
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    tags: dict = field(default_factory=dict)

    def add(self, sample_id: str, pred, gt) -> dict:
        row = {"sample_id": sample_id, "psnr": psnr(pred, gt), "ssim": ssim3d(pred, gt), "dsc": dsc_bone(pred, gt)}
        self.rows.append(row)
        return row

    def aggregates(self) -> dict:
        out = {}
        for m in METRICS:
            vals = [r[m] for r in self.rows if not (m == "psnr" and is_identical(r[m]))]
            out[m] = {
                "mean": float(np.mean(vals)) if vals else math.nan,
                "std": float(np.std(vals)) if vals else math.nan,
                "n": len(vals),
            }
        out["psnr"]["identical"] = sum(1 for r in self.rows if is_identical(r["psnr"]))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_id", "psnr_db", "ssim", "dsc"])
        for r in self.rows:
            ps = "identical" if is_identical(r["psnr"]) else repr(r["psnr"])
            writer.writerow([r["sample_id"], ps, repr(r["ssim"]), repr(r["dsc"])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, tags: dict | None = None) -> "MetricReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            ps = math.inf if rec["psnr_db"] == "identical" else float(rec["psnr_db"])
            rows.append({"sample_id": rec["sample_id"], "psnr": ps, "ssim": float(rec["ssim"]), "dsc": float(rec["dsc"])})
        return cls(rows, dict(tags or {}))

    def summary_line(self) -> str:
        agg = self.aggregates()
        parts = [f"{m.upper()} {agg[m]['mean'] * (1 if m == 'psnr' else 100):.2f}" for m in METRICS]
        if agg["psnr"]["identical"]:
            parts.append(f"({agg['psnr']['identical']} identical excluded from PSNR)")
        return ", ".join(parts)


def table_cells(report: MetricReport) -> dict[str, float]:
    """Mean metrics on the table scale: PSNR in dB, DSC and SSIM x100."""
    agg = report.aggregates()
    return {m: agg[m]["mean"] * (1.0 if m == "psnr" else 100.0) for m in METRICS}


def rank_markers(values: Sequence[float | None]) -> list[str]:
    """'best' / 'second' / '' per entry; higher is better, None never ranks."""
    ranked = sorted({v for v in values if v is not None and not math.isnan(v)}, reverse=True)
    out = []
    for v in values:
        if v is None or math.isnan(v) or not ranked:
            out.append("")
        elif v == ranked[0]:
            out.append("best")
        elif len(ranked) > 1 and v == ranked[1]:
            out.append("second")
        else:
            out.append("")
    return out


def format_table(rows: Sequence[tuple[str, dict[str, float] | None]], title: str = "") -> str:
    """Text table with **best** and _second-best_ markers per metric column.

    A row whose cells are ``None`` is printed as FAILED.
    """
    name_w = max([len("Method")] + [len(name) for name, _ in rows]) + 2
    col_w = 12
    markers = {
        m: rank_markers([None if cells is None else cells[m] for _, cells in rows]) for m in METRICS
    }
    lines = []
    if title:
        lines.append(title)
    lines.append("Method".ljust(name_w) + "".join(m.upper().rjust(col_w) for m in METRICS))
    lines.append("-" * (name_w + col_w * len(METRICS)))
    for r, (name, cells) in enumerate(rows):
        if cells is None:
            lines.append(name.ljust(name_w) + "FAILED".rjust(col_w))
            continue
        line = name.ljust(name_w)
        for m in METRICS:
            text = f"{cells[m]:.2f}"
            mark = markers[m][r]
            if mark == "best":
                text = f"**{text}**"
            elif mark == "second":
                text = f"_{text}_"
            line += text.rjust(col_w)
        lines.append(line)
    lines.append("(**bold** = best, _underscore_ = second best; DSC and SSIM x100)")
    return "\n".join(lines) + "\n"


def table_csv(rows: Sequence[tuple[str, dict[str, float] | None]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "psnr", "dsc", "ssim"])
    for name, cells in rows:
        if cells is None:
            writer.writerow([name, "FAILED", "FAILED", "FAILED"])
        else:
            writer.writerow([name] + [f"{cells[m]:.2f}" for m in METRICS])
    return buf.getvalue()
