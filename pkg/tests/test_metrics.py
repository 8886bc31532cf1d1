import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from recon3dpx.autodiff import DimensionError
from recon3dpx.metrics import MetricReport, dsc_bone, format_table, psnr, rank_markers, ssim3d, table_cells, table_csv


def vol(seed=0, shape=(8, 9, 10)):
    return np.random.default_rng(seed).random(shape)


def ssim_oracle(p, g, k=7, c1=1e-4, c2=9e-4):
    vals = []
    for i in range(p.shape[0] - k + 1):
        for j in range(p.shape[1] - k + 1):
            for m in range(p.shape[2] - k + 1):
                a = p[i : i + k, j : j + k, m : m + k]
                b = g[i : i + k, j : j + k, m : m + k]
                mu_a, mu_b = a.mean(), b.mean()
                cov = ((a - mu_a) * (b - mu_b)).mean()
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a**2 + mu_b**2 + c1) * (a.var() + b.var() + c2)
                vals.append(num / den)
    return float(np.mean(vals))


# --- PSNR -------------------------------------------------------------------


def test_psnr_offset_is_20db():
    g = vol()
    assert abs(psnr(g + 0.1, g) - 20.0) < 1e-9


def test_psnr_identical_sentinel():
    g = vol()
    assert psnr(g, g) == math.inf


def test_psnr_decreases_with_noise():
    g = vol()
    noise = np.random.default_rng(1).normal(size=g.shape)
    values = [psnr(g + a * noise, g) for a in (0.01, 0.05, 0.1)]
    assert values[0] > values[1] > values[2]


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((2, 3)), np.zeros((3, 2)))


# --- SSIM -------------------------------------------------------------------


def test_ssim_identity_is_exactly_one():
    g = vol()
    assert ssim3d(g, g) == 1.0


def test_ssim_matches_loop_oracle():
    p, g = vol(1), vol(2)
    assert ssim3d(p, g) == pytest.approx(ssim_oracle(p, g), rel=1e-10)


def test_ssim_symmetric():
    p, g = vol(3), vol(4)
    assert ssim3d(p, g) == pytest.approx(ssim3d(g, p), rel=1e-12)


def test_ssim_constant_volumes_closed_form():
    c, d = 0.5, 0.1
    g = np.full((7, 8, 9), c)
    expect = (2 * c * (c + d) + 1e-4) / (c * c + (c + d) ** 2 + 1e-4)
    assert expect == pytest.approx(0.6001 / 0.6101, rel=1e-14)
    assert ssim3d(g + d, g) == pytest.approx(expect, rel=1e-9)


def test_ssim_small_extent_errors():
    with pytest.raises(DimensionError, match=">= 7"):
        ssim3d(np.zeros((6, 8, 8)), np.zeros((6, 8, 8)))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (7, 7, 8), elements=st.floats(0, 1)), arrays(np.float64, (7, 7, 8), elements=st.floats(0, 1)))
def test_ssim_bounded(p, g):
    assert -1.0 - 1e-9 <= ssim3d(p, g) <= 1.0 + 1e-9


# --- DSC --------------------------------------------------------------------


def test_dsc_hand_case():
    assert dsc_bone(np.array([0.0, 1.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0, 1.0])) == 0.5


def test_dsc_identity_and_disjoint():
    g = vol()
    assert dsc_bone(g, g) == 1.0
    gt = np.array([1.0, 1.0, 0.0, 0.0])
    assert dsc_bone(1.0 - gt, gt) == 0.0


def test_dsc_uses_ground_truth_threshold_for_both():
    gt = np.array([0.0, 0.0, 1.0, 1.0])  # tau = 0.5
    pred = np.array([0.49, 0.49, 0.51, 0.51])
    assert dsc_bone(pred, gt) == 1.0


def test_dsc_constant_gt():
    # a constant gt sits on its own mean, so its mask is full rather than empty
    assert dsc_bone(np.zeros(4), np.zeros(4)) == 1.0
    assert dsc_bone(np.full(4, -1.0), np.zeros(4)) == 0.0


# --- reports ----------------------------------------------------------------


def test_report_excludes_identical_from_psnr():
    g = vol(shape=(8, 8, 8))
    rep = MetricReport()
    rep.add("same", g, g)
    rep.add("off", g + 0.1, g)
    agg = rep.aggregates()
    assert agg["psnr"]["identical"] == 1
    assert agg["psnr"]["n"] == 1
    assert agg["psnr"]["mean"] == pytest.approx(20.0, abs=1e-9)
    assert agg["ssim"]["n"] == 2
    assert "1 identical excluded" in rep.summary_line()


def test_report_csv_round_trip_reaggregates():
    g = vol(shape=(8, 8, 8))
    rep = MetricReport()
    rep.add("a", g, g)
    for k, a in enumerate((0.02, 0.05)):
        rep.add(f"n{k}", g + a * vol(k + 5, (8, 8, 8)), g)
    back = MetricReport.from_csv(rep.to_csv())
    assert back.rows == rep.rows
    assert back.aggregates() == rep.aggregates()


# --- tables -----------------------------------------------------------------


def test_rank_markers():
    assert rank_markers([3.0, 5.0, None, 4.0, 5.0]) == ["", "best", "", "second", "best"]
    assert rank_markers([None, math.nan]) == ["", ""]


def test_format_table_marks_best_and_second():
    rows = [
        ("A", {"psnr": 10.0, "dsc": 50.0, "ssim": 30.0}),
        ("B", {"psnr": 12.0, "dsc": 40.0, "ssim": 20.0}),
        ("C", {"psnr": 11.0, "dsc": 45.0, "ssim": 10.0}),
        ("D", None),
    ]
    text = format_table(rows, "title")
    lines = text.splitlines()
    assert lines[0] == "title"
    row = {ln.split()[0]: ln.split()[1:] for ln in lines[3:7]}
    assert row["A"] == ["10.00", "**50.00**", "**30.00**"]
    assert row["B"] == ["**12.00**", "40.00", "_20.00_"]
    assert row["C"] == ["_11.00_", "_45.00_", "10.00"]
    assert row["D"] == ["FAILED"]


def test_table_csv_matches_text_values():
    rows = [("A", {"psnr": 10.123, "dsc": 50.0, "ssim": 30.0}), ("B", None)]
    assert table_csv(rows) == "method,psnr,dsc,ssim\nA,10.12,50.00,30.00\nB,FAILED,FAILED,FAILED\n"


def test_table_cells_scale():
    g = vol(shape=(8, 8, 8))
    rep = MetricReport()
    rep.add("x", g + 0.1, g)
    cells = table_cells(rep)
    assert cells["dsc"] == pytest.approx(100 * dsc_bone(g + 0.1, g))
    assert cells["ssim"] == pytest.approx(100 * ssim3d(g + 0.1, g))
