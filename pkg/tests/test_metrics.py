"""Depth-map and inundation metrics, including the published-table arithmetic."""

import numpy as np
import pytest

from floodsr.errors import ContractError, DimensionError
from floodsr.metrics import (
    InundationCounts,
    confusion,
    csi,
    evaluate_arrays,
    inundation_mask,
    metric_pct_point_change,
    mse,
    pct_change_mse,
    pod,
    rfa,
)
from floodsr.terrain import DepthGrid


def test_mse_identical_zero():
    grid = DepthGrid(np.random.default_rng(0).uniform(0, 10, (8, 8)), 10.0)
    assert mse(grid, grid) == 0.0


def test_mse_hand_arithmetic():
    assert mse(np.array([1.0, 2.0]), np.array([1.0, 4.0])) == pytest.approx(2.0)


def test_mse_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.uniform(0, 50, (6, 6))
        b = rng.uniform(0, 50, (6, 6))
        assert mse(a, b) == mse(b, a)


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        mse(np.zeros((2, 2)), np.zeros((2, 3)))


def test_pct_change_published_values():
    # printed table rows carry rounded inputs, so recomputation lands within
    # 0.15 of the printed percentages: 344.2 -> 21.6 and 5957.4 -> 723.0
    assert pct_change_mse(344.2, 21.6) == pytest.approx(-93.71, abs=0.15)
    assert pct_change_mse(5957.4, 723.0) == pytest.approx(-87.86, abs=0.15)


def test_pct_change_identity_and_contract():
    assert pct_change_mse(10.0, 10.0) == 0.0
    with pytest.raises(ContractError):
        pct_change_mse(0.0, 1.0)


def test_inundation_mask_threshold_zero():
    mask = inundation_mask(np.full((3, 3), 0.5), 0.0)
    assert mask.all()


def test_inundation_mask_strict_boundary():
    # a depth exactly at the threshold stays dry; just above is flooded
    assert not inundation_mask(np.array([[30.0]]), 30.0)[0, 0]
    assert inundation_mask(np.array([[31.0]]), 30.0)[0, 0]


def test_confusion_perfect_prediction():
    truth = np.array([[True, False], [False, True]])
    c = confusion(truth, truth)
    assert c.fp == 0 and c.fn == 0 and c.tp == 2 and c.tn == 2


def test_confusion_all_false_alarms():
    c = confusion(np.ones((2, 5), bool), np.zeros((2, 5), bool))
    assert c.fp == 10 and c.tp == 0


def test_confusion_counts_sum_to_pixels():
    rng = np.random.default_rng(2)
    for _ in range(50):
        pred = rng.uniform(size=(7, 7)) > 0.5
        truth = rng.uniform(size=(7, 7)) > 0.5
        assert confusion(pred, truth).total == 49


def test_pod_rfa_csi_formulas():
    assert pod(InundationCounts(tp=3, fn=1)) == pytest.approx(0.75)
    assert rfa(InundationCounts(tp=9, fp=1)) == pytest.approx(0.1)
    assert csi(InundationCounts(tp=8, fn=1, fp=1)) == pytest.approx(0.8)


def test_undefined_metrics_are_none():
    dry = InundationCounts(tn=10)
    assert pod(dry) is None
    assert rfa(dry) is None
    assert csi(dry) is None


def test_metric_bounds():
    rng = np.random.default_rng(3)
    for _ in range(100):
        c = InundationCounts(*(int(v) for v in rng.integers(0, 20, 4)))
        p, r, s = pod(c), rfa(c), csi(c)
        if s is not None:
            if p is not None:
                assert s <= p + 1e-12
            if r is not None:
                assert s <= 1.0 - r + 1e-12


def test_pct_point_change_published_values():
    # CSI 0.827 -> 0.953 prints +12.57 from unrounded inputs; the rounded
    # inputs land within 0.15 of it
    assert metric_pct_point_change(0.827, 0.953) == pytest.approx(12.57, abs=0.15)
    assert metric_pct_point_change(0.201, 0.028) == pytest.approx(-17.30, abs=0.15)
    assert metric_pct_point_change(0.5, 0.5) == 0.0


def test_evaluate_arrays_self_comparison():
    rng = np.random.default_rng(4)
    fg = rng.uniform(0, 100, (5, 8, 8))
    report = evaluate_arrays(fg, fg, cg=fg + 5.0, threshold_cm=30.0)
    assert report.sr_fg_mse == 0.0
    assert report.sr_pod == 1.0
    assert report.sr_rfa == 0.0
    assert report.sr_csi == 1.0


def test_evaluate_arrays_cg_passthrough_is_zero_change():
    rng = np.random.default_rng(5)
    fg = rng.uniform(0, 100, (5, 8, 8))
    cg = fg + rng.uniform(-5, 5, fg.shape)
    report = evaluate_arrays(cg, fg, cg, threshold_cm=30.0)
    assert report.mse_pct_change == 0.0


def test_report_serialization_roundtrip():
    rng = np.random.default_rng(6)
    fg = rng.uniform(0, 100, (3, 8, 8))
    cg = fg + rng.uniform(-10, 10, fg.shape)
    sr = fg + rng.uniform(-2, 2, fg.shape)
    report = evaluate_arrays(sr, fg, cg, threshold_cm=30.0)
    table = report.to_table()
    assert table.count("\n") == 2
    import json

    doc = json.loads(report.to_json())
    assert doc["n_images"] == 3
    # the report's percentage field must recompute from its raw fields
    assert doc["mse_pct_change"] == pytest.approx(
        100.0 * (doc["sr_fg_mse"] - doc["cg_fg_mse"]) / doc["cg_fg_mse"]
    )


def test_brute_force_oracle_equivalence():
    # element-by-element Python recomputation of every metric
    rng = np.random.default_rng(7)
    for _ in range(25):
        fg = rng.uniform(0, 60, (6, 6))
        sr = rng.uniform(0, 60, (6, 6))
        threshold = 30.0
        tp = fp = fn = tn = 0
        sq = 0.0
        for i in range(6):
            for j in range(6):
                p = sr[i, j] > threshold
                t = fg[i, j] > threshold
                tp += p and t
                fp += p and not t
                fn += (not p) and t
                tn += (not p) and (not t)
                sq += (sr[i, j] - fg[i, j]) ** 2
        c = confusion(sr > threshold, fg > threshold)
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        expected_pod = tp / (tp + fn) if tp + fn else None
        assert pod(c) == expected_pod
        assert mse(sr, fg) == pytest.approx(sq / 36, rel=1e-12)


def test_difference_pgm(tmp_path):
    from floodsr.metrics import write_difference_pgm

    rng = np.random.default_rng(8)
    fg = rng.uniform(0, 50, (16, 16))
    cg = fg + rng.uniform(-10, 10, fg.shape)
    path = tmp_path / "diff.pgm"
    write_difference_pgm(path, fg, cg)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n16 16\n65535\n")
    assert len(raw) == len(b"P5\n16 16\n65535\n") + 16 * 16 * 2
