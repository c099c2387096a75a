"""Evaluation: depth-map MSE, inundation thresholding and the
detection/false-alarm/success metrics, plus report generation.

Conventions: the MSE comparison between model output and ground truth is
reported as a relative percentage change against the coarse-grid baseline,
while changes in the inundation metrics are reported in percentage points.
A pixel counts as flooded when its depth strictly exceeds the threshold.
Metrics whose denominator is zero are reported as absent (None), never
coerced to zero.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import fmap
from .errors import ContractError, DimensionError


def _depths(x):
    # accept DepthGrid-like objects or bare arrays
    arr = getattr(x, "depths", x)
    return np.asarray(arr, dtype=np.float64)


def mse(a, b):
    """Mean squared per-pixel difference, in cm^2 for depth grids."""
    a, b = _depths(a), _depths(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff * diff))


def pct_change_mse(cg_fg, sr_fg):
    """Relative change of the model error against the coarse-grid baseline."""
    if cg_fg <= 0:
        raise ContractError("baseline MSE must be positive")
    return 100.0 * (sr_fg - cg_fg) / cg_fg


def inundation_mask(depth, threshold):
    """Boolean flood extent: depth strictly greater than the threshold (cm)."""
    if threshold < 0:
        raise ContractError("threshold must be non-negative")
    return _depths(depth) > threshold


@dataclass
class InundationCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return InundationCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def confusion(pred, truth):
    """2x2 tallies of a predicted flood mask against the reference mask."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    return InundationCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def pod(c):
    """Probability of detection: tp / (tp + fn); None when nothing flooded."""
    denom = c.tp + c.fn
    return c.tp / denom if denom else None


def rfa(c):
    """Rate of false alarms: fp / (tp + fp); None when nothing predicted."""
    denom = c.tp + c.fp
    return c.fp / denom if denom else None


def csi(c):
    """Critical success index: tp / (tp + fn + fp)."""
    denom = c.tp + c.fn + c.fp
    return c.tp / denom if denom else None


def metric_pct_point_change(cg, sr):
    """Difference of two fractional metrics expressed in percentage points."""
    if cg is None or sr is None:
        raise ContractError("percentage-point change needs both metrics defined")
    return (sr - cg) * 100.0


@dataclass
class EvalReport:
    """One evaluation of a model run against fine-grid references."""

    cg_fg_mse: float
    sr_fg_mse: float
    mse_pct_change: float
    cg_pod: float | None
    sr_pod: float | None
    pod_pp_change: float | None
    cg_rfa: float | None
    sr_rfa: float | None
    rfa_pp_change: float | None
    cg_csi: float | None
    sr_csi: float | None
    csi_pp_change: float | None
    threshold_cm: float
    n_images: int

    FIELDS = (
        "cg_fg_mse sr_fg_mse mse_pct_change "
        "cg_pod sr_pod pod_pp_change cg_rfa sr_rfa rfa_pp_change "
        "cg_csi sr_csi csi_pp_change threshold_cm n_images"
    ).split()

    def to_dict(self):
        return {name: getattr(self, name) for name in self.FIELDS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_table(self, sep="\t"):
        """Two-line delimiter-separated text table (header + values)."""

        def fmt(v):
            if v is None:
                return "NA"
            if isinstance(v, float):
                return f"{v:.6g}"
            return str(v)

        header = sep.join(self.FIELDS)
        values = sep.join(fmt(getattr(self, name)) for name in self.FIELDS)
        return header + "\n" + values + "\n"


def build_report(counts_cg, counts_sr, cg_fg_mse, sr_fg_mse, threshold_cm, n_images):
    cg_pod, sr_pod = pod(counts_cg), pod(counts_sr)
    cg_rfa, sr_rfa = rfa(counts_cg), rfa(counts_sr)
    cg_csi, sr_csi = csi(counts_cg), csi(counts_sr)

    def pp(a, b):
        return metric_pct_point_change(a, b) if a is not None and b is not None else None

    return EvalReport(
        cg_fg_mse=cg_fg_mse,
        sr_fg_mse=sr_fg_mse,
        mse_pct_change=pct_change_mse(cg_fg_mse, sr_fg_mse),
        cg_pod=cg_pod,
        sr_pod=sr_pod,
        pod_pp_change=pp(cg_pod, sr_pod),
        cg_rfa=cg_rfa,
        sr_rfa=sr_rfa,
        rfa_pp_change=pp(cg_rfa, sr_rfa),
        cg_csi=cg_csi,
        sr_csi=sr_csi,
        csi_pp_change=pp(cg_csi, sr_csi),
        threshold_cm=threshold_cm,
        n_images=n_images,
    )


def evaluate_arrays(sr, fg, cg, threshold_cm):
    """Report over aligned stacks of depth maps (cm), pooling all pixels."""
    sr, fg, cg = (np.asarray(x, dtype=np.float64) for x in (sr, fg, cg))
    if not sr.shape == fg.shape == cg.shape:
        raise DimensionError("sr/fg/cg stacks must share a shape")
    n_images = sr.shape[0] if sr.ndim == 3 else 1
    fg_mask = fg > threshold_cm
    counts_cg = confusion(cg > threshold_cm, fg_mask)
    counts_sr = confusion(sr > threshold_cm, fg_mask)
    return build_report(
        counts_cg=counts_cg,
        counts_sr=counts_sr,
        cg_fg_mse=mse(cg, fg),
        sr_fg_mse=mse(sr, fg),
        threshold_cm=threshold_cm,
        n_images=n_images,
    )


def evaluate_run(sr_dir, fg_dir, cg_dir, threshold, sample_n=None, seed=0):
    """Evaluate a directory of super-resolved rasters against references.

    Files are matched by name across the three directories (the fine-grid
    directory defines the population). A deterministic subset of sample_n
    images is drawn when the population is larger.
    """
    names = sorted(
        f for f in os.listdir(fg_dir) if f.endswith(".fmap")
    )
    if not names:
        raise FileNotFoundError(f"no rasters in {fg_dir}")
    if sample_n is not None and sample_n < len(names):
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(names), size=sample_n, replace=False)
        names = [names[i] for i in sorted(chosen)]

    sq_cg = sq_sr = 0.0
    px = 0
    counts_cg = InundationCounts()
    counts_sr = InundationCounts()
    for name in names:
        fg_path = os.path.join(fg_dir, name)
        sr_path = os.path.join(sr_dir, name)
        cg_path = os.path.join(cg_dir, name)
        for p in (sr_path, cg_path):
            if not os.path.exists(p):
                raise FileNotFoundError(f"missing counterpart raster {p}")
        _, fg_map = fmap.read_single_channel(fg_path)
        _, sr_map = fmap.read_single_channel(sr_path)
        _, cg_map = fmap.read_single_channel(cg_path)
        if fg_map.shape != sr_map.shape or fg_map.shape != cg_map.shape:
            raise DimensionError(f"raster {name} shapes disagree across directories")
        fgm = fg_map.astype(np.float64)
        sq_cg += float(((cg_map - fgm) ** 2).sum())
        sq_sr += float(((sr_map - fgm) ** 2).sum())
        px += fg_map.size
        truth = fgm > threshold
        counts_cg = counts_cg + confusion(cg_map > threshold, truth)
        counts_sr = counts_sr + confusion(sr_map > threshold, truth)

    return build_report(
        counts_cg=counts_cg,
        counts_sr=counts_sr,
        cg_fg_mse=sq_cg / px,
        sr_fg_mse=sq_sr / px,
        threshold_cm=threshold,
        n_images=len(names),
    )


def write_difference_pgm(path, reference, other, span=None):
    """16-bit grayscale PGM of (reference - other), mid-gray at zero."""
    diff = _depths(reference) - _depths(other)
    if span is None:
        span = max(float(np.abs(diff).max()), 1e-9)
    unit = np.clip((diff + span) / (2.0 * span), 0.0, 1.0)
    pixels = np.round(unit * 65535).astype(">u2")
    header = f"P5\n{diff.shape[1]} {diff.shape[0]}\n65535\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + pixels.tobytes())
