"""Depth/disparity evaluation measures.

All statistics run over pixels valid in the ground truth (optionally
further restricted by a prediction validity mask, for evaluating sparse
maps). Errors are e = pred - gt:

  * mae  = mean |e|
  * rmse = sqrt(mean e^2)
  * delta_i inlier: max(pred/gt, gt/pred) < 1.25**i, i in {1, 2, 3}
    (strict inequality; a non-positive prediction can never be an inlier)
  * outlier (disparity mode only): |e| >= 3 disparity px AND |e|/gt >= 5%

The unit flag only switches the outlier rule on or off; converting depth
to disparity is the caller's business.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepthError, NoValidPixelsError, ShapeMismatchError

__all__ = [
    "MetricsReport",
    "evaluate",
    "report_to_json",
    "report_to_csv_row",
    "METRICS_CSV_HEADER",
]

UNITS = ("meters", "disparity_px")

KITTI_ABS_THRESHOLD = 3.0  # disparity pixels
KITTI_REL_THRESHOLD = 0.05

METRICS_CSV_HEADER = "mae,rmse,delta1,delta2,delta3,kitti_outlier_rate,density,n_valid"


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    kitti_outlier_rate: float | None  # None outside disparity mode
    density: float
    n_valid: int

    def __post_init__(self) -> None:
        if self.n_valid < 1:
            raise NoValidPixelsError("a metrics report needs at least one evaluated pixel")
        if not self.delta1 <= self.delta2 <= self.delta3:
            raise ValueError("delta inlier rates must be monotone")
        for name in ("delta1", "delta2", "delta3", "density"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.kitti_outlier_rate is not None and not 0.0 <= self.kitti_outlier_rate <= 1.0:
            raise ValueError(f"kitti_outlier_rate must lie in [0, 1], got {self.kitti_outlier_rate}")
        # power-mean inequality, with one-ulp slack for the all-equal-errors case
        if not (self.mae >= 0 and self.mae <= self.rmse * (1 + 1e-12) + 1e-300):
            raise ValueError(f"need 0 <= mae <= rmse, got mae={self.mae}, rmse={self.rmse}")


def evaluate(
    pred: np.ndarray,
    gt: np.ndarray,
    unit: str = "meters",
    mask: np.ndarray | None = None,
    gt_valid: np.ndarray | None = None,
    density: float | None = None,
) -> MetricsReport:
    """Score a prediction against ground truth over valid pixels.

    pred and gt may have any (equal) shape. Ground-truth validity defaults
    to gt > 0; pass `gt_valid` to override. `mask` marks which predicted
    pixels exist (for scoring sparse maps): evaluation restricts to pixels
    valid on both sides and the report's density defaults to the mask's
    fill fraction (1.0 without a mask). `density` overrides that field,
    e.g. to record the completion input density.
    """
    if unit not in UNITS:
        raise ValueError(f"unit must be one of {UNITS}, got {unit!r}")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred shape {pred.shape} != gt shape {gt.shape}")

    valid = (gt > 0) if gt_valid is None else np.asarray(gt_valid).astype(bool)
    if valid.shape != gt.shape:
        raise ShapeMismatchError(f"gt_valid shape {valid.shape} != gt shape {gt.shape}")
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != pred.shape:
            raise ShapeMismatchError(f"mask shape {mask.shape} != pred shape {pred.shape}")
        valid = valid & (mask > 0)

    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NoValidPixelsError("no pixels are valid in both ground truth and mask")
    p = pred[valid]
    g = gt[valid]
    if (g <= 0).any():
        raise NonPositiveDepthError(
            "ground truth must be > 0 at evaluated pixels for ratio-based metrics"
        )

    err = p - g
    abs_err = np.abs(err)
    mae = float(abs_err.mean())
    rmse = float(np.sqrt(np.mean(err * err)))

    with np.errstate(divide="ignore"):
        ratio = np.where(p > 0, np.maximum(p / g, g / p), np.inf)
    delta1 = float((ratio < 1.25).mean())
    delta2 = float((ratio < 1.25**2).mean())
    delta3 = float((ratio < 1.25**3).mean())

    kitti = None
    if unit == "disparity_px":
        outlier = (abs_err >= KITTI_ABS_THRESHOLD) & (abs_err / g >= KITTI_REL_THRESHOLD)
        kitti = float(outlier.mean())

    if density is None:
        density = float((np.asarray(mask) > 0).mean()) if mask is not None else 1.0

    return MetricsReport(
        mae=mae,
        rmse=rmse,
        delta1=delta1,
        delta2=delta2,
        delta3=delta3,
        kitti_outlier_rate=kitti,
        density=float(density),
        n_valid=n_valid,
    )


def _fmt(v: float | None) -> str:
    return "" if v is None else format(v, ".9g")


def report_to_json(r: MetricsReport) -> str:
    """Serialize with 9 significant digits per value."""
    payload = {
        "mae": float(_fmt(r.mae)),
        "rmse": float(_fmt(r.rmse)),
        "delta1": float(_fmt(r.delta1)),
        "delta2": float(_fmt(r.delta2)),
        "delta3": float(_fmt(r.delta3)),
        "kitti_outlier_rate": None if r.kitti_outlier_rate is None else float(_fmt(r.kitti_outlier_rate)),
        "density": float(_fmt(r.density)),
        "n_valid": r.n_valid,
    }
    return json.dumps(payload, sort_keys=True)


def report_to_csv_row(r: MetricsReport) -> str:
    """One CSV row in METRICS_CSV_HEADER field order."""
    return ",".join(
        [
            _fmt(r.mae),
            _fmt(r.rmse),
            _fmt(r.delta1),
            _fmt(r.delta2),
            _fmt(r.delta3),
            _fmt(r.kitti_outlier_rate),
            _fmt(r.density),
            str(r.n_valid),
        ]
    )
