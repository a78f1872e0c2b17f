"""Multi-scan accumulation and reference-consistency cleaning.

Ground truth for depth benchmarks is built by merging several registered
sparse scans (raising density) and then rejecting merged points that
disagree with an independent reference depth estimate (removing ghosts
from dynamic objects, occlusions, and reflective surfaces):

  * accumulate: per pixel, the minimum observed depth across scans
    (nearest surface wins, emulating z-buffered reprojection);
  * clean: an accumulated point survives where the reference is
    unobserved or the relative depth error |acc - ref| / ref stays below
    the threshold; rejected points become unobserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NonPositiveDepthError, ShapeMismatchError
from .metrics import MetricsReport, evaluate

__all__ = ["FusionConfig", "FusionResult", "accumulate", "clean", "fuse_pipeline"]


@dataclass
class FusionConfig:
    n_scans: int = 11
    rel_error_threshold: float = 0.05

    def __post_init__(self) -> None:
        if self.n_scans < 1:
            raise ValueError(f"n_scans must be >= 1, got {self.n_scans}")
        if not self.rel_error_threshold > 0:
            raise ValueError(
                f"rel_error_threshold must be > 0, got {self.rel_error_threshold}"
            )


def accumulate(scans: Sequence[np.ndarray]) -> np.ndarray:
    """Merge scans pixelwise, keeping the smallest observed depth."""
    if len(scans) == 0:
        raise ValueError("need at least one scan to accumulate")
    first = np.asarray(scans[0], dtype=np.float64)
    merged = np.full_like(first, np.inf)
    for scan in scans:
        scan = np.asarray(scan, dtype=np.float64)
        if scan.shape != first.shape:
            raise ShapeMismatchError(f"scan shapes {first.shape} and {scan.shape} differ")
        np.minimum(merged, np.where(scan > 0, scan, np.inf), out=merged)
    return np.where(np.isfinite(merged), merged, 0.0)


def clean(acc: np.ndarray, reference: np.ndarray, cfg: FusionConfig) -> np.ndarray:
    """Drop accumulated points that contradict the reference depth.

    Surviving values are passed through unchanged; where the reference is
    unobserved the accumulated point is kept (nothing to check against).
    """
    acc = np.asarray(acc, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if acc.shape != reference.shape:
        raise ShapeMismatchError(f"shapes {acc.shape} and {reference.shape} differ")
    if (reference < 0).any():
        raise NonPositiveDepthError("reference depth must be >= 0 (0 = unobserved)")
    ref_valid = reference > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(acc - reference) / np.where(ref_valid, reference, 1.0)
    keep = ~ref_valid | (rel < cfg.rel_error_threshold)
    return np.where(keep & (acc > 0), acc, 0.0)


@dataclass
class FusionResult:
    cleaned: np.ndarray
    report_raw: MetricsReport
    report_accumulated: MetricsReport
    report_cleaned: MetricsReport


def fuse_pipeline(
    scans: Sequence[np.ndarray],
    reference: np.ndarray,
    truth: np.ndarray,
    cfg: FusionConfig,
    unit: str = "disparity_px",
) -> FusionResult:
    """Accumulate, clean, and score raw/accumulated/cleaned against truth.

    The raw row scores the first scan. Each map is evaluated only where it
    is observed and the truth is valid, with its own fill fraction
    reported as density.
    """
    acc = accumulate(scans)
    cleaned = clean(acc, reference, cfg)
    raw = np.asarray(scans[0], dtype=np.float64)
    return FusionResult(
        cleaned=cleaned,
        report_raw=evaluate(raw, truth, unit=unit, mask=raw > 0),
        report_accumulated=evaluate(acc, truth, unit=unit, mask=acc > 0),
        report_cleaned=evaluate(cleaned, truth, unit=unit, mask=cleaned > 0),
    )
