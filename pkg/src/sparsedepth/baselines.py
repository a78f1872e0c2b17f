"""Classical depth-only completion baselines.

Two non-learned references for filling sparse depth maps:

  * Nadaraya-Watson regression with a truncated Gaussian kernel: each
    pixel's estimate is the kernel-weighted average of all observations
    within a support radius.
  * Closest-depth pooling: each unobserved pixel takes the nearest-to-
    sensor (smallest) observed depth in a square window; observed pixels
    pass through unchanged.

Both read a 2-D depth map with 0 meaning unobserved and leave pixels
with no observation in range unobserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoValidPixelsError

__all__ = ["NWConfig", "PoolConfig", "nadaraya_watson", "closest_depth_pool"]


@dataclass
class NWConfig:
    """Gaussian kernel bandwidth (pixels) and truncation radius.

    The kernel is exp(-d^2 / (2 h^2)) over Euclidean pixel distance d,
    truncated at d > radius. The default radius is ceil(3 h), beyond which
    weights are below ~1e-2 of the peak.
    """

    bandwidth: float = 2.0
    radius: int | None = None

    def __post_init__(self) -> None:
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.radius is None:
            self.radius = max(1, math.ceil(3.0 * self.bandwidth))
        if self.radius < 1:
            raise ValueError(f"support radius must be >= 1, got {self.radius}")


@dataclass
class PoolConfig:
    radius: int = 2

    def __post_init__(self) -> None:
        if self.radius < 1:
            raise ValueError(f"window radius must be >= 1, got {self.radius}")


def nadaraya_watson(depth: np.ndarray, cfg: NWConfig) -> np.ndarray:
    """Kernel-regress a dense map from the observed pixels.

    Output pixels with no observation within the support radius stay 0.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth map must be 2-D, got shape {depth.shape}")
    mask = (depth > 0).astype(np.float64)
    if not mask.any():
        raise NoValidPixelsError("kernel regression needs at least one observed pixel")

    r = int(cfg.radius)
    h2 = 2.0 * cfg.bandwidth * cfg.bandwidth
    dpad = np.pad(depth * mask, r)
    mpad = np.pad(mask, r)
    hh, ww = depth.shape
    num = np.zeros_like(depth)
    den = np.zeros_like(depth)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            d2 = dy * dy + dx * dx
            if d2 > r * r:
                continue
            kern = math.exp(-d2 / h2)
            sl = np.s_[r + dy : r + dy + hh, r + dx : r + dx + ww]
            num += kern * dpad[sl]
            den += kern * mpad[sl]
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def closest_depth_pool(depth: np.ndarray, cfg: PoolConfig) -> np.ndarray:
    """Fill unobserved pixels with the smallest observed depth in the window."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth map must be 2-D, got shape {depth.shape}")
    r = int(cfg.radius)
    hh, ww = depth.shape
    padded = np.pad(np.where(depth > 0, depth, np.inf), r, constant_values=np.inf)
    nearest = np.full_like(depth, np.inf)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            np.minimum(nearest, padded[r + dy : r + dy + hh, r + dx : r + dx + ww], out=nearest)
    filled = np.where(np.isfinite(nearest), nearest, 0.0)
    return np.where(depth > 0, depth, filled)
