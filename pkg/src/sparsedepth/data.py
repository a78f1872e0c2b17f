"""Synthetic depth scenes, sparsification, and 16-bit PGM depth files.

A depth map is a 2-D float64 array in meters with 0 meaning "no
measurement"; its observation mask is simply depth > 0. Scenes are a
ground plane receding from the bottom of the image upward, occluded by
axis-aligned rectangles at constant or ramped depth (nearest surface
wins), which reproduces the structure depth completion has to cope with:
smooth surfaces separated by discontinuities.

On disk a depth map is a binary PGM ("P5", maxval 65535, big-endian
16-bit samples) storing round(depth_m * 256), i.e. 1/256 m resolution up
to 255.996 m, with 0 reserved for unobserved pixels. Dataset directories
hold `<index>_sparse.pgm` / `<index>_dense.pgm` pairs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PgmFormatError, ShapeMismatchError

__all__ = [
    "SceneConfig",
    "generate_scene",
    "sparsify",
    "depth_mask",
    "to_network_inputs",
    "read_depth_pgm",
    "write_depth_pgm",
    "write_scene_pair",
    "list_scene_pairs",
    "make_batch_source",
    "eval_sparsify_seed",
]

PGM_MAXVAL = 65535
PGM_SCALE = 256.0

# fixed tag deriving the sparsify streams used by evaluation, so training-time
# and standalone evaluation of the same data agree exactly
_EVAL_STREAM_TAG = 714025
# tag separating per-iteration training dropout streams from everything else
_TRAIN_STREAM_TAG = 557075


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    min_depth: float = 2.0
    max_depth: float = 80.0
    n_boxes: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError("scene dimensions must be >= 1")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError(
                f"need 0 < min_depth < max_depth, got [{self.min_depth}, {self.max_depth}]"
            )
        if self.n_boxes < 0:
            raise ValueError("n_boxes must be >= 0")


def generate_scene(cfg: SceneConfig) -> np.ndarray:
    """Deterministic dense scene: receding ground plane plus box occluders.

    The plane's near and far depths are drawn per scene, so absolute depth
    cannot be inferred from image position alone and a completion method
    must actually read the measurements.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    span = cfg.max_depth - cfg.min_depth
    near = cfg.min_depth + span * rng.uniform(0.0, 0.4)
    far = near + span * rng.uniform(0.3, 0.6)
    far = min(far, cfg.max_depth)
    # bottom row nearest, strictly increasing toward the top
    if h > 1:
        rows = near + (far - near) * ((h - 1 - np.arange(h)) / (h - 1))
    else:
        rows = np.full(1, near)
    depth = np.tile(rows[:, None], (1, w))

    for _ in range(cfg.n_boxes):
        bh = int(rng.integers(h // 8 + 1, max(h // 2, h // 8 + 2)))
        bw = int(rng.integers(w // 8 + 1, max(w // 2, w // 8 + 2)))
        top = int(rng.integers(0, max(h - bh, 1)))
        left = int(rng.integers(0, max(w - bw, 1)))
        d0 = rng.uniform(cfg.min_depth, cfg.max_depth)
        if rng.random() < 0.5:
            box = np.full((bh, bw), d0)
        else:
            d1 = rng.uniform(cfg.min_depth, cfg.max_depth)
            box = np.linspace(d0, d1, bh)[:, None] * np.ones((1, bw))
        region = depth[top : top + bh, left : left + bw]
        np.minimum(region, box, out=region)
    return depth


def depth_mask(depth: np.ndarray) -> np.ndarray:
    return (depth > 0).astype(np.float64)


def sparsify(depth: np.ndarray, keep_prob: float, seed) -> np.ndarray:
    """Independently keep each observed pixel with probability keep_prob.

    Kept values are unchanged; dropped pixels become unobserved (0).
    `seed` is any numpy seed material (int or sequence of ints).
    """
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep probability must be in (0, 1], got {keep_prob}")
    depth = np.asarray(depth, dtype=np.float64)
    if keep_prob == 1.0:
        return depth.copy()
    rng = np.random.default_rng(seed)
    keep = rng.random(depth.shape) < keep_prob
    return np.where(keep & (depth > 0), depth, 0.0)


def to_network_inputs(depths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stack (m, h, w) or (h, w) depth maps into network (m, 1, h, w) tensors."""
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim == 2:
        depths = depths[None]
    if depths.ndim != 3:
        raise ShapeMismatchError(f"expected (m, h, w) depth maps, got shape {depths.shape}")
    t = depths[:, None, :, :]
    return t, (t > 0).astype(np.float64)


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------


def write_depth_pgm(depth: np.ndarray, path: str | Path) -> None:
    """Store a depth map as 16-bit binary PGM at 1/256 m resolution.

    Raises if an observed depth would quantize to 0 or overflow 16 bits,
    so the observation mask always survives a round trip.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ShapeMismatchError(f"depth map must be 2-D, got shape {depth.shape}")
    if (depth < 0).any() or not np.all(np.isfinite(depth)):
        raise ValueError("depth values must be finite and >= 0")
    samples = np.rint(depth * PGM_SCALE)
    observed = depth > 0
    if (samples[observed] < 1).any():
        raise ValueError("observed depth below the 1/256 m quantization floor")
    if (samples > PGM_MAXVAL).any():
        raise ValueError(f"depth exceeds the representable maximum {PGM_MAXVAL / PGM_SCALE} m")
    h, w = depth.shape
    header = f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii")
    Path(path).write_bytes(header + samples.astype(">u2").tobytes())


def read_depth_pgm(path: str | Path) -> np.ndarray:
    """Parse the PGM format written by `write_depth_pgm`."""
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4 and pos < len(blob):
        if blob[pos : pos + 1].isspace():
            pos += 1
            continue
        if blob[pos : pos + 1] == b"#":  # comment runs to end of line
            nl = blob.find(b"\n", pos)
            pos = len(blob) if nl < 0 else nl + 1
            continue
        m = re.match(rb"\S+", blob[pos:])
        if m is None:
            break
        fields.append(m.group(0))
        pos += m.end()
    if len(fields) < 4:
        raise PgmFormatError(f"{path}: incomplete header")
    if fields[0] != b"P5":
        raise PgmFormatError(f"{path}: bad magic {fields[0]!r}, expected b'P5'")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise PgmFormatError(f"{path}: non-numeric header field") from exc
    if maxval != PGM_MAXVAL:
        raise PgmFormatError(f"{path}: maxval {maxval}, expected {PGM_MAXVAL}")
    pos += 1  # single whitespace byte after maxval
    payload = blob[pos : pos + 2 * w * h]
    if len(payload) != 2 * w * h:
        raise PgmFormatError(
            f"{path}: truncated payload, got {len(payload)} of {2 * w * h} bytes"
        )
    samples = np.frombuffer(payload, dtype=">u2").reshape(h, w)
    return samples.astype(np.float64) / PGM_SCALE


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def write_scene_pair(out_dir: str | Path, index: int, sparse: np.ndarray, dense: np.ndarray) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_depth_pgm(sparse, out / f"{index:04d}_sparse.pgm")
    write_depth_pgm(dense, out / f"{index:04d}_dense.pgm")


def list_scene_pairs(data_dir: str | Path) -> list[tuple[Path, Path]]:
    """Sorted (sparse, dense) path pairs found in a dataset directory."""
    root = Path(data_dir)
    pairs = []
    for dense in sorted(root.glob("*_dense.pgm")):
        sparse = dense.with_name(dense.name.replace("_dense", "_sparse"))
        if sparse.exists():
            pairs.append((sparse, dense))
    if not pairs:
        raise FileNotFoundError(f"no *_sparse.pgm/*_dense.pgm pairs under {root}")
    return pairs


def load_dense_scenes(data_dir: str | Path) -> np.ndarray:
    pairs = list_scene_pairs(data_dir)
    return np.stack([read_depth_pgm(dense) for _, dense in pairs])


# ---------------------------------------------------------------------------
# batch streams
# ---------------------------------------------------------------------------


def make_batch_source(
    dense_scenes: np.ndarray,
    density: float,
    batch_size: int,
    seed: int,
    targets: np.ndarray | None = None,
):
    """Deterministic per-iteration batches with fresh dropout each time.

    Iteration i samples batch_size scenes (with replacement) and applies
    an i-specific dropout pattern at the requested density. The regression
    target defaults to the dense scene itself; target validity is its
    observed (> 0) set.
    """
    dense_scenes = np.asarray(dense_scenes, dtype=np.float64)
    if dense_scenes.ndim != 3:
        raise ShapeMismatchError(f"expected (m, h, w) scenes, got {dense_scenes.shape}")
    if targets is None:
        targets = dense_scenes
    else:
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != dense_scenes.shape:
            raise ShapeMismatchError(
                f"target shape {targets.shape} != scene shape {dense_scenes.shape}"
            )
    if not 0 < density <= 1:
        raise ValueError(f"density must be in (0, 1], got {density}")
    m = dense_scenes.shape[0]

    def source(iteration: int):
        rng = np.random.default_rng([_TRAIN_STREAM_TAG, seed, iteration])
        idx = rng.integers(0, m, size=batch_size)
        dense = dense_scenes[idx]
        keep = rng.random(dense.shape) < density
        sparse = np.where(keep & (dense > 0), dense, 0.0)
        depth, mask = to_network_inputs(sparse)
        target, _ = to_network_inputs(targets[idx])
        return depth, mask, target, (target > 0).astype(np.float64)

    return source


def eval_sparsify_seed(index: int, density: float) -> list[int]:
    """Seed material for the canonical evaluation dropout of scene `index`.

    Shared by in-training evaluation and the standalone evaluator so the
    same data and density always yield the same sparse inputs.
    """
    return [_EVAL_STREAM_TAG, int(index), int(round(density * 1e9))]
