"""Fully convolutional depth-completion networks assembled from layer ops.

Three variants share one trunk layout: five stride-1 convolutions with
kernel sizes 11, 7, 5, 3, 3 and 16 channels, each followed by a ReLU,
plus a linear 1x1 projection head down to the output channels.

  * "sparse":    mask-normalized convolutions throughout; the observation
                 mask is propagated layer to layer by window max.
  * "conv":      plain convolutions on the raw depth values (zeros where
                 nothing was measured).
  * "conv_mask": plain convolutions on the depth with the observation
                 mask concatenated as a second input channel.

Checkpoints use a little-endian binary format: magic "SCNN", a version
byte, a variant tag byte, a uint32 layer count, a (k, in_ch, out_ch)
uint32 table per layer, then per layer the float64 weights (C order) and
bias. The normalization epsilon and init seed are not serialized; loads
fall back to the defaults unless overridden.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointFormatError, ShapeMismatchError
from .layers import (
    ConvParams,
    DEFAULT_EPSILON,
    SparseConvConfig,
    _conv2d_backward_impl,
    _conv2d_forward_cached,
    _sparse_conv2d_backward_impl,
    _sparse_conv2d_forward_cached,
    concat_channels,
    relu_forward,
)
from .tensors import check_mask, check_tensor4

__all__ = [
    "VARIANTS",
    "NetworkSpec",
    "ModelState",
    "build",
    "forward",
    "backward",
    "parameter_count",
    "save",
    "load",
]

VARIANTS = ("sparse", "conv", "conv_mask")
_VARIANT_TAGS = {"sparse": 1, "conv": 2, "conv_mask": 3}
_TAG_VARIANTS = {v: k for k, v in _VARIANT_TAGS.items()}

_MAGIC = b"SCNN"
_VERSION = 1


@dataclass
class NetworkSpec:
    """Architecture description; defaults give the standard 5-layer trunk."""

    variant: str = "sparse"
    kernel_sizes: tuple[int, ...] = (11, 7, 5, 3, 3)
    channels: int = 16
    out_channels: int = 1
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.kernel_sizes = tuple(int(v) for v in self.kernel_sizes)
        if not self.kernel_sizes:
            raise ValueError("need at least one convolution layer")
        for ks in self.kernel_sizes:
            if ks < 1 or ks % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and >= 1, got {ks}")
        if self.channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")

    @property
    def in_channels(self) -> int:
        return 2 if self.variant == "conv_mask" else 1


@dataclass
class ModelState:
    """Trained or initialized parameters for one network."""

    variant: str
    layers: list[ConvParams]
    epsilon: float = DEFAULT_EPSILON
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_channels != prev.out_channels:
                raise ShapeMismatchError(
                    f"layer chain broken: {prev.out_channels} outputs feed "
                    f"{nxt.in_channels} inputs"
                )


def build(spec: NetworkSpec, seed: int = 0) -> ModelState:
    """Deterministically initialize all layers of the requested variant.

    Weights are zero-mean uniform with bound sqrt(6 / fan_in); biases are 0.
    The trunk layers are followed by a linear 1x1 head to `out_channels`.
    """
    rng = np.random.default_rng(seed)
    sizes = list(spec.kernel_sizes) + [1]
    chain = [spec.in_channels] + [spec.channels] * len(spec.kernel_sizes) + [spec.out_channels]
    params = []
    for ks, ci, co in zip(sizes, chain[:-1], chain[1:]):
        bound = np.sqrt(6.0 / (ci * ks * ks))
        weights = rng.uniform(-bound, bound, size=(co, ci, ks, ks))
        params.append(ConvParams(weights=weights, bias=np.zeros(co)))
    return ModelState(variant=spec.variant, layers=params, epsilon=spec.epsilon, seed=seed)


def parameter_count(model: ModelState) -> int:
    return sum(p.weights.size + p.bias.size for p in model.layers)


def forward(
    model: ModelState, depth: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray, list]:
    """Run the network; returns (prediction, output mask, cache for backward).

    `depth` must have one channel; `mask` marks its observed pixels. Dense
    variants return an all-ones output mask.
    """
    depth = check_tensor4(depth, "depth")
    mask = check_mask(mask, like=depth, name="mask")
    if depth.shape[1] != 1:
        raise ShapeMismatchError(f"depth must have 1 channel, got shape {depth.shape}")

    n_layers = len(model.layers)
    cache: list = []
    if model.variant == "sparse":
        # each layer past the first receives the previous pre-activation and
        # applies the ReLU fused into its observation gating
        x, o = depth, mask
        for idx, p in enumerate(model.layers):
            cfg = SparseConvConfig(p, epsilon=model.epsilon)
            pre, o_next, corr = _sparse_conv2d_forward_cached(
                x, o, cfg, relu_input=idx > 0
            )
            cache.append({"x": x, "o": o, "pre": pre, "corr": corr})
            x, o = pre, o_next
        return x, o, cache

    x = depth if model.variant == "conv" else concat_channels(depth, mask)
    for idx, p in enumerate(model.layers):
        pre, corr = _conv2d_forward_cached(x, p)
        out = relu_forward(pre) if idx < n_layers - 1 else pre
        cache.append({"x": x, "pre": pre, "corr": corr})
        x = out
    ones = np.ones((depth.shape[0], 1, depth.shape[2], depth.shape[3]))
    return x, ones, cache


def backward(model: ModelState, cache: list, d_prediction: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Chain-rule pass; returns per-layer (d_weights, d_bias) in layer order."""
    if len(cache) != len(model.layers):
        raise ShapeMismatchError(
            f"cache has {len(cache)} layers but model has {len(model.layers)}"
        )
    d_prediction = check_tensor4(d_prediction, "d_prediction")
    head = model.layers[-1]
    expected = (cache[-1]["pre"].shape[0], head.out_channels) + cache[-1]["pre"].shape[2:]
    if d_prediction.shape != expected:
        raise ShapeMismatchError(
            f"d_prediction shape {d_prediction.shape} does not match forward output {expected}"
        )

    # the ReLU between layer idx-1 and idx is handled while producing layer
    # idx's d_input, gated by the idx-1 pre-activation (one fused pass)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)  # type: ignore[list-item]
    g = d_prediction
    for idx in range(len(model.layers) - 1, -1, -1):
        entry = cache[idx]
        p = model.layers[idx]
        gate = cache[idx - 1]["pre"] if idx > 0 else None
        if model.variant == "sparse":
            lg = _sparse_conv2d_backward_impl(
                entry["x"], entry["o"], SparseConvConfig(p, epsilon=model.epsilon), g,
                entry["corr"], None, idx > 0, relu_gate=gate,
            )
        else:
            lg = _conv2d_backward_impl(
                entry["x"], p, g, entry["corr"], None, idx > 0, relu_gate=gate
            )
        grads[idx] = (lg.d_weights, lg.d_bias)
        g = lg.d_input
    return grads


def save(model: ModelState, path: str) -> None:
    """Write the checkpoint format described in the module docstring."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BB", _VERSION, _VARIANT_TAGS[model.variant]))
        f.write(struct.pack("<I", len(model.layers)))
        for p in model.layers:
            f.write(struct.pack("<III", p.k, p.in_channels, p.out_channels))
        for p in model.layers:
            f.write(np.ascontiguousarray(p.weights, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(p.bias, dtype="<f8").tobytes())


def load(path: str, spec: NetworkSpec | None = None, epsilon: float | None = None) -> ModelState:
    """Read a checkpoint; optionally validate it against an expected spec."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    if len(blob) < 10:
        raise CheckpointFormatError(f"{path}: truncated header")
    version, tag = struct.unpack_from("<BB", blob, 4)
    if version != _VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    if tag not in _TAG_VARIANTS:
        raise CheckpointFormatError(f"{path}: unknown variant tag {tag}")
    variant = _TAG_VARIANTS[tag]
    (n_layers,) = struct.unpack_from("<I", blob, 6)
    offset = 10
    table = []
    for _ in range(n_layers):
        if offset + 12 > len(blob):
            raise CheckpointFormatError(f"{path}: truncated layer table")
        table.append(struct.unpack_from("<III", blob, offset))
        offset += 12
    params = []
    for k, ci, co in table:
        ks = 2 * k + 1
        n_w = co * ci * ks * ks
        need = (n_w + co) * 8
        if offset + need > len(blob):
            raise CheckpointFormatError(
                f"{path}: payload truncated (need {need} bytes for layer, "
                f"{len(blob) - offset} left)"
            )
        weights = np.frombuffer(blob, dtype="<f8", count=n_w, offset=offset).reshape(co, ci, ks, ks)
        offset += n_w * 8
        bias = np.frombuffer(blob, dtype="<f8", count=co, offset=offset)
        offset += co * 8
        params.append(ConvParams(weights=weights.copy(), bias=bias.copy()))
    if offset != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - offset} trailing bytes")

    model = ModelState(
        variant=variant,
        layers=params,
        epsilon=DEFAULT_EPSILON if epsilon is None else epsilon,
    )
    if spec is not None:
        _check_against_spec(model, spec, path)
        if epsilon is None:
            model.epsilon = spec.epsilon
    return model


def _check_against_spec(model: ModelState, spec: NetworkSpec, path: str) -> None:
    if model.variant != spec.variant:
        raise ShapeMismatchError(
            f"{path}: checkpoint variant {model.variant!r} does not match spec {spec.variant!r}"
        )
    expected = build(spec, seed=0)
    if len(model.layers) != len(expected.layers):
        raise ShapeMismatchError(
            f"{path}: checkpoint has {len(model.layers)} layers, spec wants {len(expected.layers)}"
        )
    for i, (got, want) in enumerate(zip(model.layers, expected.layers)):
        if got.weights.shape != want.weights.shape:
            raise ShapeMismatchError(
                f"{path}: layer {i} weights {got.weights.shape} do not match "
                f"spec {want.weights.shape}"
            )
