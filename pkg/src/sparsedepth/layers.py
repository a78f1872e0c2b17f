"""Layer forward/backward passes for sparsity-aware convolutional networks.

The central operation is a mask-normalized convolution: at every output
pixel the kernel is applied only to observed inputs and the weighted sum
is divided by the number of observed pixels in the window (plus a small
epsilon guard), so the response is invariant to how densely the window
happens to be sampled. Alongside each feature map a binary observation
mask is propagated: an output pixel counts as observed when its window
saw at least one observed input (a window max, i.e. dilation of the mask).

Conventions:
  * feature tensors are float64 arrays of shape (batch, channels, h, w);
  * masks are float64 {0,1} arrays of shape (batch, 1, h, w), shared
    across channels;
  * all convolutions are stride 1 with "same" output size; the border is
    treated as unobserved (mask padded with 0, values padded with 0);
  * where a window contains no observed pixel the feature output is
    exactly the bias and the output mask is 0 - consumers must consult
    the mask;
  * masks are data, not parameters: no gradient flows into them or
    through the normalization denominator.

Two execution paths compute identical quantities: a direct im2col path
(exact summation, used for small images) and an FFT path (used for large
images, where it is an order of magnitude faster; accurate to ~1e-13
relative). The automatic choice depends only on the input shape, so
results are deterministic for fixed shapes. Gradients are hand-derived;
see `gradcheck` for finite-difference verification.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError
from .tensors import check_mask, check_tensor4

__all__ = [
    "ConvParams",
    "SparseConvConfig",
    "LayerGrads",
    "DEFAULT_EPSILON",
    "conv2d_forward",
    "conv2d_backward",
    "sparse_conv2d_forward",
    "sparse_conv2d_backward",
    "mask_maxpool",
    "window_count",
    "relu_forward",
    "relu_backward",
    "concat_channels",
    "split_channels",
    "normalized_skip_sum",
    "normalized_skip_sum_backward",
]

DEFAULT_EPSILON = 1e-8

# Images with more pixels than this run through the FFT path.
_FFT_PIXEL_THRESHOLD = 2048
# scipy.fft thread count; values are identical for any setting. Capped via
# environment when several runs share a machine.
_WORKERS = int(os.environ.get("SPARSEDEPTH_WORKERS", "-1") or "-1")


@dataclass
class ConvParams:
    """Weights and bias of one convolution layer.

    weights has shape (out_channels, in_channels, 2k+1, 2k+1) with an odd
    square kernel; bias has shape (out_channels,).
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ShapeMismatchError(
                f"weights must be 4-D (out, in, kh, kw), got shape {self.weights.shape}"
            )
        kh, kw = self.weights.shape[2:]
        if kh != kw or kh % 2 == 0:
            raise ShapeMismatchError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output channels"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("weights and bias must be finite")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def k(self) -> int:
        """Kernel half-width; the kernel covers (2k+1)^2 pixels."""
        return self.weights.shape[2] // 2


@dataclass
class SparseConvConfig:
    """A convolution plus the denominator guard for the mask normalization."""

    params: ConvParams
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class LayerGrads:
    """Gradients of a scalar loss w.r.t. one layer's weights, bias, and input."""

    d_weights: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray


# ---------------------------------------------------------------------------
# correlation engine
# ---------------------------------------------------------------------------
#
# All convolutions here are cross-correlations with implicit zero padding
# of k on every side ("same" output size). The FFT path evaluates them as
# circular correlations at size L >= h + 2k, which leaves the needed output
# window free of wrap-around:
#   forward      out[t] = sum_i xp[i+t] w[i]          = irfft(XP . conj(W))[0:h]
#   input grad   dxp[t] = sum_u g[u] w[t-u]           = irfft(G . W)[0:h+2k], crop k:k+h
#   weight grad  dw[t]  = sum_{n,u} g[u] xp[u+t]      = irfft(XP . conj(G))[0:2k+1]
# with XP the transform of the padded input and G of the upstream gradient.


def _pick_method(h: int, w: int, kernel_size: int, method: str | None) -> str:
    if method is not None and method not in ("direct", "fft"):
        raise ValueError(f"unknown conv method {method!r}")
    if kernel_size == 1:
        return "point"  # 1x1 kernels collapse to a channel matmul
    if method is not None:
        return method
    if h * w > _FFT_PIXEL_THRESHOLD:
        return "fft"
    return "direct"


@dataclass
class _CorrCache:
    method: str
    in_shape: tuple[int, ...]
    kernel_size: int
    # direct path
    cols: np.ndarray | None = None
    # fft path
    fft_shape: tuple[int, int] | None = None
    xq: np.ndarray | None = None  # (A, B, n, ci) transform of padded input
    wf: np.ndarray | None = None  # (co, ci, A, B) transform of the kernel
    gq: np.ndarray | None = None  # (A, B, n, co) transform of the upstream gradient
    # sparse-conv extras kept from the forward pass
    inv: np.ndarray | None = None  # masked 1/(count+eps), 0 at empty windows
    xo: np.ndarray | None = None


def _pad_k(x: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (k, k), (k, k)))


def _rfft2_kernel(weights: np.ndarray, l1: int, l2: int) -> np.ndarray:
    """rfft2 of a small-support kernel, staged so the row FFT skips the padding.

    Bitwise identical to `rfft2(weights, s=(l1, l2))`: the zero rows the full
    transform would process contribute exact zero columns either way.
    """
    stage1 = sfft.rfft(weights, n=l2, axis=3, workers=_WORKERS)
    return sfft.fft(stage1, n=l1, axis=2, workers=_WORKERS)


_corner_twiddle_cache: dict[tuple[int, int], np.ndarray] = {}


def _corner_twiddles(l1: int, ks: int) -> np.ndarray:
    key = (l1, ks)
    tw = _corner_twiddle_cache.get(key)
    if tw is None:
        r = np.arange(ks)[:, None]
        f = np.arange(l1)[None, :]
        tw = np.exp(2j * np.pi * f * r / l1) / l1
        _corner_twiddle_cache[key] = tw
    return tw


def _irfft2_corner(spec: np.ndarray, l1: int, l2: int, ks: int) -> np.ndarray:
    """Top-left (ks, ks) corner of the inverse 2-D real transform.

    spec is laid out (l1, l2c, ci, co); the row-direction inverse is taken
    only at the ks needed points with one DFT-matrix GEMM over the leading
    axis, then the column inverse runs on just those rows. Returns
    (co, ci, ks, ks).
    """
    l2c = spec.shape[1]
    ci, co = spec.shape[2], spec.shape[3]
    rows = (_corner_twiddles(l1, ks) @ spec.reshape(l1, -1)).reshape(ks, l2c, ci, co)
    rows = np.ascontiguousarray(rows.transpose(3, 2, 0, 1))  # (co, ci, ks, l2c), small
    return np.ascontiguousarray(sfft.irfft(rows, n=l2, axis=-1, workers=_WORKERS)[..., :ks])


def _im2col(xp: np.ndarray, kernel_size: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kernel_size, kernel_size), axis=(2, 3))
    h, w = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h * w, c * kernel_size * kernel_size
    )


def _corr_forward(
    x: np.ndarray, weights: np.ndarray, method: str | None
) -> tuple[np.ndarray, _CorrCache]:
    """Same-size cross-correlation of x with a (co, ci, K, K) kernel stack."""
    n, ci, h, w = x.shape
    co, ci_w, kernel_size, _ = weights.shape
    if ci_w != ci:
        raise ShapeMismatchError(
            f"input has {ci} channels but kernel expects {ci_w} (shapes {x.shape}, {weights.shape})"
        )
    k = kernel_size // 2
    chosen = _pick_method(h, w, kernel_size, method)

    if chosen == "point":
        out = np.tensordot(weights[:, :, 0, 0], x, axes=([1], [1]))  # (co, n, h, w)
        return out.transpose(1, 0, 2, 3), _CorrCache("point", x.shape, kernel_size)

    if chosen == "direct":
        cols = _im2col(_pad_k(x, k), kernel_size)
        out = cols @ weights.reshape(co, -1).T
        out = out.reshape(n, h, w, co).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), _CorrCache("direct", x.shape, kernel_size, cols=cols)

    l1 = sfft.next_fast_len(h + 2 * k)
    l2 = sfft.next_fast_len(w + 2 * k)
    xpf = sfft.rfft2(_pad_k(x, k), s=(l1, l2), workers=_WORKERS)
    xq = np.ascontiguousarray(xpf.transpose(2, 3, 0, 1))  # (A,B,n,ci)
    wf = _rfft2_kernel(weights, l1, l2)  # (co,ci,A,B)
    wq = np.conj(wf.transpose(2, 3, 1, 0))  # (A,B,ci,co), contiguous copy
    yq = xq @ wq
    # pocketfft takes the strided view directly; the crop stays a view too
    y = sfft.irfft2(yq.transpose(2, 3, 0, 1), s=(l1, l2), workers=_WORKERS)[:, :, :h, :w]
    cache = _CorrCache("fft", x.shape, kernel_size, fft_shape=(l1, l2), xq=xq, wf=wf)
    return y, cache


def _corr_dx(g: np.ndarray, weights: np.ndarray, cache: _CorrCache) -> np.ndarray:
    """Gradient w.r.t. the (unpadded) input of `_corr_forward`."""
    n, ci, h, w = cache.in_shape
    kernel_size = cache.kernel_size
    k = kernel_size // 2

    if cache.method == "point":
        dx = np.tensordot(weights[:, :, 0, 0], g, axes=([0], [1]))  # (ci, n, h, w)
        return dx.transpose(1, 0, 2, 3)

    if cache.method == "direct":
        # full correlation with channel-swapped, spatially flipped kernels
        wt = np.ascontiguousarray(weights.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        out, _ = _corr_forward(g, wt, method="direct")
        return out

    l1, l2 = cache.fft_shape
    gf = sfft.rfft2(g, s=(l1, l2), workers=_WORKERS)
    gq = np.ascontiguousarray(gf.transpose(2, 3, 0, 1))  # (A,B,n,co)
    wd = np.ascontiguousarray(cache.wf.transpose(2, 3, 0, 1))  # (A,B,co,ci)
    dxq = gq @ wd
    dxp = sfft.irfft2(dxq.transpose(2, 3, 0, 1), s=(l1, l2), workers=_WORKERS)
    cache.gq = gq  # stashed for a following _corr_dw call
    return dxp[:, :, k : k + h, k : k + w]


def _corr_dw(x: np.ndarray, g: np.ndarray, kernel_size: int, cache: _CorrCache) -> np.ndarray:
    """Gradient w.r.t. the kernel of `_corr_forward`, summed over the batch."""
    n, ci, h, w = cache.in_shape
    co = g.shape[1]
    k = kernel_size // 2

    if cache.method == "point":
        dw = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))  # (co, ci)
        return dw[:, :, None, None]

    if cache.method == "direct":
        cols = cache.cols if cache.cols is not None else _im2col(_pad_k(x, k), kernel_size)
        gc = g.transpose(0, 2, 3, 1).reshape(n * h * w, co)
        return np.ascontiguousarray(
            (gc.T @ cols).reshape(co, ci, kernel_size, kernel_size)
        )

    l1, l2 = cache.fft_shape
    gq = cache.gq
    if gq is None:
        gf = sfft.rfft2(g, s=(l1, l2), workers=_WORKERS)
        gq = np.ascontiguousarray(gf.transpose(2, 3, 0, 1))
    xq = cache.xq
    if xq is None:
        xpf = sfft.rfft2(_pad_k(x, k), s=(l1, l2), workers=_WORKERS)
        xq = np.ascontiguousarray(xpf.transpose(2, 3, 0, 1))
    # the swapped view is F-contiguous in its last two axes, so matmul feeds
    # BLAS a transpose flag instead of copying
    dwq = xq.swapaxes(-1, -2) @ np.conj(gq)  # (A,B,ci,co)
    return _irfft2_corner(dwq, l1, l2, kernel_size)


# ---------------------------------------------------------------------------
# mask bookkeeping
# ---------------------------------------------------------------------------


def window_count(o: np.ndarray, k: int) -> np.ndarray:
    """Number of observed pixels in each (2k+1)^2 window, border padded with 0.

    Computed with an integral image; counts are exact integers in float64.
    """
    o = check_mask(o)
    if k < 0:
        raise ValueError(f"window half-width must be >= 0, got {k}")
    if k == 0:
        return o.copy()
    kernel_size = 2 * k + 1
    h, w = o.shape[2], o.shape[3]
    op = _pad_k(o, k)
    ii = np.pad(op.cumsum(axis=2).cumsum(axis=3), ((0, 0), (0, 0), (1, 0), (1, 0)))
    ks = kernel_size
    return (
        ii[:, :, ks : ks + h, ks : ks + w]
        - ii[:, :, :h, ks : ks + w]
        - ii[:, :, ks : ks + h, :w]
        + ii[:, :, :h, :w]
    )


def mask_maxpool(o: np.ndarray, k: int) -> np.ndarray:
    """Window max of the mask: 1 where any observed pixel falls in the window.

    Equivalent to dilating the mask by a (2k+1)^2 square.
    """
    return (window_count(o, k) > 0).astype(np.float64)


# ---------------------------------------------------------------------------
# standard convolution
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, p: ConvParams, method: str | None = None) -> np.ndarray:
    """Stride-1 "same" convolution with zero-padded borders."""
    out, _ = _conv2d_forward_cached(check_tensor4(x), p, method)
    return out


def _conv2d_forward_cached(
    x: np.ndarray, p: ConvParams, method: str | None = None
) -> tuple[np.ndarray, _CorrCache]:
    out, cache = _corr_forward(x, p.weights, method)
    out += p.bias.reshape(1, -1, 1, 1)
    return out, cache


def conv2d_backward(
    x: np.ndarray,
    p: ConvParams,
    upstream: np.ndarray,
    cache: _CorrCache | None = None,
    method: str | None = None,
    need_input_grad: bool = True,
) -> LayerGrads:
    """Gradients of a scalar loss through `conv2d_forward`.

    `cache` may be the value produced by the matching forward pass; when
    omitted the needed intermediates are recomputed. With
    `need_input_grad=False` (an input layer) d_input is returned as zeros.
    """
    x = check_tensor4(x)
    upstream = check_tensor4(upstream, "upstream")
    return _conv2d_backward_impl(x, p, upstream, cache, method, need_input_grad)


def _conv2d_backward_impl(
    x: np.ndarray,
    p: ConvParams,
    upstream: np.ndarray,
    cache: _CorrCache | None,
    method: str | None,
    need_input_grad: bool,
    relu_gate: np.ndarray | None = None,
) -> LayerGrads:
    _check_backward_shapes(x, p, upstream)
    if cache is None:
        chosen = _pick_method(x.shape[2], x.shape[3], p.kernel_size, method)
        cache = _CorrCache(chosen, x.shape, p.kernel_size)
        if chosen == "fft":
            cache.fft_shape = (
                sfft.next_fast_len(x.shape[2] + 2 * p.k),
                sfft.next_fast_len(x.shape[3] + 2 * p.k),
            )
            xpf = sfft.rfft2(_pad_k(x, p.k), s=cache.fft_shape, workers=_WORKERS)
            cache.xq = np.ascontiguousarray(xpf.transpose(2, 3, 0, 1))
            cache.wf = _rfft2_kernel(p.weights, *cache.fft_shape)
    d_bias = upstream.sum(axis=(0, 2, 3))
    if need_input_grad:
        d_input = _corr_dx(upstream, p.weights, cache)
        if relu_gate is not None:
            d_input = np.where(relu_gate > 0, d_input, 0.0)
    else:
        d_input = np.zeros_like(x)
    d_weights = _corr_dw(x, upstream, p.kernel_size, cache)
    return LayerGrads(d_weights=d_weights, d_bias=d_bias, d_input=d_input)


def _check_backward_shapes(x: np.ndarray, p: ConvParams, upstream: np.ndarray) -> None:
    if x.shape[1] != p.in_channels:
        raise ShapeMismatchError(
            f"input has {x.shape[1]} channels but kernel expects {p.in_channels}"
        )
    expected = (x.shape[0], p.out_channels, x.shape[2], x.shape[3])
    if upstream.shape != expected:
        raise ShapeMismatchError(
            f"upstream gradient shape {upstream.shape} does not match forward output {expected}"
        )


# ---------------------------------------------------------------------------
# mask-normalized (sparse) convolution
# ---------------------------------------------------------------------------


def sparse_conv2d_forward(
    x: np.ndarray, o: np.ndarray, cfg: SparseConvConfig, method: str | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Convolve only observed inputs and normalize by the observation count.

    Per output pixel: (sum of o*x*w over the window) / (count of observed
    pixels + epsilon) + bias. The returned mask is the window max of `o`.
    Values at unobserved input pixels never influence the output; windows
    with no observed pixel produce exactly the bias and mask 0.
    """
    x = check_tensor4(x)
    o = check_mask(o, like=x)
    out, mask, _ = _sparse_conv2d_forward_cached(x, o, cfg, method)
    return out, mask


def _sparse_conv2d_forward_cached(
    x: np.ndarray,
    o: np.ndarray,
    cfg: SparseConvConfig,
    method: str | None = None,
    relu_input: bool = False,
) -> tuple[np.ndarray, np.ndarray, _CorrCache]:
    """With `relu_input`, x is a pre-activation and the ReLU is folded into
    the observation gating (one pass): where((o>0)&(x>0), x, 0) is exactly
    where(o>0, relu(x), 0)."""
    p = cfg.params
    if relu_input:
        xo = np.where((o > 0) & (x > 0), x, 0.0)
    else:
        xo = np.where(o > 0, x, 0.0)
    num, cache = _corr_forward(xo, p.weights, method)
    cnt = window_count(o, p.k)
    observed = cnt > 0
    # zeroing the inverse at empty windows makes their output exactly the bias
    inv = np.where(observed, 1.0 / (cnt + cfg.epsilon), 0.0)
    out = num * inv
    out += p.bias.reshape(1, -1, 1, 1)
    mask = observed.astype(np.float64)
    cache.inv = inv  # reused by the backward pass
    cache.xo = xo
    return out, mask, cache


def sparse_conv2d_backward(
    x: np.ndarray,
    o: np.ndarray,
    cfg: SparseConvConfig,
    upstream: np.ndarray,
    cache: _CorrCache | None = None,
    method: str | None = None,
    need_input_grad: bool = True,
) -> LayerGrads:
    """Gradients through `sparse_conv2d_forward`.

    The mask is non-differentiable data: no gradient flows into `o` or
    through the normalization denominator. Writing f = num/(cnt+eps) + b,
        d_weights = corr(o*x, upstream/(cnt+eps))
        d_input   = o * full_corr(upstream/(cnt+eps), w)
        d_bias    = sum of upstream
    with the normalized upstream zeroed at windows that saw no observation
    (their output is constant in w and x).
    """
    x = check_tensor4(x)
    o = check_mask(o, like=x)
    upstream = check_tensor4(upstream, "upstream")
    return _sparse_conv2d_backward_impl(x, o, cfg, upstream, cache, method, need_input_grad)


def _sparse_conv2d_backward_impl(
    x: np.ndarray,
    o: np.ndarray,
    cfg: SparseConvConfig,
    upstream: np.ndarray,
    cache: _CorrCache | None,
    method: str | None,
    need_input_grad: bool,
    relu_gate: np.ndarray | None = None,
) -> LayerGrads:
    """Backward pass; `relu_gate`, when given, is the pre-activation of the
    ReLU that consumed this layer's input, folded into the d_input masking
    (one fused pass instead of a separate relu_backward)."""
    p = cfg.params
    _check_backward_shapes(x, p, upstream)

    if cache is not None and cache.inv is not None:
        inv = cache.inv
        xo = cache.xo
    else:
        cnt = window_count(o, p.k)
        inv = np.where(cnt > 0, 1.0 / (cnt + cfg.epsilon), 0.0)
        xo = np.where(o > 0, x, 0.0)
        cache = None  # shape bookkeeping below rebuilds what the engine needs
    # normalized upstream; exactly zero at windows that saw no observation
    gn = upstream * inv

    if cache is None:
        chosen = _pick_method(x.shape[2], x.shape[3], p.kernel_size, method)
        cache = _CorrCache(chosen, x.shape, p.kernel_size)
        if chosen == "fft":
            cache.fft_shape = (
                sfft.next_fast_len(x.shape[2] + 2 * p.k),
                sfft.next_fast_len(x.shape[3] + 2 * p.k),
            )
            xpf = sfft.rfft2(_pad_k(xo, p.k), s=cache.fft_shape, workers=_WORKERS)
            cache.xq = np.ascontiguousarray(xpf.transpose(2, 3, 0, 1))
            cache.wf = _rfft2_kernel(p.weights, *cache.fft_shape)
        elif chosen == "direct":
            cache.cols = _im2col(_pad_k(xo, p.k), p.kernel_size)

    d_bias = upstream.sum(axis=(0, 2, 3))
    if need_input_grad:
        keep = (o > 0) if relu_gate is None else ((o > 0) & (relu_gate > 0))
        d_input = np.where(keep, _corr_dx(gn, p.weights, cache), 0.0)
    else:
        d_input = np.zeros_like(x)
    d_weights = _corr_dw(xo, gn, p.kernel_size, cache)
    return LayerGrads(d_weights=d_weights, d_bias=d_bias, d_input=d_input)


# ---------------------------------------------------------------------------
# pointwise and structural layers
# ---------------------------------------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass upstream where x > 0; subgradient at exactly 0 is 0."""
    if x.shape != upstream.shape:
        raise ShapeMismatchError(f"relu shapes {x.shape} and {upstream.shape} differ")
    return np.where(x > 0, upstream, 0.0)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack two tensors along the channel axis, a's channels first.

    Either operand may have zero channels; batch and spatial dims must match.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeMismatchError(f"concat expects 4-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatchError(
            f"concat: batch/spatial dims of {a.shape} and {b.shape} differ"
        )
    return np.concatenate([a, b], axis=1)


def split_channels(t: np.ndarray, c: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of `concat_channels`: first c channels and the rest."""
    if not 0 <= c <= t.shape[1]:
        raise ShapeMismatchError(f"cannot split {c} channels from shape {t.shape}")
    return t[:, :c], t[:, c:]


def normalized_skip_sum(
    inputs: Sequence[tuple[np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray]:
    """Mask-weighted average of several feature streams.

    Per pixel: sum of mask*value over streams divided by the number of
    streams observing that pixel; where no stream observes it the value
    is 0 and the output mask is 0. With everything observed this is the
    plain mean of the inputs. The output mask is the max of the inputs'.
    """
    if len(inputs) == 0:
        raise ValueError("normalized_skip_sum needs at least one input stream")
    x0 = check_tensor4(inputs[0][0])
    num = np.zeros_like(x0)
    cnt = np.zeros((x0.shape[0], 1, x0.shape[2], x0.shape[3]))
    for x, o in inputs:
        x = check_tensor4(x)
        o = check_mask(o, like=x)
        if x.shape != x0.shape:
            raise ShapeMismatchError(f"stream shapes {x0.shape} and {x.shape} differ")
        num += np.where(o > 0, x, 0.0)
        cnt += o
    observed = cnt > 0
    out = np.where(observed, num / np.where(observed, cnt, 1.0), 0.0)
    return out, observed.astype(np.float64)


def normalized_skip_sum_backward(
    inputs: Sequence[tuple[np.ndarray, np.ndarray]], upstream: np.ndarray
) -> list[np.ndarray]:
    """Gradient of `normalized_skip_sum` w.r.t. each input stream's values."""
    if len(inputs) == 0:
        raise ValueError("normalized_skip_sum needs at least one input stream")
    cnt = np.zeros((upstream.shape[0], 1) + upstream.shape[2:])
    for _, o in inputs:
        cnt += o
    safe = np.where(cnt > 0, cnt, 1.0)
    return [np.where(o > 0, upstream / safe, 0.0) for _, o in inputs]
