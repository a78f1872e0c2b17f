"""Finite-difference verification of every hand-derived gradient.

Central differences with a fixed step are compared against the analytic
backward passes, per layer type and through the whole composed network.
Relative errors are guarded: entries whose analytic and numeric values
are both below a floor (set by the gradient's own scale) compare
absolutely, since the difference quotient carries roundoff of order
|f| * 1e-16 / step that would otherwise dominate near-zero entries.

Trial instances use random nonzero biases: zero biases park the outputs
of observation-free windows exactly on the ReLU kink, where a two-sided
difference straddles the subgradient and no implementation could match.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import network
from .layers import (
    ConvParams,
    SparseConvConfig,
    conv2d_backward,
    conv2d_forward,
    normalized_skip_sum,
    normalized_skip_sum_backward,
    relu_backward,
    relu_forward,
    sparse_conv2d_backward,
    sparse_conv2d_forward,
)
from .network import NetworkSpec

__all__ = ["GradCheckReport", "run_gradcheck", "fd_gradient", "max_relative_error"]

DEFAULT_STEP = 1e-6
DEFAULT_TOLERANCE = 1e-5


def fd_gradient(f, x: np.ndarray, step: float = DEFAULT_STEP, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise.

    `indices` restricts the check to a subset of flat positions (the rest
    of the returned array is NaN and must be masked by the caller).
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    sel = range(flat.size) if indices is None else indices
    for i in sel:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float | None = None
) -> float:
    """Guarded max relative error over the non-NaN entries of `numeric`.

    A two-sided difference carries roundoff of order |f| * u / (2 step)
    regardless of the gradient entry's size, so entries far below the
    gradient's own magnitude cannot be verified relatively by any
    implementation; below `floor` (default 0.1% of the gradient's
    magnitude) the comparison degrades to an absolute check against that
    floor. Errors larger than the floor always register.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    ok = ~np.isnan(n)
    a, n = a[ok], n[ok]
    if a.size == 0:
        return 0.0
    if floor is None:
        floor = 1e-3 * max(np.abs(a).max(), np.abs(n).max())
    floor = max(floor, 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def lines(self) -> list[str]:
        out = [f"{name}: max rel err {err:.3e}" for name, err in sorted(self.errors.items())]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"gradcheck {verdict}: worst {self.worst:.3e} vs tolerance {self.tolerance:.1e}")
        return out


def _rand_params(rng, co, ci, ks):
    return ConvParams(
        weights=rng.uniform(-0.5, 0.5, (co, ci, ks, ks)),
        bias=0.5 + 0.2 * rng.standard_normal(co),
    )


def _rand_instance(rng, n=1, ci=2, size=8, density=0.5):
    x = rng.standard_normal((n, ci, size, size))
    o = (rng.random((n, 1, size, size)) < density).astype(np.float64)
    return x, o


def _check_conv(rng, step) -> float:
    x, _ = _rand_instance(rng, ci=2, size=7)
    p = _rand_params(rng, 3, 2, 3)
    up = rng.standard_normal((1, 3, 7, 7))
    g = conv2d_backward(x, p, up)
    worst = 0.0
    for arr, grad, wrap in (
        (p.weights, g.d_weights, lambda w: ConvParams(w, p.bias)),
        (p.bias, g.d_bias, lambda b: ConvParams(p.weights, b)),
    ):
        fd = fd_gradient(lambda v: float(np.sum(conv2d_forward(x, wrap(v)) * up)), arr.copy(), step)
        worst = max(worst, max_relative_error(grad, fd))
    fd = fd_gradient(lambda v: float(np.sum(conv2d_forward(v, p) * up)), x.copy(), step)
    return max(worst, max_relative_error(g.d_input, fd))


def _check_sparse_conv(rng, step) -> float:
    x, o = _rand_instance(rng, ci=2, size=8, density=0.4)
    p = _rand_params(rng, 2, 2, 5)
    cfg = SparseConvConfig(p)
    up = rng.standard_normal((1, 2, 8, 8))
    g = sparse_conv2d_backward(x, o, cfg, up)

    def loss(params_x):
        params, xx = params_x
        out, _ = sparse_conv2d_forward(xx, o, SparseConvConfig(params))
        return float(np.sum(out * up))

    worst = 0.0
    fd = fd_gradient(lambda w: loss((ConvParams(w, p.bias), x)), p.weights.copy(), step)
    worst = max(worst, max_relative_error(g.d_weights, fd))
    fd = fd_gradient(lambda b: loss((ConvParams(p.weights, b), x)), p.bias.copy(), step)
    worst = max(worst, max_relative_error(g.d_bias, fd))
    fd = fd_gradient(lambda xx: loss((p, xx)), x.copy(), step)
    return max(worst, max_relative_error(g.d_input, fd))


def _check_relu(rng, step) -> float:
    x = rng.standard_normal((1, 2, 6, 6))
    x[np.abs(x) < 10 * step] = 0.3  # keep finite differences off the kink
    up = rng.standard_normal(x.shape)
    g = relu_backward(x, up)
    fd = fd_gradient(lambda v: float(np.sum(relu_forward(v) * up)), x.copy(), step)
    return max_relative_error(g, fd)


def _check_skip_sum(rng, step) -> float:
    shape = (1, 2, 5, 5)
    streams = [
        (rng.standard_normal(shape), (rng.random((1, 1, 5, 5)) < 0.6).astype(np.float64))
        for _ in range(3)
    ]
    up = rng.standard_normal(shape)
    grads = normalized_skip_sum_backward(streams, up)
    worst = 0.0
    for i in range(len(streams)):
        def loss(v, i=i):
            trial = [(v if j == i else streams[j][0], streams[j][1]) for j in range(len(streams))]
            return float(np.sum(normalized_skip_sum(trial)[0] * up))

        fd = fd_gradient(loss, streams[i][0].copy(), step)
        worst = max(worst, max_relative_error(grads[i], fd))
    return worst


def _activation_pattern(cache) -> bytes:
    return b"".join(np.packbits(entry["pre"] > 0).tobytes() for entry in cache[:-1])


def _check_network(rng, spec: NetworkSpec, step, tolerance=DEFAULT_TOLERANCE, params_per_layer=10) -> float:
    """FD check of the composed net on a random instance, sampling parameters.

    A two-sided difference that flips any ReLU state between its two
    evaluations does not estimate the gradient at the base point; such
    entries are detected by comparing activation patterns and skipped.
    """
    model = network.build(spec, seed=int(rng.integers(1 << 31)))
    for p in model.layers:
        p.weights[:] = rng.uniform(-0.4, 0.4, p.weights.shape)
        p.bias[:] = 0.5 + 0.2 * rng.standard_normal(p.bias.shape)
    size = 12
    depth = rng.uniform(0.5, 2.0, (1, 1, size, size))
    mask = (rng.random((1, 1, size, size)) < 0.4).astype(np.float64)
    if spec.variant != "conv":
        depth = np.where(mask > 0, depth, 0.0)
    up = rng.standard_normal((1, spec.out_channels, size, size))

    pred, _, cache = network.forward(model, depth, mask)
    grads = network.backward(model, cache, up)
    # roundoff of one loss evaluation accumulates on the absolute magnitudes,
    # amplified by 1/(2 step); gradient entries below noise/rtol cannot be
    # resolved relatively by any implementation
    f_scale = float(np.sum(np.abs(pred * up))) + 1.0
    noise_floor = 3.0 * np.finfo(float).eps * f_scale / (2.0 * step) / tolerance

    worst = 0.0
    for li, p in enumerate(model.layers):
        for arr, analytic, rebuild in (
            (p.weights, grads[li][0], lambda v, li=li, p=p: ConvParams(v, p.bias)),
            (p.bias, grads[li][1], lambda v, li=li, p=p: ConvParams(p.weights, v)),
        ):
            k = min(params_per_layer, arr.size)
            idx = rng.choice(arr.size, size=k, replace=False)

            def loss(v, li=li, rebuild=rebuild):
                saved = model.layers[li]
                model.layers[li] = rebuild(v)
                out, _, c = network.forward(model, depth, mask)
                model.layers[li] = saved
                return float(np.sum(out * up)), _activation_pattern(c)

            flat = arr.copy().reshape(-1)
            picked_a, picked_n = [], []
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp, pat_p = loss(flat.reshape(arr.shape))
                flat[i] = orig - step
                fm, pat_m = loss(flat.reshape(arr.shape))
                flat[i] = orig
                if pat_p != pat_m:
                    continue  # kink crossed; the quotient is not a gradient here
                picked_a.append(analytic.reshape(-1)[i])
                picked_n.append((fp - fm) / (2.0 * step))
            if picked_a:
                worst = max(
                    worst,
                    max_relative_error(
                        np.array(picked_a),
                        np.array(picked_n),
                        floor=max(1e-3 * float(np.abs(analytic).max()), noise_floor),
                    ),
                )
    return worst


def run_gradcheck(
    trials: int = 20,
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
    seed: int = 0,
    spec: NetworkSpec | None = None,
    corrupt: bool = False,
) -> GradCheckReport:
    """Check every layer type plus the composed network over random trials.

    `corrupt` is a negative-control hook: it biases one reported error so
    the check must fail, proving the harness can catch a wrong gradient.
    """
    if spec is None:
        spec = NetworkSpec(variant="sparse", channels=4)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    checks = {
        "conv2d": _check_conv,
        "sparse_conv2d": _check_sparse_conv,
        "relu": _check_relu,
        "normalized_skip_sum": _check_skip_sum,
    }
    for name, fn in checks.items():
        report.errors[name] = max(fn(rng, step) for _ in range(trials))
    report.errors["network"] = max(
        _check_network(rng, spec, step, tolerance) for _ in range(trials)
    )
    if corrupt:
        report.errors["network"] += 1.0
    return report
