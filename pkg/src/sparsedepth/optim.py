"""Masked losses, Adam, and the deterministic training loop.

Losses average over pixels marked valid in the target; the gradient is
zero everywhere else, so unmeasured target pixels never steer training.
The loop is reproducible: given the same spec, config, and data seed it
produces bit-identical parameters and logs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import network
from .errors import NoValidPixelsError, ShapeMismatchError
from .network import ModelState, NetworkSpec

__all__ = [
    "TrainConfig",
    "AdamState",
    "masked_loss",
    "adam_step",
    "train",
    "log_to_csv",
]

LOSS_KINDS = ("l2", "l1")

# one training batch: (sparse depth, observation mask, dense target, target validity)
Batch = tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
BatchSource = Callable[[int], Batch]


@dataclass
class TrainConfig:
    loss: str = "l2"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int = 2000
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 0  # 0 disables in-loop evaluation

    def __post_init__(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be > 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the model's parameters."""

    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    step: int = 0

    @classmethod
    def for_model(cls, model: ModelState) -> "AdamState":
        m = [(np.zeros_like(p.weights), np.zeros_like(p.bias)) for p in model.layers]
        v = [(np.zeros_like(p.weights), np.zeros_like(p.bias)) for p in model.layers]
        return cls(m=m, v=v)


def masked_loss(
    pred: np.ndarray, target: np.ndarray, valid: np.ndarray, kind: str = "l2"
) -> tuple[float, np.ndarray]:
    """Mean squared (or absolute) error over valid pixels, with its gradient.

    Returns (scalar loss, d_loss/d_pred). The gradient is zero at invalid
    pixels; the l1 subgradient at exact equality is 0.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss must be one of {LOSS_KINDS}, got {kind!r}")
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pred shape {pred.shape} != target shape {target.shape}")
    if valid.shape[0] != pred.shape[0] or valid.shape[2:] != pred.shape[2:]:
        raise ShapeMismatchError(f"valid mask shape {valid.shape} does not align with {pred.shape}")
    n_valid = float(valid.sum()) * pred.shape[1]
    if n_valid == 0:
        raise NoValidPixelsError("loss undefined: no valid target pixels in batch")
    err = np.where(valid > 0, pred - target, 0.0)
    if kind == "l2":
        loss = float(np.sum(err * err)) / n_valid
        grad = (2.0 / n_valid) * err
    else:
        loss = float(np.sum(np.abs(err))) / n_valid
        grad = np.sign(err) / n_valid
    return loss, grad


def adam_step(
    model: ModelState,
    grads: list[tuple[np.ndarray, np.ndarray]],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[ModelState, AdamState]:
    """One bias-corrected Adam update, in place; returns the same objects."""
    if len(grads) != len(model.layers):
        raise ShapeMismatchError(
            f"got gradients for {len(grads)} layers, model has {len(model.layers)}"
        )
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for p, (dw, db), (mw, mb), (vw, vb) in zip(model.layers, grads, state.m, state.v):
        for param, g, m, v in ((p.weights, dw, mw, vw), (p.bias, db, mb, vb)):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            param -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return model, state


@dataclass
class LogRow:
    iteration: int
    loss: float
    eval_mae: float | None = None


def train(
    spec: NetworkSpec,
    data_source: BatchSource,
    cfg: TrainConfig,
    eval_fn: Callable[[ModelState], float] | None = None,
) -> tuple[ModelState, list[LogRow]]:
    """Run forward/loss/backward/adam for cfg.iterations batches.

    `data_source(i)` must deterministically yield the batch for iteration i
    (0-based). When `eval_fn` is given and cfg.eval_every > 0, its value is
    recorded every eval_every iterations and after the final one.
    """
    model = network.build(spec, seed=cfg.seed)
    state = AdamState.for_model(model)
    log: list[LogRow] = []
    for i in range(cfg.iterations):
        depth, mask, target, target_valid = data_source(i)
        pred, _, cache = network.forward(model, depth, mask)
        try:
            loss, d_pred = masked_loss(pred, target, target_valid, cfg.loss)
        except NoValidPixelsError as exc:
            raise NoValidPixelsError(f"batch {i}: {exc}") from exc
        grads = network.backward(model, cache, d_pred)
        adam_step(model, grads, state, cfg)
        row = LogRow(iteration=i + 1, loss=loss)
        if eval_fn is not None and cfg.eval_every > 0:
            if (i + 1) % cfg.eval_every == 0 or i == cfg.iterations - 1:
                row.eval_mae = float(eval_fn(model))
        log.append(row)
    return model, log


def log_to_csv(log: list[LogRow]) -> str:
    """Render the training log as `iter,loss,eval_mae` CSV text."""
    buf = io.StringIO()
    buf.write("iter,loss,eval_mae\n")
    for row in log:
        mae = "" if row.eval_mae is None else format(row.eval_mae, ".17g")
        buf.write(f"{row.iteration},{format(row.loss, '.17g')},{mae}\n")
    return buf.getvalue()
