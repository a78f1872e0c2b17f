"""Estimator-style front end so the completers plug into sklearn pipelines.

`CNNDepthCompleter` is fit/predict shaped: fit trains a completion
network on dense depth maps (applying fresh random dropout at the
configured training density each iteration) and predict densifies sparse
maps. The classical baselines are stateless transformers over stacks of
depth maps. All follow sklearn conventions: constructor arguments are
stored verbatim, fitted state lives in trailing-underscore attributes,
and get_params/set_params come from BaseEstimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import network, optim
from .baselines import NWConfig, PoolConfig, closest_depth_pool, nadaraya_watson
from .data import make_batch_source, to_network_inputs
from .metrics import evaluate
from .network import ModelState, NetworkSpec

__all__ = ["CNNDepthCompleter", "NadarayaWatsonCompleter", "ClosestPoolCompleter"]


def _as_map_stack(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected depth maps of shape (m, h, w) or (h, w), got {X.shape}")
    return X


class CNNDepthCompleter(BaseEstimator, RegressorMixin):
    """Convolutional depth completion, trainable on dense synthetic scenes.

    Parameters mirror the architecture and training configuration:
    `variant` picks mask-normalized convolutions ("sparse") or the plain
    ("conv") / mask-concatenated ("conv_mask") baselines; the remaining
    arguments feed the network spec and the Adam loop. `train_density` is
    the keep probability of the per-iteration dropout applied to the
    dense training maps.
    """

    def __init__(
        self,
        variant: str = "sparse",
        kernel_sizes: tuple[int, ...] = (11, 7, 5, 3, 3),
        hidden_channels: int = 16,
        epsilon: float = 1e-8,
        loss: str = "l2",
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        adam_eps: float = 1e-8,
        n_iterations: int = 2000,
        batch_size: int = 8,
        train_density: float = 0.1,
        eval_every: int = 0,
        random_state: int = 0,
    ):
        self.variant = variant
        self.kernel_sizes = kernel_sizes
        self.hidden_channels = hidden_channels
        self.epsilon = epsilon
        self.loss = loss
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.n_iterations = n_iterations
        self.batch_size = batch_size
        self.train_density = train_density
        self.eval_every = eval_every
        self.random_state = random_state

    def _spec(self) -> NetworkSpec:
        return NetworkSpec(
            variant=self.variant,
            kernel_sizes=tuple(self.kernel_sizes),
            channels=self.hidden_channels,
            epsilon=self.epsilon,
        )

    def _train_config(self) -> optim.TrainConfig:
        return optim.TrainConfig(
            loss=self.loss,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            iterations=self.n_iterations,
            batch_size=self.batch_size,
            seed=self.random_state,
            eval_every=self.eval_every,
        )

    def fit(self, X, y=None, eval_fn=None):
        """Train on dense depth maps X of shape (m, h, w).

        Sparse inputs are generated on the fly by dropping pixels at the
        configured density, freshly per iteration; targets are the dense
        maps themselves (y is accepted for pipeline compatibility and, if
        given, used as the regression target instead).
        """
        X = _as_map_stack(X)
        targets = None if y is None else _as_map_stack(y)
        source = make_batch_source(
            X, self.train_density, self.batch_size, self.random_state, targets=targets
        )
        self.model_, log = optim.train(self._spec(), source, self._train_config(), eval_fn)
        self.training_log_ = log
        return self

    def _require_fitted(self) -> ModelState:
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError("this completer has not been fitted yet")
        return model

    def predict(self, X) -> np.ndarray:
        """Densify sparse maps (m, h, w) -> (m, h, w); 0 marks unobserved input."""
        model = self._require_fitted()
        X = _as_map_stack(X)
        preds = []
        for start in range(0, X.shape[0], max(1, self.batch_size)):
            chunk = X[start : start + max(1, self.batch_size)]
            depth, mask = to_network_inputs(chunk)
            pred, _, _ = network.forward(model, depth, mask)
            preds.append(pred[:, 0])
        return np.concatenate(preds, axis=0)

    def predict_with_mask(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Like predict, also returning the propagated observation mask."""
        model = self._require_fitted()
        X = _as_map_stack(X)
        depth, mask = to_network_inputs(X)
        pred, out_mask, _ = network.forward(model, depth, mask)
        return pred[:, 0], out_mask[:, 0]

    def score(self, X, y) -> float:
        """Negative mean absolute error over valid target pixels."""
        pred = self.predict(X)
        return -evaluate(pred, _as_map_stack(y)).mae


class NadarayaWatsonCompleter(BaseEstimator, TransformerMixin):
    """Gaussian-kernel regression filler; stateless, fit is a no-op."""

    def __init__(self, bandwidth: float = 2.0, radius: int | None = None):
        self.bandwidth = bandwidth
        self.radius = radius

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        cfg = NWConfig(bandwidth=self.bandwidth, radius=self.radius)
        X = _as_map_stack(X)
        return np.stack([nadaraya_watson(d, cfg) for d in X])


class ClosestPoolCompleter(BaseEstimator, TransformerMixin):
    """Window-minimum filler; stateless, fit is a no-op."""

    def __init__(self, radius: int = 2):
        self.radius = radius

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        cfg = PoolConfig(radius=self.radius)
        X = _as_map_stack(X)
        return np.stack([closest_depth_pool(d, cfg) for d in X])
