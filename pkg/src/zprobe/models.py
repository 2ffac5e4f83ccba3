"""Small numpy models with analytic gradients, and the local SGD step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from zprobe.field import DEFAULT_SCALE_BITS, max_real


class TrainingDivergence(FloatingPointError):
    pass


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _with_bias(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


@dataclass
class Model:
    """Multinomial logistic regression or a one-hidden-layer ReLU MLP.

    Parameters live in one flat vector so they line up with protocol vectors.
    Layouts: ``logistic_regression`` is ``W`` of shape (classes, dim+1);
    ``mlp_1hidden`` is ``W1`` (hidden, dim+1) followed by ``W2`` (classes, hidden+1).
    """

    architecture: str
    dim: int
    classes: int
    hidden: int = 0
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.architecture not in ("logistic_regression", "mlp_1hidden"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "mlp_1hidden" and self.hidden < 1:
            raise ValueError("mlp_1hidden needs hidden >= 1")
        if self.params is None:
            self.params = np.zeros(self.size)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {self.params.shape}")

    @property
    def size(self) -> int:
        if self.architecture == "logistic_regression":
            return self.classes * (self.dim + 1)
        return self.hidden * (self.dim + 1) + self.classes * (self.hidden + 1)

    def init_random(self, seed: int, scale: float = 0.1) -> Model:
        rng = np.random.default_rng(seed)
        if self.architecture == "logistic_regression":
            self.params = np.zeros(self.size)
        else:
            w1 = rng.normal(0, np.sqrt(2.0 / self.dim), (self.hidden, self.dim + 1))
            w1[:, -1] = 0.0
            w2 = rng.normal(0, scale, (self.classes, self.hidden + 1))
            self.params = np.concatenate([w1.ravel(), w2.ravel()])
        return self

    def _split(self, params):
        if self.architecture == "logistic_regression":
            return (params.reshape(self.classes, self.dim + 1),)
        n1 = self.hidden * (self.dim + 1)
        return (params[:n1].reshape(self.hidden, self.dim + 1),
                params[n1:].reshape(self.classes, self.hidden + 1))

    def logits(self, X: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        mats = self._split(self.params if params is None else params)
        Xb = _with_bias(X)
        if self.architecture == "logistic_regression":
            return Xb @ mats[0].T
        h = np.maximum(Xb @ mats[0].T, 0.0)
        return _with_bias(h) @ mats[1].T

    def loss(self, X: np.ndarray, y: np.ndarray, params: np.ndarray | None = None) -> float:
        p = _softmax(self.logits(X, params))
        return float(-np.mean(np.log(p[np.arange(len(y)), y] + 1e-300)))

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean cross-entropy over the batch and its gradient w.r.t. the flat parameters."""
        n = len(y)
        Xb = _with_bias(X)
        onehot = np.eye(self.classes)[y]
        if self.architecture == "logistic_regression":
            (W,) = self._split(self.params)
            p = _softmax(Xb @ W.T)
            loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
            return float(loss), ((p - onehot).T @ Xb / n).ravel()
        W1, W2 = self._split(self.params)
        pre = Xb @ W1.T
        h = np.maximum(pre, 0.0)
        hb = _with_bias(h)
        p = _softmax(hb @ W2.T)
        loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
        dz2 = (p - onehot) / n
        g2 = dz2.T @ hb
        dh = (dz2 @ W2[:, :-1]) * (pre > 0)
        g1 = dh.T @ Xb
        return float(loss), np.concatenate([g1.ravel(), g2.ravel()])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def accuracy(self, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(X) == y))

    def copy(self) -> Model:
        return Model(self.architecture, self.dim, self.classes, self.hidden, self.params.copy())


def update_clip(scale_bits: int = DEFAULT_SCALE_BITS, headroom_bits: int = 12) -> float:
    """Per-client magnitude that leaves room to sum 2^headroom_bits updates."""
    return max_real(scale_bits) / (1 << headroom_bits)


def local_step(model: Model, X: np.ndarray, y: np.ndarray, lr: float, batch: int,
               rng: np.random.Generator | None = None,
               scale_bits: int = DEFAULT_SCALE_BITS) -> np.ndarray:
    """One SGD step on a minibatch; returns the additive model delta ``-lr * grad``."""
    if len(y) == 0:
        raise ValueError("empty client shard")
    if batch and batch < len(y):
        pick = (rng or np.random.default_rng()).choice(len(y), size=batch, replace=False)
        X, y = X[pick], y[pick]
    _, grad = model.loss_and_grad(X, y)
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergence("non-finite gradient")
    lim = update_clip(scale_bits)
    return np.clip(-lr * grad, -lim, lim)
