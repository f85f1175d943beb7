"""Dense feedforward networks with hand-written reverse-mode gradients.

The predictor is ``f = w o phi``: the last dense layer plays the role of the
classifier ``w`` and every earlier layer is the featurizer ``phi``. All
parameters live in one flat float64 vector so that per-objective gradients can
be stacked into a matrix and handed to the multi-objective solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")
LOSS_KINDS = ("mse", "logistic")


class GradScope(str, Enum):
    FULL = "full"
    CLASSIFIER_ONLY = "classifier_only"
    FEATURIZER_FROZEN = "featurizer_frozen"


@dataclass(frozen=True)
class GradRequest:
    scope: GradScope = GradScope.FULL
    loss_kind: str = "mse"

    def __post_init__(self):
        object.__setattr__(self, "scope", GradScope(self.scope))
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, loss, param_norm):
        super().__init__(f"non-finite loss {loss!r} (parameter norm {param_norm:.6g})")
        self.loss = loss
        self.param_norm = param_norm


def _act(name, z):
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name, z, a):
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return 1.0 - a * a


@dataclass
class DenseNet:
    """Fixed-topology MLP over a flat parameter vector.

    ``activation`` is either one name applied to every hidden layer or a list
    with one entry per hidden layer. The output layer is always linear.
    """

    layer_dims: list[int]
    activation: str | list[str] = "tanh"
    params: np.ndarray | None = None
    bias: bool = True
    param_layout: list[tuple[slice, slice | None]] = field(init=False, repr=False)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError("layer_dims needs >= 2 positive entries")
        n_hidden = len(self.layer_dims) - 2
        if isinstance(self.activation, str):
            self.activation = [self.activation] * n_hidden
        self.activation = list(self.activation)
        if len(self.activation) != n_hidden:
            raise ValueError(f"expected {n_hidden} hidden activations, got {len(self.activation)}")
        for a in self.activation:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

        layout = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = None
            if self.bias:
                b = slice(offset, offset + fan_out)
                offset += fan_out
            layout.append((w, b))
        self.param_layout = layout
        self._n_params = offset
        if self.params is None:
            self.params = np.zeros(offset)
        else:
            self.params = np.array(self.params, dtype=np.float64).ravel()
            if self.params.size != offset:
                raise ValueError(f"params has length {self.params.size}, expected {offset}")

    @property
    def n_params(self):
        return self._n_params

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    def init_params(self, seed=0):
        """Uniform(-s, s) with s = 1/sqrt(fan_in) for weights and biases."""
        rng = np.random.default_rng(seed)
        for (w, b), fan_in in zip(self.param_layout, self.layer_dims[:-1]):
            s = 1.0 / np.sqrt(fan_in)
            self.params[w] = rng.uniform(-s, s, size=w.stop - w.start)
            if b is not None:
                self.params[b] = rng.uniform(-s, s, size=b.stop - b.start)
        return self

    def copy(self):
        return DenseNet(self.layer_dims, list(self.activation), self.params.copy(), bias=self.bias)

    def weights(self, layer):
        w, b = self.param_layout[layer]
        W = self.params[w].reshape(self.layer_dims[layer], self.layer_dims[layer + 1])
        return W, (self.params[b] if b is not None else None)

    def classifier_slice(self):
        """Slice of ``params`` holding the last layer (the classifier)."""
        w, b = self.param_layout[-1]
        return slice(w.start, (b or w).stop)

    def scope_slice(self, scope):
        if GradScope(scope) is GradScope.FULL:
            return slice(0, self.n_params)
        return self.classifier_slice()

    def _forward_cache(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.layer_dims[0]:
            raise ValueError(f"input shape {X.shape} does not match input width {self.layer_dims[0]}")
        acts = [X]
        pre = []
        h = X
        for layer in range(self.n_layers):
            W, b = self.weights(layer)
            z = h @ W
            if b is not None:
                z = z + b
            pre.append(z)
            h = z if layer == self.n_layers - 1 else _act(self.activation[layer], z)
            acts.append(h)
        return acts, pre

    def forward(self, X):
        return self._forward_cache(X)[0][-1]

    def predict_scalar(self, X):
        out = self.forward(X)
        if out.shape[1] != 1:
            raise ValueError("network output is not scalar")
        return out[:, 0]

    def vjp(self, X, dout, cache=None):
        """Gradient of ``sum(dout * forward(X))`` with respect to ``params``."""
        acts, pre = cache if cache is not None else self._forward_cache(X)
        dout = np.asarray(dout, dtype=np.float64)
        if dout.ndim == 1:
            dout = dout[:, None]
        grad = np.zeros(self.n_params)
        delta = dout
        for layer in reversed(range(self.n_layers)):
            w, b = self.param_layout[layer]
            grad[w] = (acts[layer].T @ delta).ravel()
            if b is not None:
                grad[b] = delta.sum(axis=0)
            if layer > 0:
                W, _ = self.weights(layer)
                delta = (delta @ W.T) * _act_grad(self.activation[layer - 1], pre[layer - 1], acts[layer])
        return grad


def forward(net, inputs):
    return net.forward(inputs)


def pointwise_loss(pred, y, kind):
    """Per-sample loss and its first two derivatives in the prediction."""
    if kind == "mse":
        r = pred - y
        return 0.5 * r * r, r, np.ones_like(r)
    if kind == "logistic":
        m = pred * y
        loss = np.logaddexp(0.0, -m)
        s_neg = np.exp(-np.logaddexp(0.0, m))  # sigmoid(-m)
        s_pos = 1.0 - s_neg
        return loss, -y * s_neg, y * y * s_pos * s_neg
    raise ValueError(f"unknown loss kind {kind!r}")


def _check_targets(y, kind):
    if kind == "logistic" and not np.all(np.abs(y) == 1.0):
        raise ValueError("logistic targets must be in {-1, +1}")


def loss_and_grad(net, inputs, targets, req=GradRequest(), weights=None):
    """Mean loss over the batch and its gradient restricted to ``req.scope``.

    ``weights`` optionally gives per-sample probabilities (normalized here),
    which turns the mean into an exact expectation over weighted atoms.
    """
    y = np.asarray(targets, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("empty batch")
    _check_targets(y, req.loss_kind)
    cache = net._forward_cache(inputs)
    pred = cache[0][-1][:, 0]
    w = _normalized_weights(weights, y.size)
    per, d1, _ = pointwise_loss(pred, y, req.loss_kind)
    loss = float(np.dot(w, per))
    if not np.isfinite(loss):
        raise NonFiniteLossError(loss, float(np.linalg.norm(net.params)))
    grad = net.vjp(inputs, w * d1, cache)
    return loss, grad[net.scope_slice(req.scope)]


def _normalized_weights(weights, n):
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != n or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sample weights must be non-negative, non-zero and match the batch")
    return w / w.sum()


def finite_difference_grad(fn, params, step=1e-5):
    """Central differences of a scalar function of a flat parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    g = np.zeros_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = step
        g[i] = (fn(params + e) - fn(params - e)) / (2 * step)
    return g


def max_relative_error(analytic, numeric, floor=1e-8, scale_floor=1e-3):
    """Largest componentwise relative error.

    Components far below the gradient's overall size are compared against
    ``scale_floor`` times the largest magnitude, since central differences
    carry an absolute roundoff of roughly ``eps * |f| / step`` there.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if not analytic.size:
        return 0.0
    top = max(np.abs(analytic).max(), np.abs(numeric).max())
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor, scale_floor * top))
    return float(np.max(np.abs(analytic - numeric) / denom))
