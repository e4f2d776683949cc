"""Trainable layer primitives with exact backward passes.

All layers use the row convention: inputs are (batch, in) arrays or
single (in,) vectors, weights are stored (out, in) and the forward map is
``x @ W.T + b``.  ``forward_cached`` returns the values ``backward`` needs;
``backward`` returns parameter gradients keyed like ``params()`` together
with the gradient w.r.t. the layer input.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, LabelError, ParameterError, StateError
from .tensor import DTYPE, as_tensor, uniform_init, zeros

ACTIVATIONS = ("sigmoid", "tanh", "linear")

# Forget-gate bias at initialisation; eases early gradient flow.
FORGET_BIAS = 1.0


def _as_batch(x, width, where):
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"{where}: expected input width {width}, got shape {np.shape(x)}")
    return x, single


def _accumulate(into, name, value):
    if into is None:
        return
    if name in into:
        into[name] += value
    else:
        into[name] = value.copy()


@dataclass
class AffineLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "sigmoid"

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"affine weights {self.weights.shape} and bias {self.bias.shape} disagree")

    kind = "affine"

    @classmethod
    def init(cls, rng, n_in, n_out, activation="sigmoid", gain=1.0):
        """Uniform weights in +-gain/sqrt(n_in), zero bias."""
        scale = gain / np.sqrt(n_in)
        return cls(uniform_init(rng, (n_out, n_in), scale), zeros(n_out), activation)

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def _activate(self, a):
        if self.activation == "sigmoid":
            return kernels.sigmoid(a)
        if self.activation == "tanh":
            return np.tanh(a)
        return a

    def forward(self, x):
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x):
        xb, single = _as_batch(x, self.n_in, "affine_forward")
        y = self._activate(xb @ self.weights.T + self.bias)
        return (y[0] if single else y), (xb, y, single)

    def backward(self, cache, dy, into=None):
        """Gradients for upstream ``dy``; accumulates into ``into`` if given."""
        if cache is None:
            raise StateError("affine backward called without a forward cache")
        xb, y, single = cache
        dy = np.asarray(dy, dtype=DTYPE).reshape(y.shape)
        if self.activation == "sigmoid":
            da = dy * y * (1.0 - y)
        elif self.activation == "tanh":
            da = dy * (1.0 - y * y)
        else:
            da = dy
        grads = {"weights": da.T @ xb, "bias": da.sum(axis=0)}
        dx = da @ self.weights
        if into is not None:
            for name, value in grads.items():
                _accumulate(into, name, value)
        return grads, (dx[0] if single else dx)


@dataclass
class LstmCell:
    """Forget-gate LSTM without peepholes.

    Gate blocks are stacked in the order input, forget, output, candidate
    along the first axis of ``input_weights`` (4H, in), ``recurrent_weights``
    (4H, H) and ``bias`` (4H,).
    """

    input_weights: np.ndarray
    recurrent_weights: np.ndarray
    bias: np.ndarray

    kind = "lstm"

    def __post_init__(self):
        self.input_weights = as_tensor(self.input_weights)
        self.recurrent_weights = as_tensor(self.recurrent_weights)
        self.bias = as_tensor(self.bias)
        four_h = self.recurrent_weights.shape[0]
        if (four_h % 4 or self.recurrent_weights.shape != (four_h, four_h // 4)
                or self.input_weights.shape[0] != four_h or self.bias.shape != (four_h,)):
            raise DimensionError(
                "lstm gate blocks disagree: "
                f"input {self.input_weights.shape}, recurrent {self.recurrent_weights.shape}, "
                f"bias {self.bias.shape}")

    @classmethod
    def init(cls, rng, n_in, cells):
        scale = 1.0 / np.sqrt(n_in + cells)
        bias = zeros(4 * cells)
        bias[cells:2 * cells] = FORGET_BIAS
        return cls(uniform_init(rng.child("input"), (4 * cells, n_in), scale),
                   uniform_init(rng.child("recurrent"), (4 * cells, cells), scale),
                   bias)

    @property
    def n_in(self):
        return self.input_weights.shape[1]

    @property
    def cells(self):
        return self.recurrent_weights.shape[1]

    def params(self):
        return {"input_weights": self.input_weights,
                "recurrent_weights": self.recurrent_weights,
                "bias": self.bias}

    def zero_state(self, batch=None):
        shape = (self.cells,) if batch is None else (batch, self.cells)
        return zeros(shape), zeros(shape)

    def step(self, x, h_prev, c_prev):
        h, c, _ = self.step_cached(x, h_prev, c_prev)
        return h, c

    def step_cached(self, x, h_prev, c_prev):
        xb, single = _as_batch(x, self.n_in, "lstm_step input")
        hb, _ = _as_batch(h_prev, self.cells, "lstm_step hidden state")
        cb, _ = _as_batch(c_prev, self.cells, "lstm_step cell state")
        if not (xb.shape[0] == hb.shape[0] == cb.shape[0]):
            raise DimensionError(
                f"lstm_step batch mismatch: x {xb.shape}, h {hb.shape}, c {cb.shape}")
        a = xb @ self.input_weights.T + hb @ self.recurrent_weights.T + self.bias
        gates, c, h = kernels.lstm_pointwise(a, cb)
        cache = (xb, hb, cb, gates, c, single)
        if single:
            return h[0], c[0], cache
        return h, c, cache

    def backward(self, cache, dh, dc=None, into=None):
        """Backward through one step.

        ``dh`` and ``dc`` are the gradients arriving at this step's hidden
        and cell outputs.  Returns (grads, dx, dh_prev, dc_prev).
        """
        if cache is None:
            raise StateError("lstm backward called without a forward cache")
        xb, hb, cb, gates, c, single = cache
        dh = np.asarray(dh, dtype=DTYPE).reshape(c.shape)
        dc = np.zeros_like(c) if dc is None else np.asarray(dc, dtype=DTYPE).reshape(c.shape)
        da, dc_prev = kernels.lstm_pointwise_backward(gates, cb, c, dh, dc)
        grads = {"input_weights": da.T @ xb,
                 "recurrent_weights": da.T @ hb,
                 "bias": da.sum(axis=0)}
        dx = da @ self.input_weights
        dh_prev = da @ self.recurrent_weights
        if into is not None:
            for name, value in grads.items():
                _accumulate(into, name, value)
        if single:
            return grads, dx[0], dh_prev[0], dc_prev[0]
        return grads, dx, dh_prev, dc_prev


@dataclass
class SoftmaxHead:
    weights: np.ndarray
    bias: np.ndarray

    kind = "softmax"

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"softmax weights {self.weights.shape} and bias {self.bias.shape} disagree")
        if self.weights.shape[0] < 2:
            raise ParameterError("softmax head needs at least 2 classes")

    @classmethod
    def init(cls, rng, n_in, classes):
        scale = 1.0 / np.sqrt(n_in)
        return cls(uniform_init(rng, (classes, n_in), scale), zeros(classes))

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def classes(self):
        return self.weights.shape[0]

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def logits(self, x):
        xb, single = _as_batch(x, self.n_in, "softmax head")
        z = xb @ self.weights.T + self.bias
        return z[0] if single else z

    def posterior(self, x):
        return kernels.softmax_rows(self.logits(x))

    def forward_cached(self, x, labels, weights=None):
        """Weighted cross-entropy over a batch.

        ``labels`` holds one class index per row; rows with weight 0 (or a
        negative label) contribute nothing.  Returns (summed loss, posterior,
        cache).
        """
        xb, single = _as_batch(x, self.n_in, "softmax head")
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if labels.shape != (xb.shape[0],):
            raise LabelError(f"{labels.shape[0]} labels for {xb.shape[0]} frames")
        if weights is None:
            weights = (labels >= 0).astype(DTYPE)
        else:
            weights = np.where(labels >= 0, np.asarray(weights, dtype=DTYPE), 0.0)
        bad = np.nonzero((labels >= self.classes) & (weights != 0))[0]
        if bad.size:
            raise LabelError(
                f"label {labels[bad[0]]} out of range for {self.classes} classes at frame {bad[0]}")
        z = xb @ self.weights.T + self.bias
        post = kernels.softmax_rows(z)
        safe = np.where(weights != 0, labels, 0)
        # log of the stable softmax, not log(post), so tiny posteriors stay finite
        shifted = z - z.max(axis=1, keepdims=True)
        logp = shifted[np.arange(len(safe)), safe] - np.log(np.exp(shifted).sum(axis=1))
        loss = float(-(weights * logp).sum())
        cache = (xb, post, safe, weights, single)
        return loss, (post[0] if single else post), cache

    def backward(self, cache, scale=1.0, into=None):
        """Gradient of ``scale`` times the summed weighted loss."""
        if cache is None:
            raise StateError("softmax backward called without a forward cache")
        xb, post, labels, weights, single = cache
        dz = post.copy()
        dz[np.arange(len(labels)), labels] -= 1.0
        dz *= (scale * weights)[:, None]
        grads = {"weights": dz.T @ xb, "bias": dz.sum(axis=0)}
        dx = dz @ self.weights
        if into is not None:
            for name, value in grads.items():
                _accumulate(into, name, value)
        return grads, (dx[0] if single else dx)


# ----------------------------------------------------------------------------
# functional surface
# ----------------------------------------------------------------------------

def affine_forward(layer, x):
    return layer.forward(x)


def lstm_step(cell, x, h_prev, c_prev):
    return cell.step(x, h_prev, c_prev)


def softmax_ce(head, x, label):
    """Cross-entropy of one frame: (-ln posterior[label], posterior)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 1:
        raise DimensionError(f"softmax_ce expects a single frame, got shape {x.shape}")
    label = int(label)
    if not 0 <= label < head.classes:
        raise LabelError(f"label {label} out of range for {head.classes} classes")
    loss, post, _ = head.forward_cached(x, [label])
    return loss, post


def backward(layer, cache, upstream, **kwargs):
    """Dispatch to the layer's backward pass."""
    if isinstance(layer, SoftmaxHead):
        # for the head, ``upstream`` is the scalar weight on the loss
        return layer.backward(cache, scale=upstream, **kwargs)
    return layer.backward(cache, upstream, **kwargs)
