"""Elementwise hot kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from the ``PACRNN_KERNELS``
environment variable:

* ``numba`` (default when numba imports) -- fused ``@njit`` loops
* ``numpy`` -- vectorised numpy expressions, no compilation

Both paths compute the same formulas; they agree to a few ulp but are not
bitwise identical (libm ``exp`` differs from numpy's SIMD ``exp``).  Runs
are bitwise reproducible within one backend.  ``BACKEND`` names the active
one and ``numpy_kernels`` / ``numba_kernels`` expose both for benchmarking.
"""

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


# ----------------------------------------------------------------------------
# numpy reference implementations
# ----------------------------------------------------------------------------

def _np_sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def _np_softmax_rows(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_lstm_pointwise(a, c_prev):
    """Gate nonlinearities and state update for pre-activations ``a``.

    ``a`` is (B, 4H) in block order input, forget, output, candidate.
    Returns the (B, 4H) activated gates, the new cell state and the new
    hidden state.
    """
    hidden = c_prev.shape[-1]
    gates = np.empty_like(a)
    gates[:, :3 * hidden] = _np_sigmoid(a[:, :3 * hidden])
    gates[:, 3 * hidden:] = np.tanh(a[:, 3 * hidden:])
    i = gates[:, :hidden]
    f = gates[:, hidden:2 * hidden]
    o = gates[:, 2 * hidden:3 * hidden]
    g = gates[:, 3 * hidden:]
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return gates, c, h


def _np_lstm_pointwise_backward(gates, c_prev, c, dh, dc):
    hidden = c.shape[-1]
    i = gates[:, :hidden]
    f = gates[:, hidden:2 * hidden]
    o = gates[:, 2 * hidden:3 * hidden]
    g = gates[:, 3 * hidden:]
    tc = np.tanh(c)
    dc_total = dc + dh * o * (1.0 - tc * tc)
    da = np.empty_like(gates)
    da[:, :hidden] = dc_total * g * i * (1.0 - i)
    da[:, hidden:2 * hidden] = dc_total * c_prev * f * (1.0 - f)
    da[:, 2 * hidden:3 * hidden] = dh * tc * o * (1.0 - o)
    da[:, 3 * hidden:] = dc_total * i * (1.0 - g * g)
    return da, dc_total * f


def _np_stack_context(features, offsets):
    steps = features.shape[0]
    idx = np.clip(np.arange(steps)[:, None] + offsets[None, :], 0, steps - 1)
    return features[idx].reshape(steps, -1)


numpy_kernels = SimpleNamespace(
    sigmoid=_np_sigmoid,
    softmax_rows=_np_softmax_rows,
    lstm_pointwise=_np_lstm_pointwise,
    lstm_pointwise_backward=_np_lstm_pointwise_backward,
    stack_context=_np_stack_context,
)


# ----------------------------------------------------------------------------
# numba implementations
# ----------------------------------------------------------------------------

numba_kernels = None

if numba is not None:
    import math

    @numba.njit(cache=True, inline="always")
    def _sig_scalar(v):
        if v >= 0.0:
            return 1.0 / (1.0 + math.exp(-v))
        z = math.exp(v)
        return z / (1.0 + z)

    @numba.njit(cache=True)
    def _nb_sigmoid_flat(x, out):
        for k in range(x.size):
            out[k] = _sig_scalar(x[k])

    def _nb_sigmoid(x):
        x = np.asarray(x, dtype=np.float64)
        out = np.empty_like(x)
        _nb_sigmoid_flat(np.ascontiguousarray(x).reshape(-1), out.reshape(-1))
        return out

    @numba.njit(cache=True)
    def _nb_softmax_2d(z):
        out = np.empty_like(z)
        for r in range(z.shape[0]):
            m = z[r, 0]
            for k in range(1, z.shape[1]):
                if z[r, k] > m:
                    m = z[r, k]
            s = 0.0
            for k in range(z.shape[1]):
                e = math.exp(z[r, k] - m)
                out[r, k] = e
                s += e
            for k in range(z.shape[1]):
                out[r, k] /= s
        return out

    def _nb_softmax_rows(z):
        z = np.ascontiguousarray(z, dtype=np.float64)
        return _nb_softmax_2d(z.reshape(-1, z.shape[-1])).reshape(z.shape)

    @numba.njit(cache=True)
    def _nb_lstm_pointwise(a, c_prev):
        rows, hidden = c_prev.shape
        gates = np.empty_like(a)
        c = np.empty_like(c_prev)
        h = np.empty_like(c_prev)
        for r in range(rows):
            for k in range(hidden):
                i = _sig_scalar(a[r, k])
                f = _sig_scalar(a[r, hidden + k])
                o = _sig_scalar(a[r, 2 * hidden + k])
                g = math.tanh(a[r, 3 * hidden + k])
                gates[r, k] = i
                gates[r, hidden + k] = f
                gates[r, 2 * hidden + k] = o
                gates[r, 3 * hidden + k] = g
                cv = f * c_prev[r, k] + i * g
                c[r, k] = cv
                h[r, k] = o * math.tanh(cv)
        return gates, c, h

    @numba.njit(cache=True)
    def _nb_lstm_pointwise_backward(gates, c_prev, c, dh, dc):
        rows, hidden = c.shape
        da = np.empty_like(gates)
        dc_prev = np.empty_like(c)
        for r in range(rows):
            for k in range(hidden):
                i = gates[r, k]
                f = gates[r, hidden + k]
                o = gates[r, 2 * hidden + k]
                g = gates[r, 3 * hidden + k]
                tc = math.tanh(c[r, k])
                dct = dc[r, k] + dh[r, k] * o * (1.0 - tc * tc)
                da[r, k] = dct * g * i * (1.0 - i)
                da[r, hidden + k] = dct * c_prev[r, k] * f * (1.0 - f)
                da[r, 2 * hidden + k] = dh[r, k] * tc * o * (1.0 - o)
                da[r, 3 * hidden + k] = dct * i * (1.0 - g * g)
                dc_prev[r, k] = dct * f
        return da, dc_prev

    @numba.njit(cache=True)
    def _nb_stack_context(features, offsets):
        steps, dim = features.shape
        taps = offsets.shape[0]
        out = np.empty((steps, taps * dim))
        for t in range(steps):
            for j in range(taps):
                src = min(max(t + offsets[j], 0), steps - 1)
                for d in range(dim):
                    out[t, j * dim + d] = features[src, d]
        return out

    def _nb_stack_context_wrapper(features, offsets):
        return _nb_stack_context(np.ascontiguousarray(features, dtype=np.float64),
                                 np.asarray(offsets, dtype=np.int64))

    numba_kernels = SimpleNamespace(
        sigmoid=_nb_sigmoid,
        softmax_rows=_nb_softmax_rows,
        lstm_pointwise=lambda a, c_prev: _nb_lstm_pointwise(
            np.ascontiguousarray(a), np.ascontiguousarray(c_prev)),
        lstm_pointwise_backward=lambda gates, c_prev, c, dh, dc: _nb_lstm_pointwise_backward(
            np.ascontiguousarray(gates), np.ascontiguousarray(c_prev),
            np.ascontiguousarray(c), np.ascontiguousarray(dh), np.ascontiguousarray(dc)),
        stack_context=_nb_stack_context_wrapper,
    )


def _select_backend():
    requested = os.environ.get("PACRNN_KERNELS", "").strip().lower()
    if requested not in ("", "numba", "numpy"):
        raise ValueError(f"PACRNN_KERNELS must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numpy" or numba_kernels is None:
        return "numpy", numpy_kernels
    return "numba", numba_kernels


BACKEND, _active = _select_backend()

sigmoid = _active.sigmoid
softmax_rows = _active.softmax_rows
lstm_pointwise = _active.lstm_pointwise
lstm_pointwise_backward = _active.lstm_pointwise_backward
stack_context = _active.stack_context
