import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pacrnn import kernels

pytestmark = pytest.mark.skipif(kernels.numba_kernels is None, reason="numba not importable")

NP, NB = kernels.numpy_kernels, kernels.numba_kernels
finite = st.floats(-60, 60, allow_nan=False)


def _mats(rows=st.integers(1, 6), cols=st.integers(1, 9)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


@settings(max_examples=60, deadline=None)
@given(_mats())
def test_sigmoid_backends_agree(x):
    assert np.allclose(NB.sigmoid(x), NP.sigmoid(x), rtol=1e-14, atol=1e-300)


@settings(max_examples=60, deadline=None)
@given(_mats())
def test_softmax_backends_agree(z):
    a, b = NB.softmax_rows(z), NP.softmax_rows(z)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-300)
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_lstm_pointwise_backends_agree(batch, hidden, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 3, (batch, 4 * hidden))
    c_prev = rng.normal(0, 2, (batch, hidden))
    dh, dc = rng.normal(size=(2, batch, hidden))
    fwd_nb, fwd_np = NB.lstm_pointwise(a, c_prev), NP.lstm_pointwise(a, c_prev)
    for x, y in zip(fwd_nb, fwd_np):
        assert np.allclose(x, y, rtol=1e-13, atol=1e-15)
    gates, c, _ = fwd_np
    for x, y in zip(NB.lstm_pointwise_backward(gates, c_prev, c, dh, dc),
                    NP.lstm_pointwise_backward(gates, c_prev, c, dh, dc)):
        assert np.allclose(x, y, rtol=1e-13, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(0, 4), st.integers(1, 3))
def test_stack_context_backends_identical(steps, dim, half, step):
    feats = np.arange(steps * dim, dtype=np.float64).reshape(steps, dim)
    offsets = np.arange(-half, half + 1, step)
    assert np.array_equal(NB.stack_context(feats, offsets), NP.stack_context(feats, offsets))


@pytest.mark.parametrize("impl", ["numpy", "numba"])
def test_sigmoid_extremes(impl):
    k = NP if impl == "numpy" else NB
    x = np.array([[-800.0, -40.0, 0.0, 40.0, 800.0]])
    with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
        y = k.sigmoid(x)
    assert y[0, 2] == 0.5 and y[0, 4] == 1.0 and 0.0 <= y[0, 0] < 1e-300
    assert np.all(np.isfinite(y))


@pytest.mark.parametrize("impl", ["numpy", "numba"])
def test_softmax_large_logits(impl):
    k = NP if impl == "numpy" else NB
    p = k.softmax_rows(np.array([[1000.0, 0.0, -1000.0], [5.0, 5.0, 5.0]]))
    assert np.isfinite(p).all()
    assert p[0, 0] == 1.0 and np.allclose(p[1], 1 / 3, rtol=1e-15)


def test_lstm_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 12))
    c_prev = rng.normal(size=(2, 3))
    dh, dc = rng.normal(size=(2, 2, 3))

    def scalar(av):
        _, c, h = NP.lstm_pointwise(av, c_prev)
        return float((h * dh).sum() + (c * dc).sum())

    gates, c, _ = NP.lstm_pointwise(a, c_prev)
    da, _ = NB.lstm_pointwise_backward(gates, c_prev, c, dh, dc)
    num = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        e = np.zeros_like(a)
        e[idx] = 1e-6
        num[idx] = (scalar(a + e) - scalar(a - e)) / 2e-6
    assert np.allclose(da, num, rtol=1e-6, atol=1e-9)


# -- backend selection -------------------------------------------------------------

def _python(code, backend):
    env = {**os.environ, "PACRNN_KERNELS": backend}
    return subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_env_var_selects_backend(backend):
    proc = _python("from pacrnn import kernels; print(kernels.BACKEND)", backend)
    assert proc.returncode == 0 and proc.stdout.strip() == backend


def test_bad_backend_name():
    proc = _python("import pacrnn", "fortran")
    assert proc.returncode != 0 and "PACRNN_KERNELS" in proc.stderr


TRAIN_SNIPPET = """
import json, sys
sys.path.insert(0, {tests!r})
from helpers import toy_corpora
from pacrnn import PacRnnConfig, Rng, build_model
from pacrnn.data import prepare_for_variant
from pacrnn.trainer import Schedule, train
tr, dv = toy_corpora(seed=2, train=6, dev=3, length_range=(20, 30))
out = {{}}
for v in ("lstm", "pacrnn-lstm"):
    a, b = prepare_for_variant(tr, v), prepare_for_variant(dv, v)
    cfg = PacRnnConfig(variant=v, feature_dim=a.feature_dim, lstm_layers=(6,), corr_lstm_cells=6,
                       pred_hidden=6, pred_bottleneck=3, projection=3)
    run = train(build_model(cfg, Rng(0)), a, b, Schedule.for_variant(v, max_epochs=2), clip=0.3)
    out[v] = [r["dev_J"] for r in run.records]
print(json.dumps(out))
"""


def test_training_agrees_across_backends():
    code = TRAIN_SNIPPET.format(tests=os.path.dirname(__file__))
    res = {}
    for backend in ("numpy", "numba"):
        proc = _python(code, backend)
        assert proc.returncode == 0, proc.stderr
        res[backend] = json.loads(proc.stdout)
    for v, values in res["numpy"].items():
        assert np.allclose(values, res["numba"][v], rtol=1e-9, atol=0)
