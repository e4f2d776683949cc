"""Compare the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N] [--skip-epoch]

Part 1 times each kernel in-process on shapes that occur in toy training
(20 parallel utterances, 128 LSTM cells, 30 state classes, 24-dim features
with 7 context taps).  Part 2 runs one training epoch of each variant in a
fresh interpreter per backend, since the backend is fixed at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from pacrnn import kernels

EPOCH_SNIPPET = """
import json, time
from pacrnn import PacRnnConfig, Rng, TOY_SIZES, build_model, kernels
from pacrnn.data import generate_toy_corpus, make_toy_spec, normalize, prepare_for_variant
from pacrnn.trainer import Schedule, train
spec = make_toy_spec(seed=0)
corpus, _ = normalize(generate_toy_corpus(spec, 40, seed=1))
out = {"backend": kernels.BACKEND}
for v in ("dnn", "lstm", "pacrnn-dnn", "pacrnn-lstm"):
    c = prepare_for_variant(corpus, v)
    model = build_model(PacRnnConfig(variant=v, feature_dim=c.feature_dim, **TOY_SIZES), Rng(0))
    train(model, c, c, Schedule.for_variant(v, max_epochs=1), clip=0.3)   # warm-up / compile
    start = time.perf_counter()
    train(model, c, c, Schedule.for_variant(v, max_epochs=1), clip=0.3)
    out[v] = time.perf_counter() - start
print(json.dumps(out))
"""


def kernel_cases(rng):
    a = rng.normal(0, 2, (20, 4 * 128))
    c_prev = rng.normal(size=(20, 128))
    gates, c, _ = kernels.numpy_kernels.lstm_pointwise(a, c_prev)
    dh, dc = rng.normal(size=(2, 20, 128))
    feats = rng.normal(size=(200, 24))
    offsets = np.arange(-15, 16, 5)
    return {
        "sigmoid 400x128": ("sigmoid", (rng.normal(0, 3, (400, 128)),)),
        "softmax_rows 400x30": ("softmax_rows", (rng.normal(0, 3, (400, 30)),)),
        "lstm_pointwise 20x128": ("lstm_pointwise", (a, c_prev)),
        "lstm_pointwise_backward 20x128": ("lstm_pointwise_backward",
                                           (gates, c_prev, c, dh, dc)),
        "stack_context 200x24x7": ("stack_context", (feats, offsets)),
    }


def time_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, (name, args) in kernel_cases(rng).items():
        per = {}
        for backend, ns in (("numpy", kernels.numpy_kernels), ("numba", kernels.numba_kernels)):
            fn = getattr(ns, name)
            fn(*args)   # compile / warm caches
            number = 200
            best = min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat))
            per[backend] = 1e6 * best / number
        rows.append((label, per["numpy"], per["numba"]))
    return rows


def time_epochs():
    res = {}
    for backend in ("numpy", "numba"):
        env = {**os.environ, "PACRNN_KERNELS": backend}
        proc = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], capture_output=True,
                              text=True, env=env, check=True)
        res[backend] = json.loads(proc.stdout)
    return res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-epoch", action="store_true", help="only time the kernels")
    args = ap.parse_args(argv)
    if kernels.numba_kernels is None:
        sys.exit("numba is not importable; nothing to compare")

    print(f"{'kernel':34s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, t_np, t_nb in time_kernels(args.repeat):
        print(f"{label:34s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:8.2f}")
    if args.skip_epoch:
        return
    res = time_epochs()
    print()
    print(f"{'one epoch, 40 utterances':34s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}")
    for v in ("dnn", "lstm", "pacrnn-dnn", "pacrnn-lstm"):
        t_np, t_nb = res["numpy"][v], res["numba"][v]
        print(f"{v:34s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
