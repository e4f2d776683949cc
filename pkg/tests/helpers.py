"""Shared fixtures-by-function for the test suite."""

import numpy as np

from pacrnn.data import generate_toy_corpus, make_toy_spec, normalize
from pacrnn.model import (VARIANTS, PacRnnConfig, build_model, forward_utterance, joint_loss)
from pacrnn.tensor import Rng

# relative errors are measured against max(|analytic|, |numeric|, REL_FLOOR) so
# that entries whose true value is ~0 are judged on absolute error
REL_FLOOR = 1e-4
FD_STEP = 1e-5


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def numeric_grad(f, param, step=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``param`` (in place)."""
    out = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        old = param[idx]
        param[idx] = old + step
        fp = f()
        param[idx] = old - step
        fm = f()
        param[idx] = old
        out[idx] = (fp - fm) / (2 * step)
    return out


def tiny_config(variant="pacrnn-dnn", **overrides):
    """Small model whose context windows are all active within 6 frames."""
    base = dict(variant=variant, feature_dim=4, state_classes=5, phoneme_classes=3, T_corr=3,
                T_pred=1, pred_hidden=5, pred_bottleneck=3, corr_dnn_layers=(5, 4),
                corr_lstm_cells=4, projection=2, dnn_layers=(5, 4), lstm_layers=(4, 3))
    base.update(overrides)
    return PacRnnConfig(**base)


def tiny_model(variant, seed=3, jitter=0.3, **overrides):
    """Tiny model with every parameter (biases too) perturbed away from init."""
    rng = Rng(seed)
    model = build_model(tiny_config(variant, **overrides), rng)
    jr = rng.child("jitter")
    for _, p in model.named_parameters():
        p += jr.normal(0.0, jitter, p.shape)
    return model


def toy_batch(model, seed=5, batch=2, steps=6, short=4):
    """Random (features, state labels, phoneme labels, mask); utterance 1 is
    ``short`` frames long."""
    cfg = model.config
    rng = Rng(seed)
    feats = rng.normal(0.0, 1.0, (batch, steps, cfg.feature_dim))
    sl = rng.integers(0, cfg.state_classes, (batch, steps))
    pl = rng.integers(0, cfg.phoneme_classes, (batch, steps))
    mask = np.ones((batch, steps))
    if batch > 1:
        mask[1, short:] = 0.0
    return feats, sl, pl, mask


def utterance_objective(model, feats, sl, pl, mask, alpha=None):
    """-J summed over utterances, each run frame by frame from a fresh state."""
    alpha = model.config.alpha if alpha is None else alpha
    total = 0.0
    for b in range(feats.shape[0]):
        T = int(mask[b].sum())
        outs, _ = forward_utterance(model, feats[b, :T])
        total += joint_loss(outs, sl[b, :T], pl[b, :T], alpha, model.config.n)
    return -total


def toy_corpora(seed=0, train=40, dev=10, length_range=(30, 60), **spec_kw):
    spec = make_toy_spec(seed=seed, **spec_kw)
    tr = generate_toy_corpus(spec, train, length_range, seed=seed * 10 + 1)
    dv = generate_toy_corpus(spec, dev, length_range, seed=seed * 10 + 2)
    tr, stats = normalize(tr)
    dv, _ = normalize(dv, stats)
    return tr, dv


__all__ = ["VARIANTS", "full_unroll_grads", "gradient_check", "rel_error", "numeric_grad", "tiny_config", "tiny_model", "toy_batch",
           "utterance_objective", "toy_corpora", "REL_FLOOR", "FD_STEP"]


def full_unroll_grads(model, feats, sl, pl, mask, alpha=None):
    """Analytic gradients of -J through one chunk spanning the whole batch."""
    from pacrnn import kernels
    from pacrnn.model import prediction_targets

    cfg = model.config
    alpha = cfg.alpha if alpha is None else alpha
    B, L = sl.shape
    targets = np.full((B, L), -1, dtype=np.int64)
    for b in range(B):
        T = int(mask[b].sum())
        targets[b, :T] = prediction_targets(pl[b, :T], cfg.n)
    zs, zp, _, tape = model.forward_chunk(feats, keep_tape=True)
    ps = kernels.softmax_rows(zs)
    labels = np.where(mask > 0, sl, -1)
    if cfg.is_pac:
        return model.backward_chunk(tape, ps, labels, alpha * mask, kernels.softmax_rows(zp),
                                    targets, (1 - alpha) * mask)
    return model.backward_chunk(tape, ps, labels, mask)


def gradient_check(model, feats, sl, pl, mask, alpha=None):
    """Worst relative error over every parameter of ``model``."""
    analytic = full_unroll_grads(model, feats, sl, pl, mask, alpha)
    worst = 0.0
    for lname, layer in model.layers.items():
        for pname, p in layer.params().items():
            num = numeric_grad(lambda: utterance_objective(model, feats, sl, pl, mask, alpha), p)
            worst = max(worst, rel_error(analytic[lname][pname], num))
    return worst
