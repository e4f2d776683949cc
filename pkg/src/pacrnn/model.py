"""PAC-RNN and baseline acoustic models.

Four variants share one interface:

``dnn``          feed-forward sigmoid stack -> state softmax
``lstm``         stacked LSTM -> state softmax
``pacrnn-dnn``   correction DNN + prediction DNN coupled in a recurrent loop
``pacrnn-lstm``  as above with a single LSTM layer as the correction model

Per frame t the PAC-RNN runs, in order:

1. ``x_t``: the last ``T_corr`` prediction-bottleneck outputs, oldest first
2. correction net on ``[o_t | x_t]`` -> state posterior, hidden ``h_corr``
3. ``h_corr`` projected (linear) and pushed into the correction history
4. ``y_t``: the correction history window ending at t
5. prediction net on ``[o_t | y_t]`` -> sigmoid hidden -> linear bottleneck
   ``h_pred`` -> phoneme posterior; ``h_pred`` is pushed for frame t+1

History slots before the utterance start hold zeros.  Training minimises
``-J`` where ``J = sum_t alpha*ln p_corr(s_t) + (1-alpha)*ln p_pred(l_{t+n})``.
"""

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from .errors import DimensionError, LabelError, ParameterError
from .layers import AffineLayer, LstmCell, SoftmaxHead
from .tensor import DTYPE, zeros

VARIANTS = ("dnn", "lstm", "pacrnn-dnn", "pacrnn-lstm")
CORR_CONTEXT_MODES = ("literal", "window")

# Layer sizes for desk-scale toy runs (the dataclass defaults are full size).
TOY_SIZES = {
    "pred_hidden": 128,
    "pred_bottleneck": 16,
    "corr_dnn_layers": (128, 128),
    "corr_lstm_cells": 128,
    "projection": 32,
    "dnn_layers": (128, 128, 128),
    "lstm_layers": (64, 64, 64),
}


@dataclass
class PacRnnConfig:
    """Architecture and objective settings.

    Defaults are the full-size settings (2048-unit prediction hidden layer,
    80-unit bottleneck, 500-unit projection, ...).  Only the fields relevant
    to ``variant`` are consulted.

    Sigmoid layers draw weights from +-sigmoid_init_gain/sqrt(fan_in); with
    gain 1 a three-layer sigmoid stack barely passes signal at init.

    ``corr_context`` selects how many projected correction outputs feed the
    prediction net: ``"literal"`` uses frames t-T_pred-1 .. t (T_pred+2
    slots), ``"window"`` uses t-T_pred .. t (T_pred+1 slots).
    """

    variant: str = "pacrnn-dnn"
    feature_dim: int = 560
    state_classes: int = 30
    phoneme_classes: int = 10
    T_corr: int = 10
    T_pred: int = 1
    alpha: float = 0.8
    n: int = 1
    pred_hidden: int = 2048
    pred_bottleneck: int = 80
    corr_dnn_layers: tuple = (2048, 2048)
    corr_lstm_cells: int = 1024
    projection: int = 500
    dnn_layers: tuple = (1024, 1024, 1024)
    lstm_layers: tuple = (512, 512, 512)
    corr_context: str = "literal"
    sigmoid_init_gain: float = 4.0
    lstm_cell: str = "forget-gate, no peephole"

    def __post_init__(self):
        self.corr_dnn_layers = tuple(int(v) for v in self.corr_dnn_layers)
        self.dnn_layers = tuple(int(v) for v in self.dnn_layers)
        self.lstm_layers = tuple(int(v) for v in self.lstm_layers)

    @property
    def is_pac(self):
        return self.variant in ("pacrnn-dnn", "pacrnn-lstm")

    @property
    def corr_slots(self):
        return self.T_pred + 2 if self.corr_context == "literal" else self.T_pred + 1

    def validate(self):
        def positive(name, value):
            if int(value) < 1:
                raise ParameterError(f"{name} must be positive, got {value}")

        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        positive("feature_dim", self.feature_dim)
        if not self.sigmoid_init_gain > 0:
            raise ParameterError(
                f"sigmoid_init_gain must be positive, got {self.sigmoid_init_gain}")
        if self.state_classes < 2:
            raise ParameterError(f"state_classes must be at least 2, got {self.state_classes}")
        if self.variant == "dnn":
            if not self.dnn_layers:
                raise ParameterError("dnn_layers must not be empty")
            for width in self.dnn_layers:
                positive("dnn_layers", width)
        elif self.variant == "lstm":
            if not self.lstm_layers:
                raise ParameterError("lstm_layers must not be empty")
            for width in self.lstm_layers:
                positive("lstm_layers", width)
        else:
            if self.phoneme_classes < 2:
                raise ParameterError(
                    f"phoneme_classes must be at least 2, got {self.phoneme_classes}")
            if not 0.0 <= self.alpha <= 1.0:
                raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
            positive("T_corr", self.T_corr)
            if self.T_pred < 0:
                raise ParameterError(f"T_pred must be non-negative, got {self.T_pred}")
            positive("n", self.n)
            positive("pred_hidden", self.pred_hidden)
            positive("pred_bottleneck", self.pred_bottleneck)
            positive("projection", self.projection)
            if self.corr_context not in CORR_CONTEXT_MODES:
                raise ParameterError(
                    f"corr_context must be one of {CORR_CONTEXT_MODES}, got {self.corr_context!r}")
            if self.variant == "pacrnn-dnn":
                if not self.corr_dnn_layers:
                    raise ParameterError("corr_dnn_layers must not be empty")
                for width in self.corr_dnn_layers:
                    positive("corr_dnn_layers", width)
            else:
                positive("corr_lstm_cells", self.corr_lstm_cells)
        return self

    def to_dict(self):
        out = asdict(self)
        for key in ("corr_dnn_layers", "dnn_layers", "lstm_layers"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class FrameOutput:
    state_posterior: np.ndarray
    phoneme_posterior: np.ndarray = None


@dataclass
class RecurrentState:
    """State carried from frame to frame (and across BPTT chunks).

    Arrays carry a leading batch axis.  ``pred_history`` is (B, T_corr,
    bottleneck) and ``corr_history`` is (B, slots, projection), both oldest
    first; they are ``None`` for the baselines.  ``lstm`` holds one (h, c)
    pair per LSTM layer.
    """

    pred_history: np.ndarray = None
    corr_history: np.ndarray = None
    lstm: list = field(default_factory=list)
    frames_seen: int = 0

    @property
    def batch(self):
        if self.pred_history is not None:
            return self.pred_history.shape[0]
        if self.lstm:
            return self.lstm[0][0].shape[0]
        return None

    def copy(self):
        return RecurrentState(
            None if self.pred_history is None else self.pred_history.copy(),
            None if self.corr_history is None else self.corr_history.copy(),
            [(h.copy(), c.copy()) for h, c in self.lstm],
            self.frames_seen,
        )

    def select(self, rows):
        """State restricted to the given batch rows."""
        return RecurrentState(
            None if self.pred_history is None else self.pred_history[rows].copy(),
            None if self.corr_history is None else self.corr_history[rows].copy(),
            [(h[rows].copy(), c[rows].copy()) for h, c in self.lstm],
            self.frames_seen,
        )


def _push(history, value):
    out = np.empty_like(history)
    out[:, :-1] = history[:, 1:]
    out[:, -1] = value
    return out


def gather_prediction_context(state):
    """``x_t``: prediction-bottleneck history, oldest first, flattened."""
    hist = state.pred_history
    flat = hist.reshape(hist.shape[0], -1)
    return flat[0] if flat.shape[0] == 1 else flat


def gather_correction_context(state):
    """``y_t``: projected correction history ending at the current frame."""
    hist = state.corr_history
    flat = hist.reshape(hist.shape[0], -1)
    return flat[0] if flat.shape[0] == 1 else flat


class Model:
    """Parameter container plus forward/backward over BPTT chunks."""

    def __init__(self, config, layers):
        self.config = config
        self.layers = dict(layers)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        for lname, layer in self.layers.items():
            for pname, value in layer.params().items():
                yield f"{lname}.{pname}", value

    @property
    def parameter_count(self):
        return int(sum(v.size for _, v in self.named_parameters()))

    def zero_grads(self):
        return {lname: {p: np.zeros_like(v) for p, v in layer.params().items()}
                for lname, layer in self.layers.items()}

    def initial_state(self, batch=1):
        cfg = self.config
        state = RecurrentState()
        if cfg.is_pac:
            state.pred_history = zeros((batch, cfg.T_corr, cfg.pred_bottleneck))
            state.corr_history = zeros((batch, cfg.corr_slots, cfg.projection))
        if cfg.variant == "lstm":
            state.lstm = [self.layers[f"lstm{k}"].zero_state(batch)
                          for k in range(len(cfg.lstm_layers))]
        elif cfg.variant == "pacrnn-lstm":
            state.lstm = [self.layers["corr_lstm"].zero_state(batch)]
        return state

    # -- forward ------------------------------------------------------------

    def _check_frames(self, frames, stage):
        if frames.shape[-1] != self.config.feature_dim:
            raise DimensionError(
                f"{stage}: feature width {frames.shape[-1]} != configured "
                f"feature_dim {self.config.feature_dim}")

    def _step(self, o, state, tape):
        """Advance one frame for a (B, D) batch; returns (state logits,
        phoneme logits or None, new state)."""
        cfg = self.config
        L = self.layers
        rec = {}
        new = RecurrentState(state.pred_history, state.corr_history, list(state.lstm),
                             state.frames_seen + 1)
        if cfg.variant == "dnn":
            h = o
            rec["hidden"] = []
            for k in range(len(cfg.dnn_layers)):
                h, cache = L[f"hidden{k}"].forward_cached(h)
                rec["hidden"].append(cache)
            rec["top"] = h
            z_state = h @ L["state_head"].weights.T + L["state_head"].bias
            if tape is not None:
                tape.append(rec)
            return z_state, None, new
        if cfg.variant == "lstm":
            h = o
            rec["lstm"] = []
            for k in range(len(cfg.lstm_layers)):
                hp, cp = state.lstm[k]
                h, c, cache = L[f"lstm{k}"].step_cached(h, hp, cp)
                new.lstm[k] = (h, c)
                rec["lstm"].append(cache)
            rec["top"] = h
            z_state = h @ L["state_head"].weights.T + L["state_head"].bias
            if tape is not None:
                tape.append(rec)
            return z_state, None, new

        batch = o.shape[0]
        x = state.pred_history.reshape(batch, -1)
        corr_in = np.concatenate([o, x], axis=1)
        if cfg.variant == "pacrnn-dnn":
            h = corr_in
            rec["corr"] = []
            for k in range(len(cfg.corr_dnn_layers)):
                h, cache = L[f"corr_hidden{k}"].forward_cached(h)
                rec["corr"].append(cache)
        else:
            hp, cp = state.lstm[0]
            h, c, cache = L["corr_lstm"].step_cached(corr_in, hp, cp)
            new.lstm[0] = (h, c)
            rec["corr"] = cache
        rec["top"] = h
        z_state = h @ L["state_head"].weights.T + L["state_head"].bias
        proj, rec["projection"] = L["projection"].forward_cached(h)
        new.corr_history = _push(state.corr_history, proj)
        y = new.corr_history.reshape(batch, -1)
        pred_in = np.concatenate([o, y], axis=1)
        ph, rec["pred_hidden"] = L["pred_hidden"].forward_cached(pred_in)
        bn, rec["pred_bottleneck"] = L["pred_bottleneck"].forward_cached(ph)
        rec["bn"] = bn
        z_phone = bn @ L["phone_head"].weights.T + L["phone_head"].bias
        new.pred_history = _push(state.pred_history, bn)
        if tape is not None:
            tape.append(rec)
        return z_state, z_phone, new

    def forward_chunk(self, features, state=None, keep_tape=False):
        """Run frames ``features`` (B, L, D) from ``state``.

        Returns (state logits (B, L, S), phoneme logits (B, L, P) or None,
        final state, tape).  The tape is ``None`` unless ``keep_tape``.
        """
        features = np.asarray(features, dtype=DTYPE)
        if features.ndim != 3:
            raise DimensionError(f"forward_chunk expects (B, L, D) frames, got {features.shape}")
        self._check_frames(features, "forward_chunk")
        batch, steps, _ = features.shape
        if state is None:
            state = self.initial_state(batch)
        elif state.batch is not None and state.batch != batch:
            raise DimensionError(f"state batch {state.batch} != chunk batch {batch}")
        cfg = self.config
        z_state = np.empty((batch, steps, cfg.state_classes))
        z_phone = np.empty((batch, steps, cfg.phoneme_classes)) if cfg.is_pac else None
        tape = [] if keep_tape else None
        for t in range(steps):
            zs, zp, state = self._step(features[:, t], state, tape)
            z_state[:, t] = zs
            if zp is not None:
                z_phone[:, t] = zp
        return z_state, z_phone, state, tape

    def dnn_rows_forward(self, rows):
        """Feed-forward pass of the ``dnn`` variant on independent frames."""
        tape = []
        zs, _, _ = self._step(rows, RecurrentState(), tape)
        return zs, tape[0]

    # -- backward -----------------------------------------------------------

    def backward_chunk(self, tape, state_post, state_labels, state_coef,
                       phone_post=None, phone_targets=None, phone_coef=None, grads=None):
        """Truncated BPTT through one chunk.

        ``*_post`` are (B, L, C) posteriors from the forward pass, ``*_coef``
        (B, L) weights on each frame's cross-entropy (zero for masked
        frames).  Returns gradients of ``sum coef * CE`` keyed by layer and
        parameter; nothing flows into the state the chunk started from.
        """
        cfg = self.config
        L = self.layers
        if grads is None:
            grads = self.zero_grads()
        batch, steps = state_labels.shape
        d_state = _ce_delta(state_post, state_labels, state_coef)
        if cfg.is_pac:
            d_phone = _ce_delta(phone_post, phone_targets, phone_coef)
            d_bn = np.zeros((steps, batch, cfg.pred_bottleneck))
            d_proj = np.zeros((steps, batch, cfg.projection))
            slots = cfg.corr_slots
            width = cfg.feature_dim
        lstm_dh = lstm_dc = None
        if cfg.variant == "lstm":
            lstm_dh = [np.zeros((batch, w)) for w in cfg.lstm_layers]
            lstm_dc = [np.zeros((batch, w)) for w in cfg.lstm_layers]
        elif cfg.variant == "pacrnn-lstm":
            lstm_dh = [np.zeros((batch, cfg.corr_lstm_cells))]
            lstm_dc = [np.zeros((batch, cfg.corr_lstm_cells))]

        for t in range(steps - 1, -1, -1):
            rec = tape[t]
            dz = d_state[:, t]
            _head_grad(L["state_head"], rec["top"], dz, grads["state_head"])
            dh = dz @ L["state_head"].weights

            if cfg.variant == "dnn":
                for k in range(len(cfg.dnn_layers) - 1, -1, -1):
                    _, dh = L[f"hidden{k}"].backward(rec["hidden"][k], dh, into=grads[f"hidden{k}"])
                continue
            if cfg.variant == "lstm":
                for k in range(len(cfg.lstm_layers) - 1, -1, -1):
                    _, dx, lstm_dh[k], lstm_dc[k] = L[f"lstm{k}"].backward(
                        rec["lstm"][k], dh + lstm_dh[k], lstm_dc[k], into=grads[f"lstm{k}"])
                    dh = dx
                continue

            # prediction side first: everything downstream of bn_t is done
            dzp = d_phone[:, t]
            _head_grad(L["phone_head"], rec["bn"], dzp, grads["phone_head"])
            dbn = d_bn[t] + dzp @ L["phone_head"].weights
            _, dph = L["pred_bottleneck"].backward(rec["pred_bottleneck"], dbn,
                                                   into=grads["pred_bottleneck"])
            _, dpin = L["pred_hidden"].backward(rec["pred_hidden"], dph,
                                                into=grads["pred_hidden"])
            dy = dpin[:, width:].reshape(batch, slots, cfg.projection)
            for k in range(slots):
                src = t - (slots - 1) + k
                if src >= 0:
                    d_proj[src] += dy[:, k]

            # correction side: d_proj[t] is complete now
            _, dproj_h = L["projection"].backward(rec["projection"], d_proj[t],
                                                  into=grads["projection"])
            dh = dh + dproj_h
            if cfg.variant == "pacrnn-dnn":
                for k in range(len(cfg.corr_dnn_layers) - 1, -1, -1):
                    _, dh = L[f"corr_hidden{k}"].backward(rec["corr"][k], dh,
                                                          into=grads[f"corr_hidden{k}"])
                dcorr_in = dh
            else:
                _, dcorr_in, lstm_dh[0], lstm_dc[0] = L["corr_lstm"].backward(
                    rec["corr"], dh + lstm_dh[0], lstm_dc[0], into=grads["corr_lstm"])
            dx = dcorr_in[:, width:].reshape(batch, cfg.T_corr, cfg.pred_bottleneck)
            for k in range(cfg.T_corr):
                src = t - cfg.T_corr + k
                if src >= 0:
                    d_bn[src] += dx[:, k]
        return grads

    def backward_dnn_rows(self, rec, post, labels, coef, grads=None):
        """Backward for ``dnn_rows_forward``."""
        if grads is None:
            grads = self.zero_grads()
        dz = _ce_delta(post[None], labels[None], coef[None])[0]
        L = self.layers
        _head_grad(L["state_head"], rec["top"], dz, grads["state_head"])
        dh = dz @ L["state_head"].weights
        for k in range(len(self.config.dnn_layers) - 1, -1, -1):
            _, dh = L[f"hidden{k}"].backward(rec["hidden"][k], dh, into=grads[f"hidden{k}"])
        return grads

    # -- single-frame / single-utterance API ---------------------------------

    def step(self, o_t, state):
        o = np.asarray(o_t, dtype=DTYPE)
        single = o.ndim == 1
        ob = o[None] if single else o
        self._check_frames(ob, "forward_step")
        if state.batch is not None and state.batch != ob.shape[0]:
            raise DimensionError(
                f"forward_step: state batch {state.batch} != input batch {ob.shape[0]}")
        zs, zp, new = self._step(ob, state, None)
        ps = kernels.softmax_rows(zs)
        pp = None if zp is None else kernels.softmax_rows(zp)
        if single:
            return FrameOutput(ps[0], None if pp is None else pp[0]), new
        return FrameOutput(ps, pp), new


def _ce_delta(post, labels, coef):
    """``coef * (posterior - onehot(label))``; negative labels act as masked."""
    labels = np.asarray(labels, dtype=np.int64)
    coef = np.where(labels >= 0, coef, 0.0)
    safe = np.where(labels >= 0, labels, 0)
    delta = post.copy()
    b_idx, t_idx = np.indices(labels.shape)
    delta[b_idx, t_idx, safe] -= 1.0
    delta *= coef[..., None]
    return delta


def _head_grad(head, x, dz, into):
    into["weights"] += dz.T @ x
    into["bias"] += dz.sum(axis=0)


def build_model(config, rng):
    """Allocate and initialise every parameter tensor for ``config``."""
    config.validate()
    cfg = config
    gain = cfg.sigmoid_init_gain
    layers = {}
    if cfg.variant == "dnn":
        width = cfg.feature_dim
        for k, units in enumerate(cfg.dnn_layers):
            layers[f"hidden{k}"] = AffineLayer.init(rng.child(f"hidden{k}"), width, units,
                                                    gain=gain)
            width = units
        layers["state_head"] = SoftmaxHead.init(rng.child("state_head"), width, cfg.state_classes)
    elif cfg.variant == "lstm":
        width = cfg.feature_dim
        for k, cells in enumerate(cfg.lstm_layers):
            layers[f"lstm{k}"] = LstmCell.init(rng.child(f"lstm{k}"), width, cells)
            width = cells
        layers["state_head"] = SoftmaxHead.init(rng.child("state_head"), width, cfg.state_classes)
    else:
        corr_in = cfg.feature_dim + cfg.T_corr * cfg.pred_bottleneck
        if cfg.variant == "pacrnn-dnn":
            width = corr_in
            for k, units in enumerate(cfg.corr_dnn_layers):
                layers[f"corr_hidden{k}"] = AffineLayer.init(rng.child(f"corr_hidden{k}"),
                                                             width, units, gain=gain)
                width = units
        else:
            layers["corr_lstm"] = LstmCell.init(rng.child("corr_lstm"), corr_in,
                                                cfg.corr_lstm_cells)
            width = cfg.corr_lstm_cells
        layers["state_head"] = SoftmaxHead.init(rng.child("state_head"), width, cfg.state_classes)
        layers["projection"] = AffineLayer.init(rng.child("projection"), width, cfg.projection,
                                                activation="linear")
        pred_in = cfg.feature_dim + cfg.corr_slots * cfg.projection
        layers["pred_hidden"] = AffineLayer.init(rng.child("pred_hidden"), pred_in,
                                                 cfg.pred_hidden, gain=gain)
        layers["pred_bottleneck"] = AffineLayer.init(rng.child("pred_bottleneck"),
                                                     cfg.pred_hidden, cfg.pred_bottleneck,
                                                     activation="linear")
        layers["phone_head"] = SoftmaxHead.init(rng.child("phone_head"), cfg.pred_bottleneck,
                                                cfg.phoneme_classes)
    return Model(cfg, layers)


def forward_step(model, o_t, state):
    """One frame through the model; returns (FrameOutput, new state)."""
    return model.step(o_t, state)


def forward_utterance(model, features, state=None):
    """Per-frame outputs for a (T, D) utterance, state threaded frame to frame.

    Returns (list of FrameOutput, final state).
    """
    features = np.asarray(features, dtype=DTYPE)
    if features.ndim != 2:
        raise DimensionError(f"forward_utterance expects (T, D) frames, got {features.shape}")
    if state is None:
        state = model.initial_state(1)
    outputs = []
    for t in range(features.shape[0]):
        out, state = model.step(features[t:t + 1], state)
        outputs.append(FrameOutput(out.state_posterior[0],
                                   None if out.phoneme_posterior is None
                                   else out.phoneme_posterior[0]))
    return outputs, state


def prediction_targets(phoneme_labels, n):
    """Phoneme label at min(t+n, T-1) for every frame t."""
    labels = np.asarray(phoneme_labels, dtype=np.int64)
    if labels.size == 0:
        return labels.copy()
    idx = np.minimum(np.arange(labels.size) + int(n), labels.size - 1)
    return labels[idx]


def joint_loss(outputs, state_labels, phoneme_labels, alpha, n):
    """Objective J summed over frames (maximised in training).

    Frames whose state label is negative are skipped.  Frames without a
    phoneme posterior (baseline models) contribute ``ln p_corr`` alone.
    """
    state_labels = np.asarray(state_labels, dtype=np.int64)
    phoneme_labels = np.asarray(phoneme_labels, dtype=np.int64)
    if len(state_labels) != len(outputs) or len(phoneme_labels) != len(outputs):
        raise LabelError(
            f"label lengths ({len(state_labels)}, {len(phoneme_labels)}) do not match "
            f"{len(outputs)} frames")
    targets = prediction_targets(phoneme_labels, n)
    total = 0.0
    for t, out in enumerate(outputs):
        if state_labels[t] < 0:
            continue
        corr = np.log(out.state_posterior[state_labels[t]])
        if out.phoneme_posterior is None:
            total += corr
        else:
            pred = np.log(out.phoneme_posterior[targets[t]]) if targets[t] >= 0 else 0.0
            total += alpha * corr + (1.0 - alpha) * pred
    return float(total)


def frame_error_rate(outputs, state_labels):
    """Fraction of scored frames whose argmax state differs from the label."""
    labels = np.asarray(state_labels, dtype=np.int64)
    scored = [(out, lab) for out, lab in zip(outputs, labels) if lab >= 0]
    if not scored:
        return 0.0
    wrong = sum(int(np.argmax(out.state_posterior) != lab) for out, lab in scored)
    return wrong / len(scored)
