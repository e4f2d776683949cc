"""Truncated BPTT, momentum SGD and the learning-rate schedule.

Sign convention: gradients are of the loss ``-J``; ``sgd_update`` moves
parameters by ``velocity = momentum * velocity - lr * grad``, i.e. it
ascends ``J``.

Metrics log: one JSON object per line and per epoch with the keys
``epoch, lr, momentum, train_J, train_J_running, dev_J, dev_FER,
train_frames, variant, corpus``.  ``train_J``/``dev_J`` are per-frame means
of J (<= 0) for the model at the end of the epoch; ``train_J_running`` is
the mean over the epoch's own updates, so it also reflects transients such
as the jump in learning rate after epoch 1.  ``lr``/``momentum`` are the
values used during that epoch.  Wall-clock time
goes to a separate ``timing`` log so the metrics log itself stays bitwise
reproducible.
"""

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ParameterError, StateError
from .model import prediction_targets
from .tensor import Rng

NORMALIZATIONS = ("frame", "sum")
IMPROVEMENT_EPS = 1e-6


@dataclass
class BpttPlan:
    chunk_frames: int = 20
    parallel_utterances: int = 20

    def __post_init__(self):
        if self.chunk_frames < 1 or self.parallel_utterances < 1:
            raise ParameterError("chunk_frames and parallel_utterances must be positive")


@dataclass
class ChunkBatch:
    """One BPTT chunk for a group of utterances.

    ``mask`` is 1.0 on real frames and 0.0 on padding after an utterance
    ends.  ``state_labels`` / ``phone_targets`` are -1 wherever a frame is
    not scored (padding or delayed-label skip frames).
    """

    group: int
    index: int
    utterance_ids: list
    features: np.ndarray
    state_labels: np.ndarray
    phone_targets: np.ndarray
    mask: np.ndarray

    @property
    def first(self):
        return self.index == 0

    @property
    def frames(self):
        return int(self.mask.sum())


def make_batches(corpus, plan, rng=None, n=1):
    """Cut the corpus into chunk batches.

    Utterances are shuffled with ``rng`` (kept in corpus order when ``rng``
    is None), grouped ``parallel_utterances`` at a time, and each group is
    padded to a multiple of ``chunk_frames`` and cut into aligned chunks.
    """
    utts = [u for u in corpus.utterances if u.frames]
    order = np.arange(len(utts)) if rng is None else rng.permutation(len(utts))
    batches = []
    P, C = plan.parallel_utterances, plan.chunk_frames
    for g, start in enumerate(range(0, len(order), P)):
        members = [utts[k] for k in order[start:start + P]]
        longest = max(u.frames for u in members)
        grid = -(-longest // C) * C
        B, D = len(members), members[0].dim
        feats = np.zeros((B, grid, D))
        states = np.full((B, grid), -1, dtype=np.int64)
        phones = np.full((B, grid), -1, dtype=np.int64)
        mask = np.zeros((B, grid))
        for b, u in enumerate(members):
            T = u.frames
            feats[b, :T] = u.features
            states[b, :T] = u.state_labels
            phones[b, :T] = prediction_targets(u.phoneme_labels, n)
            mask[b, :T] = 1.0
        ids = [u.id for u in members]
        for k, t0 in enumerate(range(0, grid, C)):
            sl = slice(t0, t0 + C)
            batches.append(ChunkBatch(g, k, ids, feats[:, sl], states[:, sl], phones[:, sl],
                                      mask[:, sl]))
    return batches


@dataclass
class ChunkResult:
    loss: float          # -J summed over the chunk's scored frames
    frames: int          # frames scored by the state head
    errors: int          # argmax mismatches among scored frames
    grads: dict
    state: object


def _log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _picked(logp, labels):
    safe = np.where(labels >= 0, labels, 0)
    return np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]


def chunk_objective(model, chunk, state=None, alpha=None, normalization="frame",
                    need_grad=True):
    """Forward (and backward) over one chunk with carried ``state``.

    Backpropagation stops at the chunk boundary.  Gradients are of the loss
    divided by the number of scored frames when ``normalization`` is
    ``"frame"``, or of the plain summed loss for ``"sum"``.
    """
    if normalization not in NORMALIZATIONS:
        raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
    cfg = model.config
    if state is not None and state.batch not in (None, chunk.features.shape[0]):
        raise StateError(
            f"carried state for {state.batch} utterances, chunk has {chunk.features.shape[0]}")
    alpha = cfg.alpha if alpha is None else alpha
    live = chunk.mask > 0
    s_labels = np.where(live, chunk.state_labels, -1)
    s_valid = s_labels >= 0
    frames = int(s_valid.sum())
    scale = (1.0 / frames if frames else 0.0) if normalization == "frame" else 1.0

    if cfg.variant == "dnn":
        # no recurrence: score only real frames, in (utterance, time) order
        rows = chunk.features[live]
        labels = s_labels[live]
        zs, rec = model.dnn_rows_forward(rows)
        logp = _log_softmax(zs)
        ok = labels >= 0
        loss = float(-(_picked(logp, labels)[ok]).sum())
        errors = int((np.argmax(zs, axis=1) != labels)[ok].sum())
        grads = None
        if need_grad:
            post = kernels.softmax_rows(zs)
            grads = model.backward_dnn_rows(rec, post, labels, ok * scale)
        return ChunkResult(loss, frames, errors, grads, state)

    zs, zp, new_state, tape = model.forward_chunk(chunk.features, state, keep_tape=need_grad)
    logp_s = _log_softmax(zs)
    state_w = alpha if cfg.is_pac else 1.0
    loss = -state_w * float(_picked(logp_s, s_labels)[s_valid].sum())
    errors = int((np.argmax(zs, axis=-1) != s_labels)[s_valid].sum())
    p_labels = p_valid = None
    if cfg.is_pac:
        p_labels = np.where(live, chunk.phone_targets, -1)
        p_valid = p_labels >= 0
        loss -= (1.0 - alpha) * float(_picked(_log_softmax(zp), p_labels)[p_valid].sum())
    grads = None
    if need_grad:
        post_s = kernels.softmax_rows(zs)
        if cfg.is_pac:
            grads = model.backward_chunk(
                tape, post_s, s_labels, state_w * scale * s_valid,
                kernels.softmax_rows(zp), p_labels, (1.0 - alpha) * scale * p_valid)
        else:
            grads = model.backward_chunk(tape, post_s, s_labels, scale * s_valid)
    return ChunkResult(loss, frames, errors, grads, new_state)


train_chunk = chunk_objective


# ----------------------------------------------------------------------------
# optimiser and schedule
# ----------------------------------------------------------------------------

def zero_velocity(model):
    return model.zero_grads()


def sgd_update(model, grads, velocity, lr, momentum, clip=None):
    """In-place momentum step on every parameter of ``model``.

    ``clip`` (optional) bounds the global L2 norm of ``grads`` first.
    """
    factor = 1.0
    if clip is not None:
        norm = np.sqrt(sum(float((g * g).sum()) for lg in grads.values() for g in lg.values()))
        if norm > clip:
            factor = clip / norm
    for lname, layer in model.layers.items():
        params = layer.params()
        for pname, value in params.items():
            v = velocity[lname][pname]
            g = grads[lname][pname]
            v *= momentum
            v -= (lr * factor) * g
            value += v


@dataclass
class Schedule:
    """Learning-rate / momentum schedule driven by the dev criterion.

    Epoch 1 runs at ``base_lr`` without momentum; from epoch 2 the rate is
    ``ramp * base_lr`` with momentum ``main_momentum``; afterwards the rate
    is halved each time the dev loss fails to improve on the best so far by
    more than 1e-6.  Training stops when the rate drops below
    ``base_lr / 64`` or after ``max_epochs``.
    """

    base_lr: float = 0.1
    ramp: float = 10.0
    main_momentum: float = 0.9
    max_epochs: int = 30
    lr_floor_divisor: float = 64.0
    epoch: int = 1
    learning_rate: float = None
    momentum: float = 0.0
    phase: str = "warmup"
    dev_losses: list = field(default_factory=list)
    best: float = None
    done: bool = False

    def __post_init__(self):
        if self.learning_rate is None:
            self.learning_rate = self.base_lr
        if not self.learning_rate > 0:
            raise ParameterError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0 or not 0.0 <= self.main_momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")

    @classmethod
    def for_variant(cls, variant, **kwargs):
        """DNNs start at 0.1; recurrent models at a tenth of that."""
        base = 0.1 if variant == "dnn" else 0.01
        kwargs.setdefault("base_lr", base)
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)


def advance_schedule(schedule, dev_loss):
    """Record one end-of-epoch dev loss and move to the next epoch."""
    s = schedule
    s.dev_losses.append(float(dev_loss))
    if s.epoch == 1:
        s.learning_rate = s.base_lr * s.ramp
        s.momentum = s.main_momentum
        s.phase = "main"
    elif s.best is not None and dev_loss >= s.best - IMPROVEMENT_EPS:
        s.learning_rate /= 2.0
        s.phase = "halving"
    if s.best is None or dev_loss < s.best:
        s.best = float(dev_loss)
    s.epoch += 1
    if s.learning_rate < s.base_lr / s.lr_floor_divisor or s.epoch > s.max_epochs:
        s.done = True
    return s


# ----------------------------------------------------------------------------
# evaluation and training loop
# ----------------------------------------------------------------------------

def evaluate(model, corpus, alpha=None, plan=None):
    """(mean loss per scored frame, frame error rate) over ``corpus``.

    The loss is ``-J`` per frame, so lower is better.
    """
    if corpus.state_classes != model.config.state_classes:
        raise ConfigError(
            f"corpus has {corpus.state_classes} state classes, model "
            f"{model.config.state_classes}")
    if model.config.is_pac and corpus.phoneme_classes != model.config.phoneme_classes:
        raise ConfigError(
            f"corpus has {corpus.phoneme_classes} phoneme classes, model "
            f"{model.config.phoneme_classes}")
    plan = plan or BpttPlan()
    whole = BpttPlan(chunk_frames=max([u.frames for u in corpus.utterances] + [1]),
                     parallel_utterances=plan.parallel_utterances)
    loss = 0.0
    frames = errors = 0
    for chunk in make_batches(corpus, whole, rng=None, n=model.config.n):
        res = chunk_objective(model, chunk, None, alpha, need_grad=False)
        loss += res.loss
        frames += res.frames
        errors += res.errors
    if frames == 0:
        return 0.0, 0.0
    return loss / frames, errors / frames


@dataclass
class TrainRun:
    model: object
    schedule: Schedule
    records: list = field(default_factory=list)

    def dev_fers(self):
        return [r["dev_FER"] for r in self.records]

    def epochs_to(self, fer_threshold):
        """First epoch whose dev FER is at or below the threshold (None if never)."""
        for r in self.records:
            if r["dev_FER"] <= fer_threshold:
                return r["epoch"]
        return None


def run_epoch(model, corpus, schedule, plan, rng, velocity, alpha=None,
              normalization="frame", clip=None, on_update=None):
    """One pass over ``corpus``; returns (summed loss, scored frames)."""
    total = 0.0
    frames = 0
    state = None
    for chunk in make_batches(corpus, plan, rng, n=model.config.n):
        if chunk.first:
            state = None
        res = chunk_objective(model, chunk, state, alpha, normalization)
        state = res.state
        total += res.loss
        frames += res.frames
        if res.frames == 0:
            continue
        sgd_update(model, res.grads, velocity, schedule.learning_rate, schedule.momentum, clip)
        if on_update is not None:
            on_update(res, velocity)
    return total, frames


def train(model, train_corpus, dev_corpus, schedule=None, plan=None, seed=0, alpha=None,
          normalization="frame", clip=None, metrics_path=None, timing_path=None,
          labels=None, stop_fer=None, on_update=None):
    """Train until the schedule terminates.

    ``stop_fer`` ends training early once dev FER reaches that value.
    ``labels`` adds fixed fields (e.g. variant, corpus) to every record.
    """
    schedule = schedule or Schedule.for_variant(model.config.variant)
    plan = plan or BpttPlan()
    rng = Rng(seed).child("train")
    velocity = zero_velocity(model)
    run = TrainRun(model, schedule)
    labels = dict(labels or {})
    labels.setdefault("variant", model.config.variant)
    labels.setdefault("corpus", train_corpus.language)
    if metrics_path is not None:
        open(metrics_path, "w").close()
    if timing_path is not None:
        open(timing_path, "w").close()
    while not schedule.done:
        start = time.perf_counter()
        epoch, lr, momentum = schedule.epoch, schedule.learning_rate, schedule.momentum
        total, frames = run_epoch(model, train_corpus, schedule, plan,
                                  rng.child("epoch", epoch), velocity, alpha,
                                  normalization, clip, on_update)
        train_loss, _ = evaluate(model, train_corpus, alpha, plan)
        dev_loss, dev_fer = evaluate(model, dev_corpus, alpha, plan)
        record = {
            "epoch": epoch,
            "lr": lr,
            "momentum": momentum,
            "train_J": -train_loss,
            "train_J_running": -total / max(frames, 1),
            "dev_J": -dev_loss,
            "dev_FER": dev_fer,
            "train_frames": frames,
            **labels,
        }
        run.records.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if timing_path is not None:
            with open(timing_path, "a") as fh:
                fh.write(json.dumps({"epoch": epoch,
                                     "wall_time": time.perf_counter() - start}) + "\n")
        advance_schedule(schedule, dev_loss)
        if not np.isfinite(dev_loss):
            schedule.done = True
        if stop_fer is not None and dev_fer <= stop_fer:
            break
    return run


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
