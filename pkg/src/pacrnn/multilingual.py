"""Multilingual bottleneck networks, language identification and transfer.

Frame classifiers here are feed-forward stacks over context-stacked
frames: sigmoid hidden layers, an optional linear bottleneck, more sigmoid
layers, and one softmax head per language tag (``head.<tag>`` in
``layers``).  A minibatch mixing languages sends every frame through the
shared stack but only through the head of its own language, so head
gradients never see other languages' frames.

The transfer pipeline follows the usual low-resource recipe:

1. adapt the multilingual stage-1 network to the target language,
2. pick the source language closest to the target with a LID classifier,
3. train a hybrid model from scratch on the closest language's stage-1
   bottleneck features,
4. adapt that model to the target with fresh output layers.

Each step is recorded in a provenance dict (see ``PipelineResult``).
"""

import copy
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import (Corpus, FeatureRecipe, context_offsets, normalize, prepare_for_variant,
                   stack_context)
from .errors import ConfigError, DataError, DimensionError
from .layers import AffineLayer, SoftmaxHead
from .model import Model, PacRnnConfig, build_model
from .modelfile import model_hash
from .tensor import DTYPE, Rng
from .trainer import Schedule, TrainRun, advance_schedule, sgd_update, train

HEAD_PREFIX = "head."


# ----------------------------------------------------------------------------
# networks
# ----------------------------------------------------------------------------

@dataclass
class NetSpec:
    """Shape of a bottleneck frame classifier.

    ``bottleneck`` 0 drops the bottleneck layer (plain classifier).
    """

    hidden: tuple = (1024, 1024)
    bottleneck: int = 80
    post: tuple = (1024,)
    gain: float = 4.0
    half_window: int = 15
    step: int = 5

    def __post_init__(self):
        self.hidden = tuple(int(v) for v in self.hidden)
        self.post = tuple(int(v) for v in self.post)

    @property
    def taps(self):
        return 2 * (self.half_window // self.step) + 1


class FrameNet:
    """Shared trunk with per-language softmax heads.

    ``trunk`` lists trunk layer names in order; ``bottleneck`` names the
    linear bottleneck layer (or None).  ``context`` is the
    (half_window, step) used to stack raw frames into the input.
    """

    def __init__(self, layers, trunk, bottleneck=None, context=(15, 5)):
        self.layers = dict(layers)
        self.trunk = list(trunk)
        self.bottleneck = bottleneck
        self.context = tuple(context)
        tags = self.tags
        if len(set(tags)) != len(tags):
            raise ConfigError(f"duplicate head tags {tags}")
        top = self.top_width
        for tag in tags:
            if self.head(tag).n_in != top:
                raise DimensionError(
                    f"head {tag} expects width {self.head(tag).n_in}, trunk gives {top}")

    @classmethod
    def build(cls, rng, n_in, spec, heads):
        """Fresh network; ``heads`` maps tag -> class count."""
        layers = {}
        trunk = []
        width = n_in
        for k, units in enumerate(spec.hidden):
            name = f"hidden{k}"
            layers[name] = AffineLayer.init(rng.child(name), width, units, gain=spec.gain)
            trunk.append(name)
            width = units
        bottleneck = None
        if spec.bottleneck:
            bottleneck = "bottleneck"
            layers[bottleneck] = AffineLayer.init(rng.child(bottleneck), width, spec.bottleneck,
                                                  activation="linear")
            trunk.append(bottleneck)
            width = spec.bottleneck
            for k, units in enumerate(spec.post):
                name = f"post{k}"
                layers[name] = AffineLayer.init(rng.child(name), width, units, gain=spec.gain)
                trunk.append(name)
                width = units
        for tag in sorted(heads):
            layers[HEAD_PREFIX + tag] = SoftmaxHead.init(rng.child("head", tag), width,
                                                         heads[tag])
        return cls(layers, trunk, bottleneck, (spec.half_window, spec.step))

    # -- structure ----------------------------------------------------------

    @property
    def tags(self):
        return [n[len(HEAD_PREFIX):] for n in self.layers if n.startswith(HEAD_PREFIX)]

    def head(self, tag):
        try:
            return self.layers[HEAD_PREFIX + tag]
        except KeyError:
            raise ConfigError(f"no head for language {tag!r}; heads: {self.tags}") from None

    @property
    def n_in(self):
        return self.layers[self.trunk[0]].n_in

    @property
    def top_width(self):
        return self.layers[self.trunk[-1]].n_out

    @property
    def bn_width(self):
        if self.bottleneck is None:
            raise ConfigError("network has no bottleneck layer")
        return self.layers[self.bottleneck].n_out

    def layout(self):
        return {"trunk": self.trunk, "bottleneck": self.bottleneck,
                "context": list(self.context)}

    @classmethod
    def from_layout(cls, layout, layers):
        if "languages" in layout:
            return LidModel(layers, layout["trunk"], layout["languages"],
                            tuple(layout["context"]))
        return cls(layers, layout["trunk"], layout["bottleneck"], tuple(layout["context"]))

    def zero_grads(self):
        return {lname: {p: np.zeros_like(v) for p, v in layer.params().items()}
                for lname, layer in self.layers.items()}

    def with_heads(self, heads):
        """Copy of the trunk with ``heads`` (tag -> SoftmaxHead) attached."""
        layers = {n: copy.deepcopy(l) for n, l in self.layers.items()
                  if not n.startswith(HEAD_PREFIX)}
        for tag in sorted(heads):
            layers[HEAD_PREFIX + tag] = heads[tag]
        return FrameNet(layers, self.trunk, self.bottleneck, self.context)

    # -- forward / backward -------------------------------------------------

    def input_frames(self, utterance_or_features):
        """Network input for an utterance (raw frames are context-stacked)."""
        feats = getattr(utterance_or_features, "features", utterance_or_features)
        feats = np.asarray(feats, dtype=DTYPE)
        if feats.ndim != 2:
            raise DimensionError(f"expected (T, D) features, got shape {feats.shape}")
        if feats.shape[1] == self.n_in:
            return feats
        stacked = stack_context(feats, *self.context)
        if stacked.shape[1] != self.n_in:
            raise DimensionError(
                f"features of width {feats.shape[1]} do not fit input width {self.n_in}")
        return stacked

    def trunk_forward(self, x, upto=None):
        caches = []
        h = x
        for name in self.trunk:
            h, cache = self.layers[name].forward_cached(h)
            caches.append(cache)
            if name == upto:
                break
        return h, caches

    def trunk_backward(self, caches, dh, grads):
        for name, cache in zip(reversed(self.trunk[:len(caches)]), reversed(caches)):
            _, dh = self.layers[name].backward(cache, dh, into=grads[name])
        return dh

    def posterior(self, x, tag):
        h, _ = self.trunk_forward(np.asarray(x, dtype=DTYPE))
        return self.head(tag).posterior(h)


MultiHeadNet = FrameNet


class LidModel(FrameNet):
    """Frame-level language classifier; one head over ``languages``."""

    TAG = "lid"

    def __init__(self, layers, trunk, languages, context=(15, 5)):
        super().__init__(layers, trunk, None, context)
        self.languages = list(languages)
        if self.head(self.TAG).classes != len(self.languages):
            raise ConfigError("LID head size does not match the language list")

    @classmethod
    def build(cls, rng, n_in, languages, hidden=64, gain=4.0, context=(15, 5)):
        languages = sorted(languages)
        if len(set(languages)) != len(languages):
            raise ConfigError(f"duplicate language tags {languages}")
        if len(languages) < 2:
            raise ConfigError("LID needs at least two languages")
        layers = {"hidden0": AffineLayer.init(rng.child("hidden0"), n_in, hidden, gain=gain),
                  HEAD_PREFIX + cls.TAG: SoftmaxHead.init(rng.child("head"), hidden,
                                                          len(languages))}
        return cls(layers, ["hidden0"], languages, context)

    def layout(self):
        out = super().layout()
        out["languages"] = self.languages
        return out

    def language_posterior(self, utterance_or_features):
        return self.posterior(self.input_frames(utterance_or_features), self.TAG)


# ----------------------------------------------------------------------------
# frame training
# ----------------------------------------------------------------------------

@dataclass
class FrameSet:
    """Frames of one language: network inputs and their class labels."""

    tag: str
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(f"frame set {self.tag}: {self.features.shape[0]} frames, "
                            f"{self.labels.shape[0]} labels")


def frame_set(corpus, context=(15, 5), tag=None, labels=None):
    """Context-stacked frames of ``corpus`` with state labels (or a constant
    ``labels`` value for every frame, as LID uses)."""
    utts = [u for u in corpus.utterances if u.frames]
    if not utts:
        raise DataError(f"corpus {corpus.language} has no frames")
    feats = np.concatenate([stack_context(u.features, *context) for u in utts])
    if labels is None:
        lab = np.concatenate([u.state_labels for u in utts])
    else:
        lab = np.full(feats.shape[0], int(labels), dtype=np.int64)
    return FrameSet(tag or corpus.language, feats, lab)


def _check_tags(sets):
    tags = [s.tag for s in sets]
    if len(set(tags)) != len(tags):
        raise ConfigError(f"duplicate language tags {tags}")
    return tags


def frame_minibatch_grads(net, batch, grads=None, scale=None):
    """Loss and gradients for a list of (tag, x, labels) parts.

    Parts share one trunk pass; each part's rows go only through its head.
    Gradients are of the summed loss times ``scale`` (default: 1 / frames).
    Returns (summed loss, frames, errors, grads).
    """
    grads = grads if grads is not None else net.zero_grads()
    x = np.concatenate([p[1] for p in batch])
    frames = x.shape[0]
    scale = 1.0 / frames if scale is None else scale
    h, caches = net.trunk_forward(x)
    dh = np.zeros_like(h)
    loss = 0.0
    errors = 0
    start = 0
    for tag, xp, labels in batch:
        stop = start + xp.shape[0]
        head = net.head(tag)
        part_loss, post, cache = head.forward_cached(h[start:stop], labels)
        loss += part_loss
        errors += int((np.argmax(post, axis=1) != labels).sum())
        _, dh[start:stop] = head.backward(cache, scale, into=grads[HEAD_PREFIX + tag])
        start = stop
    net.trunk_backward(caches, dh, grads)
    return loss, frames, errors, grads


def evaluate_frames(net, sets, chunk=4096):
    """(mean cross-entropy per frame, frame error rate) pooled over ``sets``."""
    loss = 0.0
    frames = errors = 0
    for s in sets:
        head = net.head(s.tag)
        for start in range(0, s.features.shape[0], chunk):
            x = s.features[start:start + chunk]
            y = s.labels[start:start + chunk]
            h, _ = net.trunk_forward(x)
            part, post, _ = head.forward_cached(h, y)
            loss += part
            errors += int((np.argmax(post, axis=1) != y).sum())
            frames += x.shape[0]
    if frames == 0:
        return 0.0, 0.0
    return loss / frames, errors / frames


def _minibatches(sets, batch_frames, rng):
    """Shuffle all frames of all sets and cut them into minibatches.

    Each minibatch is a list of (tag, x, labels) parts in ``sets`` order.
    """
    owner = np.concatenate([np.full(s.features.shape[0], k) for k, s in enumerate(sets)])
    row = np.concatenate([np.arange(s.features.shape[0]) for s in sets])
    order = rng.permutation(owner.size)
    for start in range(0, order.size, batch_frames):
        pick = order[start:start + batch_frames]
        parts = []
        for k, s in enumerate(sets):
            rows = np.sort(row[pick[owner[pick] == k]])
            if rows.size:
                parts.append((s.tag, s.features[rows], s.labels[rows]))
        yield parts


def train_frame_classifier(net, train_sets, dev_sets, schedule=None, batch_frames=400,
                           seed=0, clip=None, stop_fer=None, metrics_path=None, labels=None):
    """Minibatch SGD over pooled frames with the dev-driven schedule."""
    _check_tags(train_sets)
    for s in list(train_sets) + list(dev_sets):
        net.head(s.tag)
    schedule = schedule or Schedule.for_variant("dnn")
    rng = Rng(seed).child("frame-train")
    velocity = net.zero_grads()
    run = TrainRun(net, schedule)
    extra = dict(labels or {})
    if metrics_path is not None:
        open(metrics_path, "w").close()
    while not schedule.done and schedule.max_epochs >= schedule.epoch:
        epoch, lr, momentum = schedule.epoch, schedule.learning_rate, schedule.momentum
        total = 0.0
        frames = 0
        for batch in _minibatches(train_sets, batch_frames, rng.child("epoch", epoch)):
            loss, n, _, grads = frame_minibatch_grads(net, batch)
            total += loss
            frames += n
            sgd_update(net, grads, velocity, lr, momentum, clip)
        train_loss, _ = evaluate_frames(net, train_sets)
        dev_loss, dev_fer = evaluate_frames(net, dev_sets)
        record = {"epoch": epoch, "lr": lr, "momentum": momentum,
                  "train_J": -train_loss, "train_J_running": -total / max(frames, 1),
                  "dev_J": -dev_loss,
                  "dev_FER": dev_fer, "train_frames": frames, **extra}
        run.records.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        advance_schedule(schedule, dev_loss)
        if not np.isfinite(dev_loss):
            schedule.done = True
        if stop_fer is not None and dev_fer <= stop_fer:
            break
    return run


def train_multilingual(train_corpora, dev_corpora, spec=None, schedule=None, seed=0,
                       batch_frames=400, clip=None):
    """Pooled multilingual training with one softmax head per language.

    Returns (net, run).  A single corpus gives ordinary single-head training.
    """
    spec = spec or NetSpec()
    if not train_corpora:
        raise ConfigError("train_multilingual needs at least one corpus")
    ctx = (spec.half_window, spec.step)
    train_sets = [frame_set(c, ctx) for c in train_corpora]
    _check_tags(train_sets)
    dev_sets = [frame_set(c, ctx) for c in dev_corpora]
    dims = {c.feature_dim for c in train_corpora}
    if len(dims) != 1:
        raise DimensionError(f"corpora disagree on feature width: {sorted(dims)}")
    n_in = dims.pop() * spec.taps
    heads = {c.language: c.state_classes for c in train_corpora}
    net = FrameNet.build(Rng(seed).child("multilingual"), n_in, spec, heads)
    run = train_frame_classifier(net, train_sets, dev_sets, schedule, batch_frames, seed, clip)
    return net, run


# ----------------------------------------------------------------------------
# bottleneck features and the stacked-bottleneck cascade
# ----------------------------------------------------------------------------

def extract_bn(net, utterance):
    """Linear bottleneck activations, one row per frame."""
    if net.bottleneck is None:
        raise ConfigError("network has no bottleneck layer")
    h, _ = net.trunk_forward(net.input_frames(utterance), upto=net.bottleneck)
    return h


def bn_corpus(net, corpus, stats=None):
    """Corpus of bottleneck features, mean/variance normalised.

    The normalisation stands in for per-speaker feature adaptation; with
    ``stats`` None the corpus' own statistics are used.  Returns
    (corpus, stats).
    """
    utts = [replace(u, features=extract_bn(net, u)) for u in corpus.utterances if u.frames]
    return normalize(corpus.with_utterances(utts), stats)


@dataclass
class SbnPipeline:
    """Two cascaded bottleneck networks; stage 2 reads stacked stage-1 BN."""

    stage1: FrameNet
    stage2: FrameNet
    stats1: object = None
    stats2: object = None

    def __post_init__(self):
        taps = 2 * (self.stage2.context[0] // self.stage2.context[1]) + 1
        if self.stage2.n_in != self.stage1.bn_width * taps:
            raise DimensionError(
                f"stage 2 input width {self.stage2.n_in} != stage-1 bottleneck "
                f"{self.stage1.bn_width} x {taps} taps")

    def features(self, corpus):
        """Stage-2 bottleneck features of a raw corpus."""
        bn1, _ = bn_corpus(self.stage1, corpus, self.stats1)
        bn2, _ = bn_corpus(self.stage2, bn1, self.stats2)
        return bn2


def train_sbn(train_corpora, dev_corpora, spec1=None, spec2=None, schedule=None, seed=0,
              clip=None):
    """Multilingual stage 1, then multilingual stage 2 on stage-1 BN features."""
    stage1, run1 = train_multilingual(train_corpora, dev_corpora, spec1, schedule, seed,
                                      clip=clip)
    bn_train, bn_dev, _ = _bn_pairs(stage1, train_corpora, dev_corpora)
    schedule2 = copy.deepcopy(schedule) if schedule is not None else None
    stage2, run2 = train_multilingual(bn_train, bn_dev, spec2, schedule2, seed + 1, clip=clip)
    sbn = SbnPipeline(stage1, stage2, None, None)
    return sbn, (run1, run2)


def _bn_pairs(net, train_corpora, dev_corpora):
    """BN features per language; dev sets use their train set's statistics."""
    bn_train, bn_dev, stats = [], [], {}
    dev_by_tag = {c.language: c for c in dev_corpora}
    for c in train_corpora:
        tr, st = bn_corpus(net, c)
        bn_train.append(tr)
        stats[c.language] = st
        if c.language in dev_by_tag:
            bn_dev.append(bn_corpus(net, dev_by_tag[c.language], st)[0])
    return bn_train, bn_dev, stats


# ----------------------------------------------------------------------------
# language identification
# ----------------------------------------------------------------------------

def train_lid(train_corpora, dev_corpora, hidden=64, schedule=None, seed=0, context=(15, 5),
              clip=None, batch_frames=400):
    """Frame-level LID over the source languages.  Returns (lid, run)."""
    langs = sorted(c.language for c in train_corpora)
    if len(set(langs)) != len(langs):
        raise ConfigError(f"duplicate language tags {langs}")
    index = {tag: k for k, tag in enumerate(langs)}

    def pooled(corpora):
        parts = [frame_set(c, context, labels=index[c.language]) for c in corpora]
        return [FrameSet(LidModel.TAG, np.concatenate([p.features for p in parts]),
                         np.concatenate([p.labels for p in parts]))]

    train_sets = pooled(train_corpora)
    dev_sets = pooled(dev_corpora) if dev_corpora else train_sets
    lid = LidModel.build(Rng(seed).child("lid"), train_sets[0].features.shape[1], langs,
                         hidden, context=context)
    run = train_frame_classifier(lid, train_sets, dev_sets, schedule, batch_frames, seed, clip)
    return lid, run


def language_scores(lid, corpus):
    """Mean frame posterior over languages across the whole corpus.

    Utterances are visited in id order so the result does not depend on the
    order they are stored in.
    """
    utts = sorted((u for u in corpus.utterances if u.frames), key=lambda u: u.id)
    if not utts:
        raise DataError(f"corpus {corpus.language!r} has no frames to identify")
    total = np.zeros(len(lid.languages))
    frames = 0
    for u in utts:
        post = lid.language_posterior(u)
        total += post.sum(axis=0)
        frames += post.shape[0]
    mean = total / frames
    return {tag: float(mean[k]) for k, tag in enumerate(lid.languages)}


def select_closest_language(lid, corpus):
    """(closest tag, scores).  Ties go to the lexicographically first tag."""
    scores = language_scores(lid, corpus)
    best = max(scores.values())
    tag = min(t for t, v in scores.items() if v == best)
    return tag, scores


# ----------------------------------------------------------------------------
# adaptation
# ----------------------------------------------------------------------------

ADAPT_MODES = ("keep_head", "replace_head")


def _replace_model_heads(model, corpus, rng):
    cfg = replace(model.config, state_classes=corpus.state_classes)
    if cfg.is_pac:
        cfg = replace(cfg, phoneme_classes=corpus.phoneme_classes)
    layers = {}
    for name, layer in model.layers.items():
        if name == "state_head":
            layer = SoftmaxHead.init(rng.child("state_head"), layer.n_in, cfg.state_classes)
        elif name == "phone_head":
            layer = SoftmaxHead.init(rng.child("phone_head"), layer.n_in, cfg.phoneme_classes)
        else:
            layer = copy.deepcopy(layer)
        layers[name] = layer
    return Model(cfg, layers)


def adapt_network(net, train_corpus, dev_corpus, mode="replace_head", schedule=None, seed=0,
                  clip=None, stop_fer=None, metrics_path=None, timing_path=None):
    """Fine-tune a copy of ``net`` on the target language.

    ``replace_head`` drops every output layer and attaches fresh ones sized
    for the target (the state head, plus the phoneme head for PAC models);
    ``keep_head`` trains the existing output layer, whose class count must
    match.  Hidden layers always start from ``net``.  A schedule with
    ``max_epochs`` 0 returns the re-headed copy untrained.  Returns
    (net', run).
    """
    if mode not in ADAPT_MODES:
        raise ConfigError(f"adapt mode must be one of {ADAPT_MODES}, got {mode!r}")
    rng = Rng(seed).child("adapt", train_corpus.language)
    if isinstance(net, Model):
        cfg = net.config
        if mode == "keep_head":
            if cfg.state_classes != train_corpus.state_classes:
                raise ConfigError(f"keep_head: model has {cfg.state_classes} state classes, "
                                  f"target {train_corpus.state_classes}")
            if cfg.is_pac and cfg.phoneme_classes != train_corpus.phoneme_classes:
                raise ConfigError(f"keep_head: model has {cfg.phoneme_classes} phoneme "
                                  f"classes, target {train_corpus.phoneme_classes}")
            adapted = copy.deepcopy(net)
        else:
            adapted = _replace_model_heads(net, train_corpus, rng)
        if train_corpus.feature_dim != cfg.feature_dim:
            raise DimensionError(f"target features have width {train_corpus.feature_dim}, "
                                 f"model expects {cfg.feature_dim}")
        schedule = schedule or Schedule.for_variant(cfg.variant)
        if schedule.max_epochs < 1:
            return adapted, TrainRun(adapted, schedule)
        run = train(adapted, train_corpus, dev_corpus, schedule, seed=seed, clip=clip,
                    stop_fer=stop_fer, metrics_path=metrics_path, timing_path=timing_path)
        return adapted, run

    tag = train_corpus.language
    if mode == "keep_head":
        if tag in net.tags:
            head_tag = tag
        elif len(net.tags) == 1:
            head_tag = net.tags[0]
        else:
            raise ConfigError(f"keep_head: no head for {tag!r} among {net.tags}")
        if net.head(head_tag).classes != train_corpus.state_classes:
            raise ConfigError(f"keep_head: head has {net.head(head_tag).classes} classes, "
                              f"target {train_corpus.state_classes}")
        adapted = net.with_heads({head_tag: copy.deepcopy(net.head(head_tag))})
    else:
        head_tag = tag
        adapted = net.with_heads({tag: SoftmaxHead.init(rng.child("head"), net.top_width,
                                                        train_corpus.state_classes)})
    schedule = schedule or Schedule.for_variant("dnn")
    if schedule.max_epochs < 1:
        return adapted, TrainRun(adapted, schedule)
    train_sets = [replace(frame_set(train_corpus, net.context), tag=head_tag)]
    dev_sets = [replace(frame_set(dev_corpus, net.context), tag=head_tag)]
    run = train_frame_classifier(adapted, train_sets, dev_sets, schedule, seed=seed, clip=clip,
                                 stop_fer=stop_fer, metrics_path=metrics_path)
    return adapted, run


def adapt_sbn(sbn, train_corpus, dev_corpus, schedule=None, seed=0, clip=None, joint=False):
    """Adapt both stages to the target.  Returns (pipeline, runs).

    By default the stages are fine-tuned one after the other: stage 1
    first, then stage 2 on the adapted stage-1 features, each with a fresh
    target head (runs = (run1, run2)).  ``joint`` instead fine-tunes both
    stages as one network through the stage-2 head, with the stage-1
    normalisation frozen at its pre-adaptation statistics (runs = (run,)).
    """
    if joint:
        return _adapt_sbn_joint(sbn, train_corpus, dev_corpus, schedule, seed, clip)
    stage1, run1 = adapt_network(sbn.stage1, train_corpus, dev_corpus, "replace_head",
                                 copy.deepcopy(schedule), seed, clip)
    bn_tr, st = bn_corpus(stage1, train_corpus)
    bn_dv, _ = bn_corpus(stage1, dev_corpus, st)
    stage2, run2 = adapt_network(sbn.stage2, bn_tr, bn_dv, "replace_head",
                                 copy.deepcopy(schedule), seed + 1, clip)
    _, st2 = bn_corpus(stage2, bn_tr)
    return SbnPipeline(stage1, stage2, st, st2), (run1, run2)


class JointSbn:
    """Both SBN stages as one parameter set: stage-1 trunk up to the
    bottleneck, frozen normalisation, context stacking, stage-2 trunk and
    one stage-2 head.  Layer names are prefixed ``stage1/`` and ``stage2/``.
    """

    def __init__(self, stage1, stage2, tag, stats1):
        self.stage1, self.stage2, self.tag, self.stats1 = stage1, stage2, tag, stats1
        self.upto = stage1.trunk.index(stage1.bottleneck) + 1
        self.layers = {f"stage1/{n}": stage1.layers[n] for n in stage1.trunk[:self.upto]}
        self.layers.update({f"stage2/{n}": stage2.layers[n] for n in stage2.trunk})
        self.layers[f"stage2/{HEAD_PREFIX}{tag}"] = stage2.head(tag)

    def zero_grads(self):
        return {lname: {p: np.zeros_like(v) for p, v in layer.params().items()}
                for lname, layer in self.layers.items()}

    def minibatch(self, utts, grads=None, scale=None, need_grad=True):
        """(summed loss, frames, errors, grads) over whole utterances.

        Gradients are of the summed loss times ``scale`` (default 1 / frames).
        """
        s1, s2 = self.stage1, self.stage2
        utts = [u for u in utts if u.frames]
        bounds = np.cumsum([0] + [u.frames for u in utts])
        spans = list(zip(bounds[:-1], bounds[1:]))
        x1 = np.concatenate([s1.input_frames(u) for u in utts])
        h1, c1 = s1.trunk_forward(x1, upto=s1.bottleneck)
        z = (h1 - self.stats1.mean) / self.stats1.std
        x2 = np.concatenate([stack_context(z[a:b], *s2.context) for a, b in spans])
        h2, c2 = s2.trunk_forward(x2)
        labels = np.concatenate([u.state_labels for u in utts])
        head = s2.head(self.tag)
        loss, post, cache = head.forward_cached(h2, labels)
        frames = int(bounds[-1])
        errors = int((np.argmax(post, axis=1) != labels).sum())
        if not need_grad:
            return loss, frames, errors, None
        grads = grads if grads is not None else self.zero_grads()
        scale = 1.0 / frames if scale is None else scale
        _, dh2 = head.backward(cache, scale, into=grads[f"stage2/{HEAD_PREFIX}{self.tag}"])
        dx2 = s2.trunk_backward(c2, dh2, {n: grads[f"stage2/{n}"] for n in s2.trunk})
        # undo the context stacking: each tap adds its slice back onto its source frame
        dz = np.zeros_like(z)
        offsets = context_offsets(*s2.context)
        width = z.shape[1]
        for a, b in spans:
            steps = np.arange(b - a)
            for j, off in enumerate(offsets):
                np.add.at(dz[a:b], np.clip(steps + off, 0, b - a - 1),
                          dx2[a:b, j * width:(j + 1) * width])
        s1.trunk_backward(c1, dz / self.stats1.std,
                          {n: grads[f"stage1/{n}"] for n in s1.trunk[:self.upto]})
        return loss, frames, errors, grads

    def evaluate(self, utts, batch=16):
        loss = 0.0
        frames = errors = 0
        for k in range(0, len(utts), batch):
            part_loss, n, e, _ = self.minibatch(utts[k:k + batch], need_grad=False)
            loss += part_loss
            frames += n
            errors += e
        if frames == 0:
            return 0.0, 0.0
        return loss / frames, errors / frames


def _utterance_batches(utts, batch_frames, rng):
    order = rng.permutation(len(utts))
    batch, frames = [], 0
    for k in order:
        batch.append(utts[int(k)])
        frames += utts[int(k)].frames
        if frames >= batch_frames:
            yield batch
            batch, frames = [], 0
    if batch:
        yield batch


def _adapt_sbn_joint(sbn, train_corpus, dev_corpus, schedule, seed, clip, batch_frames=400):
    tag = train_corpus.language
    rng = Rng(seed).child("adapt-joint", tag)
    stage1 = sbn.stage1.with_heads({})
    stage2 = sbn.stage2.with_heads({tag: SoftmaxHead.init(rng.child("head"), sbn.stage2.top_width,
                                                          train_corpus.state_classes)})
    _, stats1 = bn_corpus(stage1, train_corpus)
    joint = JointSbn(stage1, stage2, tag, stats1)
    schedule = copy.deepcopy(schedule) if schedule is not None else Schedule.for_variant("dnn")
    train_utts = [u for u in train_corpus.utterances if u.frames]
    dev_utts = [u for u in dev_corpus.utterances if u.frames]
    velocity = joint.zero_grads()
    run = TrainRun(joint, schedule)
    while not schedule.done and schedule.max_epochs >= schedule.epoch:
        epoch, lr, momentum = schedule.epoch, schedule.learning_rate, schedule.momentum
        total = 0.0
        frames = 0
        for batch in _utterance_batches(train_utts, batch_frames, rng.child("epoch", epoch)):
            loss, n, _, grads = joint.minibatch(batch)
            total += loss
            frames += n
            sgd_update(joint, grads, velocity, lr, momentum, clip)
        train_loss, _ = joint.evaluate(train_utts)
        dev_loss, dev_fer = joint.evaluate(dev_utts)
        run.records.append({"epoch": epoch, "lr": lr, "momentum": momentum,
                            "train_J": -train_loss, "train_J_running": -total / max(frames, 1),
                            "dev_J": -dev_loss, "dev_FER": dev_fer, "train_frames": frames,
                            "mode": "joint"})
        advance_schedule(schedule, dev_loss)
        if not np.isfinite(dev_loss):
            schedule.done = True
    bn1, _ = bn_corpus(stage1, train_corpus, stats1)
    _, stats2 = bn_corpus(stage2, bn1)
    return SbnPipeline(stage1, stage2, stats1, stats2), (run,)


# ----------------------------------------------------------------------------
# closest-language transfer
# ----------------------------------------------------------------------------

@dataclass
class TransferSettings:
    """Knobs of the closest-language pipeline.

    ``model`` holds PacRnnConfig fields other than variant and the class /
    feature sizes, which come from the data.
    """

    variant: str = "dnn"
    model: dict = field(default_factory=dict)
    stage1: NetSpec = field(default_factory=NetSpec)
    lid_hidden: int = 64
    stage1_epochs: int = 10
    stage1_adapt_epochs: int = 3
    lid_epochs: int = 5
    closest_epochs: int = 15
    adapt_epochs: int = 15
    fer_threshold: float = 0.5
    clip: float = 0.3
    seed: int = 0
    recipe: FeatureRecipe = field(default_factory=FeatureRecipe)

    def schedule(self, epochs, variant=None):
        return Schedule.for_variant(variant or self.variant, max_epochs=epochs)


@dataclass
class PipelineResult:
    model: Model
    stage1: FrameNet
    closest: str
    scores: dict
    provenance: dict
    closest_run: TrainRun = None
    adapt_run: TrainRun = None
    target_train: Corpus = None
    target_dev: Corpus = None

    def write_provenance(self, path):
        with open(path, "w") as fh:
            json.dump(self.provenance, fh, indent=2, sort_keys=True)
            fh.write("\n")


def hybrid_inputs(stage1, train_corpus, dev_corpus, variant, recipe=None):
    """Stage-1 BN features of one language in the input view of ``variant``."""
    tr, st = bn_corpus(stage1, train_corpus)
    dv, _ = bn_corpus(stage1, dev_corpus, st)
    return prepare_for_variant(tr, variant, recipe), prepare_for_variant(dv, variant, recipe)


def new_hybrid(settings, corpus, seed_key):
    cfg = PacRnnConfig(variant=settings.variant, feature_dim=corpus.feature_dim,
                       state_classes=corpus.state_classes,
                       phoneme_classes=corpus.phoneme_classes, **settings.model)
    return build_model(cfg, Rng(settings.seed).child("hybrid", seed_key))


def train_random_init(stage1, target_train, target_dev, settings, stop_fer=None):
    """Baseline: a hybrid trained from scratch on the target's stage-1 features."""
    tr, dv = hybrid_inputs(stage1, target_train, target_dev, settings.variant, settings.recipe)
    model = new_hybrid(settings, tr, "random")
    run = train(model, tr, dv, settings.schedule(settings.adapt_epochs), seed=settings.seed,
                clip=settings.clip, stop_fer=stop_fer)
    return model, run


def closest_language_pipeline(sources, target, settings=None, stage1=None, stop_fer=None):
    """Closest-language transfer to ``target``.

    ``sources`` maps tag -> (train, dev) corpora, ``target`` is (train, dev).
    ``stage1`` is a trained multilingual bottleneck network; one is trained
    on the sources when omitted.
    """
    settings = settings or TransferSettings()
    seed = settings.seed
    tgt_train, tgt_dev = target
    tags = sorted(sources)
    if not tags:
        raise ConfigError("closest_language_pipeline needs at least one source language")
    steps = []
    if stage1 is None:
        stage1, _ = train_multilingual([sources[t][0] for t in tags],
                                       [sources[t][1] for t in tags], settings.stage1,
                                       settings.schedule(settings.stage1_epochs, "dnn"),
                                       seed, clip=settings.clip)
    donor = model_hash(stage1)

    # 1. adapt the multilingual stage 1 to the target
    sched = settings.schedule(settings.stage1_adapt_epochs, "dnn")
    sched_desc = sched.to_dict()
    stage1_t, run1 = adapt_network(stage1, tgt_train, tgt_dev, "replace_head", sched, seed,
                                   settings.clip)
    steps.append({"step": "adapt_stage1", "mode": "replace_head", "schedule": sched_desc,
                  "epochs": len(run1.records), "result_hash": model_hash(stage1_t)})

    # 2. closest source language by LID
    if len(tags) == 1:
        closest, scores = tags[0], {tags[0]: 1.0}
    else:
        lid, _ = train_lid([sources[t][0] for t in tags], [sources[t][1] for t in tags],
                           settings.lid_hidden,
                           settings.schedule(settings.lid_epochs, "dnn"), seed,
                           stage1.context, settings.clip)
        closest, scores = select_closest_language(lid, tgt_train)
    steps.append({"step": "select_closest", "language": closest, "scores": scores})

    # 3. hybrid from random init on the closest language's BN features
    c_train, c_dev = hybrid_inputs(stage1_t, *sources[closest], settings.variant,
                                   settings.recipe)
    model = new_hybrid(settings, c_train, closest)
    sched = settings.schedule(settings.closest_epochs)
    sched_desc = sched.to_dict()
    closest_run = train(model, c_train, c_dev, sched, seed=seed, clip=settings.clip)
    steps.append({"step": "train_closest", "language": closest, "variant": settings.variant,
                  "schedule": sched_desc, "epochs": len(closest_run.records),
                  "result_hash": model_hash(model)})

    # 4. final adaptation to the target
    t_train, t_dev = hybrid_inputs(stage1_t, tgt_train, tgt_dev, settings.variant,
                                   settings.recipe)
    same = (closest == tgt_train.language
            and model.config.state_classes == t_train.state_classes
            and model.config.phoneme_classes == t_train.phoneme_classes)
    mode = "keep_head" if same else "replace_head"
    sched = settings.schedule(settings.adapt_epochs)
    sched_desc = sched.to_dict()
    adapted, adapt_run = adapt_network(model, t_train, t_dev, mode, sched, seed, settings.clip,
                                       stop_fer)
    steps.append({"step": "adapt_target", "mode": mode, "schedule": sched_desc,
                  "epochs": len(adapt_run.records), "result_hash": model_hash(adapted)})

    provenance = {"donor_hash": donor, "seed": seed, "target": tgt_train.language,
                  "sources": tags, "settings": _settings_dict(settings), "steps": steps}
    return PipelineResult(adapted, stage1_t, closest, scores, provenance, closest_run,
                          adapt_run, t_train, t_dev)


def _settings_dict(settings):
    out = asdict(settings)
    out["stage1"]["hidden"] = list(settings.stage1.hidden)
    out["stage1"]["post"] = list(settings.stage1.post)
    return out


__all__ = [
    "NetSpec", "FrameNet", "MultiHeadNet", "LidModel", "FrameSet", "frame_set",
    "frame_minibatch_grads", "evaluate_frames", "train_frame_classifier", "train_multilingual",
    "extract_bn", "bn_corpus", "SbnPipeline", "JointSbn", "train_sbn", "adapt_sbn", "train_lid",
    "language_scores", "select_closest_language", "adapt_network", "TransferSettings",
    "PipelineResult", "hybrid_inputs", "train_random_init", "closest_language_pipeline",
]
