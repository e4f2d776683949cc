"""Synthetic phoneme-HMM corpora, the feature pipeline and the corpus file.

A toy language is a phoneme bigram chain in which every phoneme emits
``states_per_phoneme`` left-to-right states, each with a geometric dwell
time and a diagonal Gaussian emission.  State ``k`` of phoneme ``p`` has
label ``p * states_per_phoneme + k``.

Corpus file layout (all integers little-endian)::

    magic         8 bytes  b"PACRNNC\\x01"
    manifest_len  uint64
    manifest      manifest_len bytes of UTF-8 text, one tab-separated
                  record per line:
                      language <tag>
                      state_classes <S>
                      phoneme_classes <P>
                      silence <index>
                      phonemes <name> <name> ...
                      states <name> <name> ...
                      utterances <N>
                      utt <id> <language> <T> <D>      (N lines, payload order)
    payload       per utterance, in manifest order:
                      b"UTTR", uint32 T, uint32 D,
                      T*D float64 features (row-major),
                      T int32 state labels, T int32 phoneme labels

Negative labels mark frames excluded from the loss (see ``delay_labels``).
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import DataError, FormatError, SpecError
from .tensor import DTYPE, Rng

MAGIC = b"PACRNNC\x01"
UTT_MAGIC = b"UTTR"
SKIP = -1


@dataclass
class Utterance:
    id: str
    language: str
    features: np.ndarray
    state_labels: np.ndarray
    phoneme_labels: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=DTYPE)
        if self.features.ndim == 1 and self.features.size == 0:
            self.features = self.features.reshape(0, 0)
        self.state_labels = np.asarray(self.state_labels, dtype=np.int64)
        self.phoneme_labels = np.asarray(self.phoneme_labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"utterance {self.id}: features must be (T, D)")
        n = self.features.shape[0]
        if self.state_labels.shape != (n,) or self.phoneme_labels.shape != (n,):
            raise DataError(
                f"utterance {self.id}: {n} frames but {self.state_labels.shape[0]} state "
                f"and {self.phoneme_labels.shape[0]} phoneme labels")

    @property
    def frames(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass
class Corpus:
    utterances: list
    language: str
    phonemes: list
    states: list
    silence: int = 0

    @property
    def state_classes(self):
        return len(self.states)

    @property
    def phoneme_classes(self):
        return len(self.phonemes)

    @property
    def feature_dim(self):
        return self.utterances[0].dim if self.utterances else 0

    @property
    def frames(self):
        return sum(u.frames for u in self.utterances)

    def validate(self):
        dims = {u.dim for u in self.utterances if u.frames}
        if len(dims) > 1:
            raise DataError(f"corpus {self.language}: mixed feature widths {sorted(dims)}")
        for u in self.utterances:
            if u.frames and (u.state_labels.max() >= self.state_classes
                             or u.phoneme_labels.max() >= self.phoneme_classes):
                raise DataError(f"utterance {u.id}: label beyond the declared inventory")
        return self

    def with_utterances(self, utterances):
        return replace(self, utterances=list(utterances))


# ----------------------------------------------------------------------------
# toy languages
# ----------------------------------------------------------------------------

@dataclass
class ToyLanguageSpec:
    """Generative parameters of one synthetic language.

    ``stay`` holds the per-state self-loop probability of the dwell
    distribution (mean dwell ``1 / (1 - stay)`` frames).
    """

    language: str
    transitions: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    stay: np.ndarray
    states_per_phoneme: int = 3
    silence: int = 0
    seed: int = 0

    @property
    def phoneme_count(self):
        return self.transitions.shape[0]

    @property
    def feature_dim(self):
        return self.means.shape[1]

    @property
    def state_count(self):
        return self.phoneme_count * self.states_per_phoneme

    def validate(self):
        P = self.phoneme_count
        trans = np.asarray(self.transitions, dtype=DTYPE)
        if trans.shape != (P, P) or (trans < 0).any():
            raise SpecError(f"{self.language}: transition matrix must be a non-negative {P}x{P}")
        if not np.allclose(trans.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise SpecError(f"{self.language}: transition rows must sum to 1")
        absorbing = np.nonzero(np.isclose(np.diag(trans), 1.0, atol=1e-12, rtol=0))[0]
        if absorbing.size:
            raise SpecError(f"{self.language}: phoneme {absorbing[0]} is absorbing (no exit)")
        S = self.state_count
        if self.means.shape != (S, self.feature_dim) or self.variances.shape != self.means.shape:
            raise SpecError(f"{self.language}: emission tables must be ({S}, D)")
        if (self.variances <= 0).any():
            raise SpecError(f"{self.language}: emission variances must be positive")
        if self.stay.shape != (S,) or (self.stay < 0).any() or (self.stay >= 1).any():
            raise SpecError(f"{self.language}: dwell stay probabilities must lie in [0, 1)")
        if not 0 <= self.silence < P:
            raise SpecError(f"{self.language}: silence index {self.silence} out of range")
        if next_phoneme_entropy(trans) >= np.log(P):
            raise SpecError(
                f"{self.language}: next-phoneme entropy must be below log({P}) so the "
                "prediction target is learnable")
        return self

    def phoneme_names(self):
        return ["sil" if p == self.silence else f"p{p}" for p in range(self.phoneme_count)]

    def state_names(self):
        return [f"{name}_{k}" for name in self.phoneme_names()
                for k in range(self.states_per_phoneme)]


def next_phoneme_entropy(transitions):
    """Mean over rows of the bigram row entropy (nats)."""
    t = np.asarray(transitions, dtype=DTYPE)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(t > 0, -t * np.log(t), 0.0)
    return float(terms.sum(axis=1).mean())


def _bigram(rng, phonemes, dominance):
    """Bigram with one dominant successor per phoneme and no self-loops."""
    succ = rng.permutation(phonemes)
    # re-draw until the dominant successor is never the phoneme itself
    while np.any(succ == np.arange(phonemes)):
        succ = rng.permutation(phonemes)
    trans = np.zeros((phonemes, phonemes))
    for p in range(phonemes):
        others = [q for q in range(phonemes) if q != p]
        weights = rng.uniform(0.5, 1.5, size=len(others))
        weights /= weights.sum()
        trans[p, others] = (1.0 - dominance) * weights
        trans[p, succ[p]] += dominance
    trans /= trans.sum(axis=1, keepdims=True)
    return trans


def make_toy_spec(language="toy", seed=0, phoneme_count=10, states_per_phoneme=3,
                  feature_dim=24, separation=0.6, dominance=0.75, speech_stay=0.5,
                  silence_stay=0.8):
    """Random toy language.

    ``separation`` is the standard deviation of the state means relative to
    unit emission noise; ``dominance`` the probability mass of each
    phoneme's preferred successor.
    """
    rng = Rng(seed).child("toy-spec", language)
    S = phoneme_count * states_per_phoneme
    trans = _bigram(rng.child("bigram"), phoneme_count, dominance)
    means = rng.child("means").normal(0.0, separation, size=(S, feature_dim))
    variances = rng.child("variances").uniform(0.5, 1.5, size=(S, feature_dim))
    stay = np.full(S, speech_stay)
    stay[:states_per_phoneme] = silence_stay
    return ToyLanguageSpec(language, trans, means, variances, stay, states_per_phoneme,
                           silence=0, seed=seed).validate()


def perturb_spec(base, language, seed, magnitude):
    """A related language: emission means and bigram shifted by ``magnitude``.

    ``magnitude`` 0 reproduces ``base`` (under a new tag); larger values give
    more distant languages.
    """
    rng = Rng(seed).child("perturb", language)
    means = base.means + rng.child("means").normal(0.0, magnitude, size=base.means.shape)
    noise = rng.child("bigram").uniform(0.0, 1.0, size=base.transitions.shape)
    np.fill_diagonal(noise, 0.0)
    noise /= noise.sum(axis=1, keepdims=True)
    mix = min(magnitude, 1.0) * 0.5
    trans = (1.0 - mix) * base.transitions + mix * noise
    trans /= trans.sum(axis=1, keepdims=True)
    return ToyLanguageSpec(language, trans, means, base.variances.copy(), base.stay.copy(),
                           base.states_per_phoneme, base.silence, seed).validate()


def toy_language_family(languages, seed=0, magnitudes=None, **spec_kwargs):
    """Related toy languages sharing one ancestral emission structure.

    ``magnitudes`` maps tag -> perturbation size (default 0.5 each).
    """
    base = make_toy_spec("ancestor", seed=seed, **spec_kwargs)
    magnitudes = magnitudes or {}
    return {tag: perturb_spec(base, tag, seed + 1 + k, magnitudes.get(tag, 0.5))
            for k, tag in enumerate(languages)}


def sample_phoneme_chain(spec, count, rng, start=None):
    """``count`` phonemes drawn from the bigram chain."""
    trans = spec.transitions
    cum = np.cumsum(trans, axis=1)
    cur = spec.silence if start is None else start
    out = np.empty(count, dtype=np.int64)
    draws = rng.random(count)
    for k in range(count):
        out[k] = cur
        cur = min(int(np.searchsorted(cum[cur], draws[k], side="right")), trans.shape[0] - 1)
    return out


def generate_toy_corpus(spec, utterance_count, length_range=(80, 200), seed=None,
                        prefix=None):
    """Sample utterances from the phoneme HMM of ``spec``.

    Every utterance starts in silence, follows the bigram chain and is cut
    at a length drawn uniformly from ``length_range`` (inclusive).
    """
    spec.validate()
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise DataError(f"invalid length range {length_range}")
    rng = Rng(spec.seed if seed is None else seed).child("corpus", spec.language)
    prefix = prefix or spec.language
    K = spec.states_per_phoneme
    std = np.sqrt(spec.variances)
    trans_cum = np.cumsum(spec.transitions, axis=1)
    utterances = []
    for u in range(utterance_count):
        urng = rng.child(u)
        length = int(urng.integers(lo, hi + 1))
        states = []
        phoneme = spec.silence
        while len(states) < length:
            for k in range(K):
                s = phoneme * K + k
                dwell = int(urng.generator.geometric(1.0 - spec.stay[s]))
                states.extend([s] * dwell)
            phoneme = min(int(np.searchsorted(trans_cum[phoneme], urng.random(), side="right")),
                          spec.phoneme_count - 1)
        states = np.asarray(states[:length], dtype=np.int64)
        noise = urng.normal(0.0, 1.0, size=(length, spec.feature_dim))
        feats = spec.means[states] + noise * std[states]
        utterances.append(Utterance(f"{prefix}-{u:05d}", spec.language, feats, states,
                                    states // K))
    return Corpus(utterances, spec.language, spec.phoneme_names(), spec.state_names(),
                  spec.silence)


# ----------------------------------------------------------------------------
# feature pipeline
# ----------------------------------------------------------------------------

def context_offsets(half_window=15, step=5):
    return np.arange(-half_window, half_window + 1, step, dtype=np.int64)


def stack_context(features, half_window=15, step=5):
    """Concatenate frames at offsets -half_window..+half_window in ``step``
    strides, clamping at the utterance edges.  Frame rate is unchanged."""
    features = np.asarray(features, dtype=DTYPE)
    if features.ndim != 2 or features.shape[0] < 1:
        raise DataError(f"stack_context needs a non-empty (T, D) array, got {features.shape}")
    return kernels.stack_context(features, context_offsets(half_window, step))


def delay_labels(labels, delay=5):
    """Shift labels ``delay`` frames later; the first frames become SKIP."""
    labels = np.asarray(labels, dtype=np.int64)
    if delay < 0:
        raise DataError(f"delay must be non-negative, got {delay}")
    if delay == 0:
        return labels.copy()
    if delay >= labels.size:
        raise DataError(f"delay {delay} leaves no frames in a {labels.size}-frame utterance")
    out = np.full_like(labels, SKIP)
    out[delay:] = labels[:-delay]
    return out


def trim_silence(utterance, silence, margin=5):
    """Drop silence frames more than ``margin`` frames from any speech frame."""
    phones = utterance.phoneme_labels
    speech = np.nonzero(phones != silence)[0]
    if speech.size == 0:
        return Utterance(utterance.id, utterance.language,
                         np.zeros((0, utterance.features.shape[1])), [], [])
    idx = np.arange(phones.size)
    # distance to the nearest speech frame via the neighbours in sorted order
    pos = np.searchsorted(speech, idx)
    left = speech[np.clip(pos - 1, 0, speech.size - 1)]
    right = speech[np.clip(pos, 0, speech.size - 1)]
    dist = np.minimum(np.abs(idx - left), np.abs(right - idx))
    keep = (phones != silence) | (dist <= margin)
    return Utterance(utterance.id, utterance.language, utterance.features[keep],
                     utterance.state_labels[keep], utterance.phoneme_labels[keep])


def trim_corpus_silence(corpus, margin=5, drop_empty=True):
    utts = [trim_silence(u, corpus.silence, margin) for u in corpus.utterances]
    if drop_empty:
        utts = [u for u in utts if u.frames]
    return corpus.with_utterances(utts)


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


def feature_stats(corpus):
    feats = np.concatenate([u.features for u in corpus.utterances if u.frames])
    std = feats.std(axis=0)
    return FeatureStats(feats.mean(axis=0), np.where(std > 1e-12, std, 1.0))


def normalize(corpus, stats=None):
    """Global mean/variance normalisation; returns (corpus, stats)."""
    stats = stats or feature_stats(corpus)
    utts = [replace(u, features=(u.features - stats.mean) / stats.std)
            for u in corpus.utterances]
    return corpus.with_utterances(utts), stats


def uses_context(variant):
    """Feed-forward and PAC models take stacked context; the LSTM baseline
    takes single frames with delayed labels."""
    return variant != "lstm"


@dataclass
class FeatureRecipe:
    half_window: int = 15
    step: int = 5
    label_delay: int = 5


def prepare_for_variant(corpus, variant, recipe=None):
    """Input view of ``corpus`` for one model variant."""
    recipe = recipe or FeatureRecipe()
    utts = []
    for u in corpus.utterances:
        if not u.frames:
            continue
        if uses_context(variant):
            utts.append(replace(u, features=stack_context(u.features, recipe.half_window,
                                                          recipe.step)))
        else:
            if recipe.label_delay >= u.frames:
                continue
            utts.append(replace(u, state_labels=delay_labels(u.state_labels, recipe.label_delay),
                                phoneme_labels=delay_labels(u.phoneme_labels,
                                                            recipe.label_delay)))
    return corpus.with_utterances(utts)


# ----------------------------------------------------------------------------
# corpus file
# ----------------------------------------------------------------------------

def write_corpus(corpus, path):
    lines = [
        f"language\t{corpus.language}",
        f"state_classes\t{corpus.state_classes}",
        f"phoneme_classes\t{corpus.phoneme_classes}",
        f"silence\t{corpus.silence}",
        "phonemes\t" + "\t".join(corpus.phonemes),
        "states\t" + "\t".join(corpus.states),
        f"utterances\t{len(corpus.utterances)}",
    ]
    for u in corpus.utterances:
        for text in (u.id, u.language):
            if "\t" in text or "\n" in text:
                raise DataError(f"utterance id/language may not contain tabs or newlines: {text!r}")
        lines.append(f"utt\t{u.id}\t{u.language}\t{u.frames}\t{u.dim}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for u in corpus.utterances:
            fh.write(UTT_MAGIC)
            fh.write(struct.pack("<II", u.frames, u.dim))
            fh.write(u.features.astype("<f8").tobytes())
            fh.write(u.state_labels.astype("<i4").tobytes())
            fh.write(u.phoneme_labels.astype("<i4").tobytes())


def _parse_manifest(text):
    header = {}
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        key = parts[0]
        if key == "utt":
            if len(parts) != 5:
                raise FormatError(f"manifest line {lineno}: malformed utterance record")
            try:
                entries.append((parts[1], parts[2], int(parts[3]), int(parts[4])))
            except ValueError as exc:
                raise FormatError(f"manifest line {lineno}: {exc}") from None
        elif key in ("phonemes", "states"):
            header[key] = parts[1:]
        elif key in ("language", "state_classes", "phoneme_classes", "silence", "utterances"):
            if len(parts) != 2:
                raise FormatError(f"manifest line {lineno}: malformed {key} record")
            header[key] = parts[1]
        else:
            raise FormatError(f"manifest line {lineno}: unknown record {key!r}")
    missing = {"language", "state_classes", "phoneme_classes", "silence", "phonemes",
               "states", "utterances"} - set(header)
    if missing:
        raise FormatError(f"manifest missing records: {sorted(missing)}")
    try:
        count = int(header["utterances"])
        s_classes = int(header["state_classes"])
        p_classes = int(header["phoneme_classes"])
        silence = int(header["silence"])
    except ValueError as exc:
        raise FormatError(f"manifest: {exc}") from None
    if count != len(entries):
        raise FormatError(f"manifest lists {len(entries)} utterances but declares {count}")
    if s_classes != len(header["states"]) or p_classes != len(header["phonemes"]):
        raise FormatError("manifest class counts disagree with the inventories")
    return header, entries, silence


def read_corpus(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError("bad magic bytes; not a corpus file", 0)
    off = len(MAGIC)
    if len(blob) < off + 8:
        raise FormatError("truncated header", off)
    (mlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if len(blob) < off + mlen:
        raise FormatError("truncated manifest", off)
    try:
        text = blob[off:off + mlen].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("manifest is not UTF-8", off) from None
    header, entries, silence = _parse_manifest(text)
    off += mlen
    utterances = []
    for uid, lang, frames, dim in entries:
        if blob[off:off + 4] != UTT_MAGIC:
            raise FormatError(f"utterance {uid}: missing record marker", off)
        if len(blob) < off + 12:
            raise FormatError(f"utterance {uid}: truncated record header", off)
        t_rec, d_rec = struct.unpack_from("<II", blob, off + 4)
        if (t_rec, d_rec) != (frames, dim):
            raise FormatError(
                f"utterance {uid}: manifest says T={frames}, D={dim} but payload has "
                f"T={t_rec}, D={d_rec}", off)
        off += 12
        need = frames * dim * 8 + frames * 8
        if len(blob) < off + need:
            raise FormatError(f"utterance {uid}: truncated payload", off)
        feats = np.frombuffer(blob, dtype="<f8", count=frames * dim, offset=off)
        off += frames * dim * 8
        states = np.frombuffer(blob, dtype="<i4", count=frames, offset=off)
        off += frames * 4
        phones = np.frombuffer(blob, dtype="<i4", count=frames, offset=off)
        off += frames * 4
        utterances.append(Utterance(uid, lang, feats.astype(DTYPE).reshape(frames, dim),
                                    states.astype(np.int64), phones.astype(np.int64)))
    if off != len(blob):
        raise FormatError("trailing bytes after the last utterance", off)
    return Corpus(utterances, header["language"], list(header["phonemes"]),
                  list(header["states"]), silence)
