import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pacrnn.data import (MAGIC, SKIP, Utterance, delay_labels,
                         generate_toy_corpus, make_toy_spec, next_phoneme_entropy, normalize,
                         perturb_spec, prepare_for_variant, read_corpus, sample_phoneme_chain,
                         stack_context, toy_language_family, trim_corpus_silence, trim_silence,
                         write_corpus)
from pacrnn.errors import DataError, FormatError, SpecError
from pacrnn.tensor import Rng


@pytest.fixture(scope="module")
def spec():
    return make_toy_spec(seed=3)


@pytest.fixture(scope="module")
def corpus(spec):
    return generate_toy_corpus(spec, 12, (20, 60), seed=4)


# -- toy languages -----------------------------------------------------------

def test_default_spec_shape(spec):
    assert spec.phoneme_count == 10 and spec.states_per_phoneme == 3
    assert spec.state_count == 30 and spec.feature_dim == 24
    assert np.allclose(spec.transitions.sum(axis=1), 1.0, atol=1e-9)
    assert next_phoneme_entropy(spec.transitions) < np.log(10)


def test_generation_deterministic(spec):
    a = generate_toy_corpus(spec, 3, (10, 30), seed=9)
    b = generate_toy_corpus(spec, 3, (10, 30), seed=9)
    for ua, ub in zip(a.utterances, b.utterances):
        assert ua.features.tobytes() == ub.features.tobytes()
        assert np.array_equal(ua.state_labels, ub.state_labels)


def test_labels_consistent(corpus):
    for u in corpus.utterances:
        assert np.array_equal(u.state_labels // 3, u.phoneme_labels)
        assert 20 <= u.frames <= 60
        assert u.phoneme_labels[0] == corpus.silence


def test_state_inventory(corpus):
    assert corpus.state_classes == 30 and corpus.phoneme_classes == 10
    corpus.validate()


def test_bigram_counts_match_spec(spec):
    chain = sample_phoneme_chain(spec, 100_000, Rng(1))
    counts = np.zeros((10, 10))
    np.add.at(counts, (chain[:-1], chain[1:]), 1)
    empirical = counts / counts.sum(axis=1, keepdims=True)
    assert np.max(np.abs(empirical - spec.transitions)) < 0.02


def test_absorbing_phoneme_is_spec_error(spec):
    trans = spec.transitions.copy()
    trans[2] = 0.0
    trans[2, 2] = 1.0
    with pytest.raises(SpecError, match="absorbing"):
        replace(spec, transitions=trans).validate()


def test_invalid_specs(spec):
    bad_rows = spec.transitions * 1.1
    with pytest.raises(SpecError, match="sum to 1"):
        replace(spec, transitions=bad_rows).validate()
    with pytest.raises(SpecError, match="variances"):
        replace(spec, variances=-spec.variances).validate()
    uniform = np.full((10, 10), 0.1)
    with pytest.raises(SpecError, match="entropy"):
        replace(spec, transitions=uniform).validate()


def test_family_shares_structure():
    fam = toy_language_family(["a", "b"], seed=1, magnitudes={"a": 0.0, "b": 1.0})
    base = make_toy_spec("ancestor", seed=1)
    assert np.allclose(fam["a"].means, base.means)
    assert not np.allclose(fam["b"].means, base.means)
    assert perturb_spec(base, "c", 5, 0.3).language == "c"


# -- context stacking ----------------------------------------------------------

def test_stack_width():
    assert stack_context(np.zeros((9, 80))).shape == (9, 560)


def test_stack_constant_rows_identical():
    out = stack_context(np.ones((12, 3)) * 2.5)
    assert np.all(out == out[0])


def test_stack_single_frame_repeated():
    f = np.array([[1.0, 2.0]])
    assert stack_context(f).tolist() == [[1.0, 2.0] * 7]


def test_stack_offsets_and_clamping():
    f = np.arange(40, dtype=float)[:, None]
    out = stack_context(f)
    assert out[20].tolist() == [5, 10, 15, 20, 25, 30, 35]
    assert out[0].tolist() == [0, 0, 0, 0, 5, 10, 15]
    assert out[39].tolist() == [24, 29, 34, 39, 39, 39, 39]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(0, 49), st.integers(0, 2**32 - 1))
def test_stack_locality(T, t, seed):
    t = t % T
    f = Rng(seed).normal(size=(T, 2))
    base = stack_context(f)
    far = [k for k in range(T) if abs(k - t) > 15]
    if not far:
        return
    g = f.copy()
    g[far] += 100.0
    assert np.array_equal(stack_context(g)[t], base[t])


def test_stack_empty_is_error():
    with pytest.raises(DataError):
        stack_context(np.zeros((0, 3)))


# -- label delay ---------------------------------------------------------------

def test_delay_zero_identity():
    assert delay_labels([3, 1, 2], 0).tolist() == [3, 1, 2]


def test_delay_five_of_eight():
    out = delay_labels([10, 11, 12, 13, 14, 15, 16, 17], 5)
    assert out.tolist() == [SKIP] * 5 + [10, 11, 12]


def test_delay_too_long():
    with pytest.raises(DataError):
        delay_labels([1, 2, 3], 3)


def test_lstm_view_scores_t_minus_5_frames(corpus):
    view = prepare_for_variant(corpus, "lstm")
    for u, v in zip(corpus.utterances, view.utterances):
        assert int((v.state_labels >= 0).sum()) == u.frames - 5
        assert v.features.shape == u.features.shape
    stacked = prepare_for_variant(corpus, "pacrnn-lstm")
    assert stacked.feature_dim == 7 * corpus.feature_dim


# -- silence trimming ----------------------------------------------------------

def _utt(phones):
    phones = np.asarray(phones)
    return Utterance("u", "x", np.arange(len(phones), dtype=float)[:, None], phones * 3, phones)


def test_trim_no_silence_unchanged():
    u = _utt([1, 2, 3, 2])
    out = trim_silence(u, 0)
    assert np.array_equal(out.features, u.features)


def test_trim_margin_rule():
    u = _utt([0] * 10 + [4] * 20 + [0] * 10)
    out = trim_silence(u, 0, margin=5)
    assert out.phoneme_labels.tolist() == [0] * 5 + [4] * 20 + [0] * 5
    assert out.features[:, 0].tolist() == list(range(5, 35))


def test_trim_all_silence_empty():
    assert trim_silence(_utt([0] * 8), 0).frames == 0


def test_trim_corpus_keeps_speech(corpus):
    trimmed = trim_corpus_silence(corpus)
    speech = lambda c: sum(int((u.phoneme_labels != c.silence).sum()) for u in c.utterances)
    assert trimmed.frames <= corpus.frames
    assert speech(trimmed) == speech(corpus)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=60), st.integers(0, 8))
def test_trim_idempotent(phones, margin):
    once = trim_silence(_utt(phones), 0, margin)
    twice = trim_silence(once, 0, margin)
    assert np.array_equal(once.phoneme_labels, twice.phoneme_labels)
    assert np.array_equal(once.features, twice.features)


# -- normalisation -----------------------------------------------------------

def test_normalize_zero_mean_unit_variance(corpus):
    out, stats = normalize(corpus)
    feats = np.concatenate([u.features for u in out.utterances])
    assert np.allclose(feats.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(feats.std(axis=0), 1.0, atol=1e-12)
    again, _ = normalize(corpus, stats)
    assert again.utterances[0].features.tobytes() == out.utterances[0].features.tobytes()


# -- corpus files --------------------------------------------------------------

def test_roundtrip(tmp_path, corpus):
    path = tmp_path / "c.corpus"
    write_corpus(corpus, path)
    back = read_corpus(path)
    assert back.language == corpus.language
    assert back.phonemes == corpus.phonemes and back.states == corpus.states
    for a, b in zip(corpus.utterances, back.utterances):
        assert a.id == b.id and a.language == b.language
        assert a.features.tobytes() == b.features.tobytes()
        assert np.array_equal(a.state_labels, b.state_labels)
        assert np.array_equal(a.phoneme_labels, b.phoneme_labels)


def test_corrupt_magic(tmp_path, corpus):
    path = tmp_path / "c.corpus"
    write_corpus(corpus, path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="byte offset 0"):
        read_corpus(path)


def test_dimension_mismatch_names_utterance(tmp_path, corpus):
    path = tmp_path / "c.corpus"
    write_corpus(corpus, path)
    blob = bytearray(path.read_bytes())
    (mlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    first = corpus.utterances[0]
    off = len(MAGIC) + 8 + mlen
    struct.pack_into("<I", blob, off + 8, first.dim + 1)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match=first.id):
        read_corpus(path)


def test_truncated_payload(tmp_path, corpus):
    path = tmp_path / "c.corpus"
    write_corpus(corpus, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="truncated"):
        read_corpus(path)
    path.write_bytes(blob + b"x")
    with pytest.raises(FormatError, match="trailing"):
        read_corpus(path)


def test_reading_does_not_modify_file(tmp_path, corpus):
    path = tmp_path / "c.corpus"
    write_corpus(corpus, path)
    before = path.read_bytes()
    read_corpus(path)
    assert path.read_bytes() == before


def test_utterance_length_mismatch():
    with pytest.raises(DataError):
        Utterance("u", "x", np.zeros((3, 2)), [0, 1], [0, 1, 2])
