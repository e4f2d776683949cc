import numpy as np
import pytest

from helpers import tiny_config
from pacrnn.errors import FormatError
from pacrnn.model import VARIANTS, Model, build_model, forward_utterance
from pacrnn.modelfile import MAGIC, load_model, model_bytes, model_hash, save_model
from pacrnn.multilingual import FrameNet, LidModel, NetSpec
from pacrnn.tensor import Rng


def _same_params(a, b):
    assert list(a.layers) == list(b.layers)
    for name, layer in a.layers.items():
        other = b.layers[name]
        assert type(layer) is type(other)
        for p, v in layer.params().items():
            assert other.params()[p].tobytes() == v.tobytes()


@pytest.mark.parametrize("variant", VARIANTS)
def test_model_round_trip(tmp_path, variant):
    model = build_model(tiny_config(variant), Rng(4))
    path = tmp_path / "m.pacrnn"
    save_model(model, path, extra={"note": "x"})
    loaded, extra = load_model(path)
    assert isinstance(loaded, Model) and extra == {"note": "x"}
    assert loaded.config == model.config
    _same_params(model, loaded)
    feats = Rng(5).normal(size=(7, model.config.feature_dim))
    a, _ = forward_utterance(model, feats)
    b, _ = forward_utterance(loaded, feats)
    assert all(x.state_posterior.tobytes() == y.state_posterior.tobytes() for x, y in zip(a, b))


def test_frame_net_round_trip(tmp_path):
    net = FrameNet.build(Rng(1), 15, NetSpec(hidden=(6,), bottleneck=3, post=(5,),
                                             half_window=2, step=1), {"b": 4, "a": 2})
    save_model(net, tmp_path / "n")
    loaded, _ = load_model(tmp_path / "n")
    assert type(loaded) is FrameNet
    assert (loaded.trunk, loaded.bottleneck, loaded.context, loaded.tags) == (
        net.trunk, net.bottleneck, net.context, net.tags)
    _same_params(net, loaded)


def test_lid_round_trip(tmp_path):
    lid = LidModel.build(Rng(1), 9, ["y", "x", "z"], hidden=4, context=(1, 1))
    save_model(lid, tmp_path / "l")
    loaded, _ = load_model(tmp_path / "l")
    assert isinstance(loaded, LidModel) and loaded.languages == ["x", "y", "z"]
    x = Rng(2).normal(size=(5, 3))
    assert np.array_equal(loaded.language_posterior(x), lid.language_posterior(x))


def test_identical_models_identical_bytes():
    a = build_model(tiny_config("pacrnn-lstm"), Rng(8))
    b = build_model(tiny_config("pacrnn-lstm"), Rng(8))
    c = build_model(tiny_config("pacrnn-lstm"), Rng(9))
    assert model_bytes(a) == model_bytes(b) and model_hash(a) == model_hash(b)
    assert model_hash(a) != model_hash(c)


def test_bytes_start_with_magic():
    assert model_bytes(build_model(tiny_config("dnn"), Rng(0))).startswith(MAGIC)


@pytest.mark.parametrize("mangle", [
    lambda b: b"NOTMODEL" + b[8:],
    lambda b: b + b"\x00",
    lambda b: b[:-8],
    lambda b: b[:12],
    lambda b: b[:20],
])
def test_corrupt_files_rejected(tmp_path, mangle):
    blob = model_bytes(build_model(tiny_config("lstm"), Rng(0)))
    path = tmp_path / "bad"
    path.write_bytes(mangle(blob))
    with pytest.raises(FormatError):
        load_model(path)
