import numpy as np
import pytest

from tvase.weights import (
    ConfigError, ModelConfig, WeightFileError, build, count_params, layer_counts, load_weights, save_weights,
)

# Layer-wise counts derived by hand from the channel list (weight + bias + BN gamma/beta + PReLU).
FROZEN_LAYER_COUNTS = {
    "enc_mic.0": 16 * 2 * 10 + 16 * 4,
    "enc_mic.1": 32 * 16 * 10 + 32 * 4,
    "fuse": 64 * 128 * 10 + 64 * 4,
    "tvase.0.tcm.pw1": 256 * 320 + 256 * 4,
    "tvase.0.tcm.dw": 256 * 3 + 256 * 4,
    "tvase.0.attn.q": 320 * 64 + 320 * 4,
    "tvase.0.attn.out": 320 * 320 + 320 * 4,
    "tvase.0.dkg.k0.0": 80 * 320 + 80 * 4,
    "tvase.0.dkg.k0.2": 10 * 20 + 10,
    "tvase.0.dkg.ks": 320 * 320 + 320,
    "dec.gate.0": 64 * 128 + 64,
    "dec.deconv.3": 16 * 2 * 10 + 2 * 4,
    "dec.final": 2 * 2 * 10 + 2,
}


def test_layer_counts_match_hand_derivation():
    counts = dict(layer_counts(ModelConfig(dkg="separable")))
    for name, n in FROZEN_LAYER_COUNTS.items():
        assert counts[name] == n, name


def test_dkg_deltas_closed_form():
    none = count_params(ModelConfig(dkg="none"))
    nonsep = count_params(ModelConfig(dkg="non_separable"))
    sep = count_params(ModelConfig(dkg="separable"))
    assert nonsep - none == 4 * 5 * (64 * 640 + 640) == 832_000
    path = (320 * 80 + 80) + (80 * 20 + 20) + (20 * 10 + 10) + (320 * 320 + 320)
    assert path == 130_230
    extras = 4 * 3 * (80 + 20)  # BN gamma/beta and PReLU on the two hidden K0 layers
    assert sep - none == 4 * path + extras == 520_920 + 1_200


def test_buffers_add_running_stats():
    cfg = ModelConfig()
    normed = sum(c for name, c in layer_counts(cfg) if name.startswith("enc_mic.0"))
    assert normed
    assert count_params(cfg, include_buffers=True) > count_params(cfg)


def test_build_deterministic_and_initialised():
    a, b = build(ModelConfig(), 3), build(ModelConfig(), 3)
    assert a.equal(b)
    assert not a.equal(build(ModelConfig(), 4))
    assert np.all(a["enc_mic.0.bn.gamma"] == 1) and np.all(a["enc_mic.0.bn.var"] == 1)
    assert np.all(a["enc_mic.0.prelu"] == 0.25) and np.all(a["enc_mic.0.bias"] == 0)
    bound = np.sqrt(6 / (2 * 10 + 16 * 10))
    assert np.abs(a["enc_mic.0.weight"]).max() <= bound


def test_save_load_round_trip(tmp_path):
    for dkg in ("none", "non_separable", "separable"):
        w = build(ModelConfig(dkg=dkg), 1)
        save_weights(w, tmp_path / f"{dkg}.tvw")
        back = load_weights(tmp_path / f"{dkg}.tvw")
        assert back.equal(w)
        save_weights(back, tmp_path / "again.tvw")
        assert (tmp_path / "again.tvw").read_bytes() == (tmp_path / f"{dkg}.tvw").read_bytes()


def test_load_rejects_corruption(tmp_path):
    path = tmp_path / "w.tvw"
    save_weights(build(ModelConfig(dkg="none"), 0), path)
    raw = path.read_bytes()
    for bad, msg in ((b"XXXX" + raw[4:], "magic"), (raw[:-3], "truncated"), (raw + b"\0", "trailing")):
        path.write_bytes(bad)
        with pytest.raises(WeightFileError, match=msg):
            load_weights(path)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dkg="banana")
    with pytest.raises(ConfigError):
        ModelConfig(attn_groups=3)
    assert ModelConfig().enc_freqs == [161, 41, 11, 5]
    assert ModelConfig().latent == 320
