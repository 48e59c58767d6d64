import json

import numpy as np
import pytest

from segcode import tensor as T
from segcode.model import (ModelConfig, ModelError, TwoStreamNet, attend_and_pool, bilstm,
                           encode_frames, frames_to_input, gate_and_concat, init_params,
                           init_params_names, load_checkpoint, save_checkpoint)
from segcode.tensor import DimensionError, LSTMParams

from conftest import t64

TINY = dict(num_classes=3, resolution=8, k=2, hidden=3, stages=[[2, 3, 1], [4, 3, 1]])


def clip(rng, b=2, k=2, res=8):
    return rng.integers(0, 256, size=(b, k, res, res, 3), dtype=np.uint8)


# ---- encoder -------------------------------------------------------------------

def test_encode_identical_frames_identical_rows(f64, rng):
    params = init_params(ModelConfig(**TINY), seed=1, dtype=np.float64)
    frame = rng.integers(0, 256, size=(8, 8, 3))
    x = frames_to_input(np.stack([frame] * 3), np.float64)
    feats = encode_frames(x, params, "rgb_encoder", TINY["stages"]).data
    assert feats.shape == (3, 4)
    assert np.array_equal(feats[0], feats[1]) and np.array_equal(feats[1], feats[2])


def test_encode_black_clip_zero_bias_is_zero(f64):
    params = init_params(ModelConfig(**TINY), seed=1, dtype=np.float64)
    x = frames_to_input(np.zeros((2, 8, 8, 3), np.uint8), np.float64)
    assert np.all(encode_frames(x, params, "mask_encoder", TINY["stages"]).data == 0)


def test_encode_default_stages_k40_shape(rng):
    cfg = ModelConfig(num_classes=4, resolution=16)
    params = init_params(cfg)
    x = frames_to_input(rng.integers(0, 256, size=(40, 16, 16, 3)))
    assert encode_frames(x, params, "rgb_encoder", cfg.stages).shape == (40, cfg.feature_size) == (40, 32)


def test_encode_resolution_mismatch(rng):
    net = TwoStreamNet(ModelConfig(**TINY))
    with pytest.raises(DimensionError, match="16x16"):
        net.logits(clip(rng, res=16), clip(rng, res=16))


def test_config_final_extent_checked():
    with pytest.raises(ModelError):
        ModelConfig(num_classes=2, resolution=8, stages=[[4, 3, 1]] * 4)


# ---- gating --------------------------------------------------------------------

def test_gate_examples(f64):
    f_rgb, f_mask = t64([[2.0, 4.0]]), t64([[6.0, 8.0]])
    out = gate_and_concat(f_rgb, f_mask, t64(0.5), t64(0.25))
    np.testing.assert_array_equal(out.data, [[1, 2, 1.5, 2]])
    half = gate_and_concat(f_rgb, f_mask, T.sigmoid(t64(0.0)), T.sigmoid(t64(0.0)))
    np.testing.assert_array_equal(half.data, [[1, 2, 3, 4]])
    shut = gate_and_concat(f_rgb, f_mask, T.sigmoid(t64(-50.0)), T.sigmoid(t64(0.0)))
    assert np.all(np.abs(shut.data[:, :2]) < 1e-20)


def test_gate_shape_mismatch(f64):
    with pytest.raises(DimensionError):
        gate_and_concat(t64(np.ones((2, 3))), t64(np.ones((2, 2))), t64(0.5), t64(0.5))


def test_gates_initialised_neutral_and_independent():
    net = TwoStreamNet(ModelConfig(**TINY))
    assert net.eta() == (0.5, 0.5)
    net.params["gate.theta_mask"].data = np.array(3.0, np.float32)
    r, m = net.eta()
    assert r == 0.5 and m > 0.95


def test_mask_params_never_touch_rgb_half(f64, rng):
    net = TwoStreamNet(ModelConfig(**TINY)).astype(np.float64)
    rgb, mask = clip(rng), clip(rng)
    d = net.config.feature_size
    before = net.features(rgb, mask).data[..., :d].copy()
    for name, p in net.params.items():
        if name.startswith("mask_encoder") or name == "gate.theta_mask":
            p.data = p.data + rng.normal(size=p.shape)
    after = net.features(rgb, mask).data
    assert np.array_equal(after[..., :d], before)


# ---- BiLSTM ---------------------------------------------------------------------

def _dirs(rng, m=3, u=2, scale=1.0):
    mk = lambda: LSTMParams(t64(rng.normal(size=(m, 4 * u)) * scale), t64(rng.normal(size=(u, 4 * u)) * scale),
                            t64(rng.normal(size=4 * u) * scale))
    return mk(), mk()


def test_bilstm_zero_params(f64, rng):
    fwd, bwd = _dirs(rng, scale=0.0)
    assert np.all(bilstm(t64(rng.normal(size=(2, 5, 3))), fwd, bwd).data == 0)


def test_bilstm_reversal_swaps_halves(f64, rng):
    fwd, bwd = _dirs(rng)
    seq = rng.normal(size=(1, 6, 3))
    u = 2
    orig = bilstm(t64(seq), fwd, bwd).data[0]
    swapped = bilstm(t64(seq[:, ::-1]), bwd, fwd).data[0]
    np.testing.assert_allclose(swapped[::-1, :u], orig[:, u:], atol=1e-14)
    np.testing.assert_allclose(swapped[::-1, u:], orig[:, :u], atol=1e-14)


def test_bilstm_single_step(f64, rng):
    fwd, _ = _dirs(rng)
    out = bilstm(t64(rng.normal(size=(1, 1, 3))), fwd, fwd).data
    np.testing.assert_array_equal(out[..., :2], out[..., 2:])


def test_bilstm_width_mismatch(f64, rng):
    fwd, bwd = _dirs(rng)
    with pytest.raises(DimensionError):
        bilstm(t64(np.ones((1, 2, 4))), fwd, bwd)


# ---- frame attention -----------------------------------------------------------------

def test_attention_uniform(f64, rng):
    h = rng.normal(size=(1, 5, 4))
    pooled, a = attend_and_pool(t64(h), t64(np.zeros(4)), t64(0.0))
    assert np.all(a.data == 0.5)
    np.testing.assert_allclose(pooled.data, h.mean(axis=1), atol=1e-15)


def test_attention_saturated_picks_frame(f64):
    h = np.array([[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]])
    v = t64([-100.0, 100.0])
    pooled, a = attend_and_pool(t64(h), v, t64(-50.0))
    np.testing.assert_allclose(pooled.data, [[0.0, 1.0]], atol=1e-12)


def test_attention_hand_value(f64):
    pooled, _ = attend_and_pool(t64([[[1.0, 0.0], [0.0, 1.0]]]), t64([0.0, 0.0]), t64(0.0))
    np.testing.assert_array_equal(pooled.data, [[0.5, 0.5]])


def test_attention_weights_strictly_inside(rng):
    net = TwoStreamNet(ModelConfig(**TINY))
    net.params["attention.v"].data = np.full(6, 1e4, np.float32)
    _, a = net.logits(clip(rng), clip(rng), return_attention=True)
    assert np.all(a.data > 0) and np.all(a.data < 1)


# ---- forward -------------------------------------------------------------------------

def test_forward_probabilities(rng):
    net = TwoStreamNet(ModelConfig(**TINY), seed=4)
    p = net.forward(clip(rng, b=3), clip(rng, b=3))
    assert p.shape == (3, 3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    single = net.forward(clip(rng, b=1)[0], clip(rng, b=1)[0])
    assert single.shape == (3,)


def test_forward_side_effect_free(rng):
    net = TwoStreamNet(ModelConfig(**TINY), seed=4)
    rgb, mask = clip(rng), clip(rng)
    assert net.forward(rgb, mask).tobytes() == net.forward(rgb, mask).tobytes()


def test_forward_needs_mask_in_two_stream_mode(rng):
    with pytest.raises(ModelError):
        TwoStreamNet(ModelConfig(**TINY)).forward(clip(rng))


def test_black_mask_carries_no_signal(rng):
    """All-black masks through a zero-bias mask encoder give zero mask features,
    so the logits cannot depend on any mask-branch parameter."""
    net = TwoStreamNet(ModelConfig(**TINY), seed=2)
    rgb, black = clip(rng), np.zeros((2, 2, 8, 8, 3), np.uint8)
    ref = net.forward(rgb, black)
    for name, p in net.params.items():
        if name.startswith("mask_encoder") and name.endswith("weight"):
            p.data = rng.normal(size=p.shape).astype(np.float32) * 5
    net.params["gate.theta_mask"].data = np.array(2.0, np.float32)
    assert np.array_equal(net.forward(rgb, black), ref)


def test_single_stream_topology(rng):
    cfg = ModelConfig(single_stream=True, **TINY)
    net = TwoStreamNet(cfg)
    assert not any(n.startswith(("mask_encoder", "gate")) for n in net.params)
    assert net.params["lstm.fwd.w_ih"].shape == (4, 12)
    assert TwoStreamNet(ModelConfig(**TINY)).params["lstm.fwd.w_ih"].shape == (8, 12)
    assert net.forward(clip(rng)).shape == (2, 3)
    assert net.eta() is None


def test_class_permutation_permutes_probabilities(rng):
    net = TwoStreamNet(ModelConfig(**TINY), seed=7)
    rgb, mask = clip(rng), clip(rng)
    perm = [2, 0, 1]
    permuted = TwoStreamNet(ModelConfig(**TINY), params={k: T.Tensor(v.data.copy(), True, v.dtype, k)
                                                          for k, v in net.params.items()})
    permuted.params["classifier.weight"].data = net.params["classifier.weight"].data[:, perm].copy()
    permuted.params["classifier.bias"].data = net.params["classifier.bias"].data[perm].copy()
    np.testing.assert_allclose(permuted.forward(rgb, mask), net.forward(rgb, mask)[:, perm], atol=1e-7)


def test_init_scheme():
    cfg = ModelConfig(num_classes=5, resolution=16, hidden=4)
    p = init_params(cfg, seed=0)
    w = p["rgb_encoder.conv1.weight"].data
    assert np.abs(w).max() <= np.sqrt(1 / (8 * 9))
    b = p["lstm.bwd.bias"].data
    assert np.all(b[4:8] == 1.0) and np.all(b[:4] == 0) and np.all(b[8:] == 0)
    assert all(p[n].data.dtype == np.float32 for n in p)
    assert list(p) == init_params_names(cfg)


def test_checkpoint_round_trip(tmp_path, rng):
    net = TwoStreamNet(ModelConfig(**TINY), seed=5)
    save_checkpoint(tmp_path / "ck.json", net, {"classes": ["a", "b", "c"]})
    raw = json.loads((tmp_path / "ck.json").read_text())
    assert raw["format_version"] == 1
    assert set(raw["tensors"]) == set(init_params_names(net.config))
    back, cfg = load_checkpoint(tmp_path / "ck.json")
    assert cfg["classes"] == ["a", "b", "c"]
    rgb, mask = clip(rng), clip(rng)
    assert np.array_equal(back.forward(rgb, mask), net.forward(rgb, mask))
