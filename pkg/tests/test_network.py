import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import attention_loop, gelu, gru_loop

from mskpinn import autodiff as ad
from mskpinn import network as net

SMALL = dict(d_joint=4, n_heads=2, d_integrated=6, d_gru=3, gru_layers=2, head_dims=(6, 5, 4),
             conv_channels=(5, 6))


def small(backbone="mjca", **kw):
    return net.NetConfig(**{**SMALL, "backbone": backbone, **kw})


def randomized(cfg, seed=0, scale=0.7):
    """Parameters with nonzero biases so every term is exercised."""
    rng = np.random.default_rng(seed)
    params = net.init_params(cfg, seed)
    for p in params.values():
        p.data = rng.normal(0, scale, p.shape)
    return params


def zeroed(cfg):
    params = net.init_params(cfg)
    for p in params.values():
        p.data = np.zeros(p.shape)
    return params


def windows(B=3, S=5, seed=1):
    return np.random.default_rng(seed).normal(size=(B, S, 9))


def test_gelu_at_one_uses_error_function():
    assert float(ad.gelu(ad.Tensor(np.array(1.0))).data) == pytest.approx(0.8413447460685429, abs=1e-15)


# -- config ---------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        net.NetConfig(d_joint=5, n_heads=2)
    with pytest.raises(ValueError):
        net.NetConfig(head_dims=(128, 10))
    with pytest.raises(ValueError):
        net.NetConfig(backbone="lstm")
    with pytest.raises(ValueError):
        net.NetConfig(conv_channels=(64, 64))
    cfg = small("cnn")
    assert net.NetConfig.from_dict(cfg.to_dict()) == cfg


def _expected_count(D=64, J=3, Di=128, H=128, L=2, head=(256, 128, 64, 10), backbone="mjca", conv=(64, 128, 128)):
    n = J * (3 * D + D)
    if backbone == "mjca":
        n += J * (2 * D * D + 2 * (J - 1) * D * D)
    if backbone == "cnn":
        c_in = J * D
        for c in conv:
            n += 3 * c_in * c + c
            c_in = c
    else:
        n += J * D * Di + Di
    d_in = Di
    for _ in range(L):
        n += 2 * (d_in * 3 * H + H * 3 * H + 3 * H)
        d_in = 2 * H
    n += sum(a * b + b for a, b in zip(head[:-1], head[1:]))
    return n


@pytest.mark.parametrize("backbone", net.BACKBONES)
def test_default_parameter_counts(backbone):
    params = net.init_params(net.NetConfig(backbone=backbone))
    assert net.param_count(params) == _expected_count(backbone=backbone)
    if backbone == "mjca":
        assert net.param_count(params) == 634058


def test_initialization_is_seeded_and_bounded():
    cfg = small()
    a, b, c = net.init_params(cfg, 5), net.init_params(cfg, 5), net.init_params(cfg, 6)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["embed.0.W"].data, c["embed.0.W"].data)
    assert np.all(a["head.0.b"].data == 0)
    assert np.max(np.abs(a["embed.0.W"].data)) <= math.sqrt(1 / 3)


# -- embedding ------------------------------------------------------------------------

def test_embedding_of_zero_parameters_is_zero():
    params = zeroed(small())
    assert np.all(net.embed_joint(params, 0, windows()[:, :, :3]).data == 0)


def test_embedding_unit_channel():
    params = zeroed(small())
    params["embed.1.W"].data[0, 0] = 1.0
    X = np.zeros((1, 1, 3))
    X[..., 0] = 1.0
    out = net.embed_joint(params, 1, X).data
    assert out[0, 0, 0] == pytest.approx(0.8413447460685429, abs=1e-15)
    assert np.all(out[0, 0, 1:] == 0)


def test_embedding_matches_naive_recomputation():
    params = randomized(small())
    X = windows()[:, :, 3:6]
    W, b = params["embed.1.W"].data, params["embed.1.b"].data
    naive = np.empty(X.shape[:2] + (W.shape[1],))
    for i in range(X.shape[0]):
        for s in range(X.shape[1]):
            naive[i, s] = gelu(np.array([sum(X[i, s, c] * W[c, d] for c in range(3)) + b[d]
                                         for d in range(W.shape[1])]))
    np.testing.assert_allclose(net.embed_joint(params, 1, X).data, naive, rtol=1e-12, atol=1e-15)


def test_embedding_rejects_wrong_width():
    with pytest.raises(ValueError):
        net.embed_joint(zeroed(small()), 0, np.zeros((1, 2, 4)))


# -- cross-joint attention ---------------------------------------------------------------

def _joint_seqs(B=1, S=3, D=4, seed=2):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(B, S, D)) for _ in range(3)]


def test_attention_matches_reference_loop():
    params = randomized(small(), seed=3)
    hs = _joint_seqs()
    out = net.mjca_forward(params, hs, 2)
    for j in range(3):
        C = np.concatenate([hs[i][0] for i in range(3) if i != j], axis=-1)
        ref = attention_loop(hs[j][0], C, *(params[f"mjca.{j}.{w}"].data for w in ("Wq", "Wk", "Wv", "Wo")), 2)
        np.testing.assert_allclose(out[j].data[0], ref, rtol=1e-10, atol=1e-12)


def test_residual_passthrough_is_exact():
    params = randomized(small(), seed=4)
    for j in range(3):
        params[f"mjca.{j}.Wv"].data[:] = 0.0
        params[f"mjca.{j}.Wo"].data[:] = 0.0
    hs = _joint_seqs(B=2, S=5)
    for h, h2 in zip(hs, net.mjca_forward(params, hs, 2)):
        np.testing.assert_array_equal(h2.data, h)


def test_constant_keys_give_uniform_attention():
    params = randomized(small(), seed=5)
    hs = _joint_seqs(B=2, S=6)
    for j in range(3):
        params[f"mjca.{j}.Wk"].data[:] = 0.0  # every key is zero
    for w in net.attention_weights(params, hs, 2):
        np.testing.assert_allclose(w, 1.0 / 6.0, rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), B=st.integers(1, 4), S=st.integers(1, 8))
def test_attention_rows_sum_to_one(seed, B, S):
    params = randomized(small(), seed=seed, scale=2.0)
    for w in net.attention_weights(params, _joint_seqs(B, S, seed=seed), 2):
        assert w.shape == (B, 2, S, S)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_is_shift_invariant():
    x = np.random.default_rng(6).normal(0, 5, (4, 7))
    a = ad.softmax(ad.Tensor(x)).data
    b = ad.softmax(ad.Tensor(x + 300.0)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    big = ad.softmax(ad.Tensor(np.array([1000.0, 1000.0]))).data
    np.testing.assert_array_equal(big, [0.5, 0.5])


def test_attention_rejects_mismatched_joints():
    hs = _joint_seqs()
    hs[1] = hs[1][:, :2]
    with pytest.raises(ValueError):
        net.mjca_forward(randomized(small()), hs, 2)


# -- integration and recurrence -----------------------------------------------------

def test_integration_zero_and_naive():
    cfg = small()
    hs = _joint_seqs(B=2, S=4)
    assert np.all(net.integrate_joints(zeroed(cfg), hs).data == 0)
    params = randomized(cfg, seed=7)
    cat = np.concatenate(hs, axis=-1)
    naive = gelu(cat @ params["integrate.W"].data + params["integrate.b"].data)
    np.testing.assert_allclose(net.integrate_joints(params, hs).data, naive, rtol=1e-12, atol=1e-15)


def test_integration_permutation_consistency():
    params = randomized(small(), seed=8)
    hs = _joint_seqs(B=2, S=4)
    perm = [2, 0, 1]
    W = params["integrate.W"].data
    blocks = [W[4 * j: 4 * (j + 1)] for j in range(3)]
    permuted = dict(params)
    permuted["integrate.W"] = ad.Tensor(np.concatenate([blocks[p] for p in perm]))
    np.testing.assert_allclose(net.integrate_joints(permuted, [hs[p] for p in perm]).data,
                               net.integrate_joints(params, hs).data, rtol=1e-14, atol=1e-15)


def test_bigru_zero_parameters_stay_zero():
    assert np.all(net.bigru_forward(zeroed(small()), np.ones((2, 5, 6)), 2).data == 0)


def test_bigru_matches_reference_loop():
    cfg = small(gru_layers=1)
    params = randomized(cfg, seed=9)
    x = np.random.default_rng(10).normal(size=(1, 4, 6))
    out = net.bigru_forward(params, x, 1).data[0]
    p = lambda d, k: params[f"gru.0.{d}.{k}"].data  # noqa: E731
    fwd = gru_loop(x[0], p("fwd", "W"), p("fwd", "U"), p("fwd", "b"))
    bwd = gru_loop(x[0], p("bwd", "W"), p("bwd", "U"), p("bwd", "b"), reverse=True)
    np.testing.assert_allclose(out, np.concatenate([fwd, bwd], axis=-1), rtol=1e-10, atol=1e-12)


def test_bigru_single_step_sequence():
    cfg = small(gru_layers=1)
    params = randomized(cfg, seed=11)
    for k in ("W", "U", "b"):
        params[f"gru.0.bwd.{k}"] = params[f"gru.0.fwd.{k}"]
    out = net.bigru_forward(params, np.random.default_rng(12).normal(size=(2, 1, 6)), 1).data
    np.testing.assert_array_equal(out[..., :3], out[..., 3:])


def test_dropout_only_in_training_mode():
    cfg = small(dropout=0.5)
    params = randomized(cfg, seed=13)
    x = windows()
    eval1 = net.backbone_forward(cfg, params, x).data
    eval2 = net.backbone_forward(cfg, params, x).data
    train = net.backbone_forward(cfg, params, x, rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(eval1, eval2)
    assert not np.allclose(train, eval1)


# -- head and backbones ----------------------------------------------------------------

def test_head_constant_and_zero_outputs():
    cfg = small()
    params = zeroed(cfg)
    x = windows()
    assert np.all(net.predict(cfg, params, x, clamp=True) == 0)
    params["head.1.b"].data[:] = 0.5
    np.testing.assert_array_equal(net.backbone_forward(cfg, params, x).data, 0.5)


def test_head_matches_naive_dense_chain():
    cfg = small()
    params = randomized(cfg, seed=14)
    h = np.random.default_rng(15).normal(size=(3, 4, 6))
    last = h[:, -1]
    hidden = gelu(last @ params["head.0.W"].data + params["head.0.b"].data)
    naive = hidden @ params["head.1.W"].data + params["head.1.b"].data
    np.testing.assert_allclose(net.predict_head(params, h, 2).data, naive, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("backbone", net.BACKBONES)
def test_zero_parameters_give_zero_outputs(backbone):
    cfg = small(backbone)
    assert np.all(net.backbone_forward(cfg, zeroed(cfg), windows()).data == 0)


@settings(max_examples=15, deadline=None)
@given(B=st.integers(1, 5), S=st.integers(1, 6), backbone=st.sampled_from(net.BACKBONES))
def test_output_shape_contract(B, S, backbone):
    cfg = small(backbone)
    out = net.backbone_forward(cfg, randomized(cfg), windows(B, S))
    assert out.shape == (B, cfg.n_muscles)


def test_mjca_with_passthrough_equals_bigru_only():
    cfg = small()
    params = randomized(cfg, seed=16)
    for j in range(3):
        params[f"mjca.{j}.Wv"].data[:] = 0.0
        params[f"mjca.{j}.Wo"].data[:] = 0.0
    plain = {k: v for k, v in params.items() if not k.startswith("mjca.")}
    x = windows(seed=17)
    np.testing.assert_allclose(net.backbone_forward(cfg, params, x).data,
                               net.backbone_forward(small("bigru_only"), plain, x).data, rtol=1e-10, atol=1e-12)


def test_identity_center_kernel_is_a_dense_layer():
    cfg = small("cnn")
    params = randomized(cfg, seed=18)
    x = np.random.default_rng(19).normal(size=(2, 5, 12))
    expected = x
    c_in = 12
    for i in range(2):
        W = params[f"conv.{i}.W"].data
        W[:c_in] = 0.0
        W[2 * c_in:] = 0.0
        expected = gelu(expected @ W[c_in: 2 * c_in] + params[f"conv.{i}.b"].data)
        c_in = W.shape[1]
    np.testing.assert_allclose(net.conv_stack(params, x, 2).data, expected, rtol=1e-12, atol=1e-15)


def test_conv_taps_see_zero_padding():
    cfg = small("cnn")
    params = zeroed(cfg)
    # one layer reading only the previous position
    params["conv.0.W"].data[:12, :] = np.eye(12, 5)
    x = np.arange(1, 13, dtype=float)[None, None, :].repeat(3, axis=1)
    out = net.conv_stack(params, x, 1).data
    np.testing.assert_array_equal(out[0, 0], 0.0)
    np.testing.assert_allclose(out[0, 1], gelu(np.arange(1.0, 6.0)), rtol=1e-14)


def test_backbone_rejects_bad_windows():
    cfg = small()
    with pytest.raises(ValueError):
        net.backbone_forward(cfg, randomized(cfg), np.zeros((2, 5, 8)))
    with pytest.raises(ValueError):
        net.WindowBatch(np.full((1, 2, 9), np.nan))


# -- checkpoints ---------------------------------------------------------------------

@pytest.mark.parametrize("backbone", net.BACKBONES)
def test_checkpoint_round_trip_is_bit_exact(backbone, tmp_path):
    cfg = small(backbone)
    params = randomized(cfg, seed=20)
    extra = {"m/0": np.arange(3.0), "count": np.array([7])}
    net.save_checkpoint(tmp_path / "a.npz", cfg, params, extra, {"epoch": 3})
    cfg2, params2, arrays, meta = net.load_checkpoint(tmp_path / "a.npz")
    assert cfg2 == cfg and meta == {"epoch": 3} and list(params2) == list(params)
    for k in params:
        assert params2[k].data.tobytes() == params[k].data.tobytes()
    np.testing.assert_array_equal(arrays["m/0"], extra["m/0"])
    x = windows()
    np.testing.assert_array_equal(net.predict(cfg, params, x), net.predict(cfg2, params2, x))


def test_identical_checkpoints_are_byte_identical(tmp_path):
    cfg = small()
    params = randomized(cfg, seed=21)
    net.save_checkpoint(tmp_path / "a.npz", cfg, params)
    net.save_checkpoint(tmp_path / "b.npz", cfg, params)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_checkpoint_rejects_foreign_files(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(ValueError):
        net.load_checkpoint(tmp_path / "x.npz")
    params = randomized(small())
    del params["head.0.b"]
    with pytest.raises(ValueError):
        net.check_params(small(), params)
