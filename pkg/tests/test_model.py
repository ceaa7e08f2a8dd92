import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acformer import checkpoint
from acformer.analysis import individual_receptive_field
from acformer.gradcheck import grad_check_many
from acformer.model import (ACFormer, ACFormerConfig, ConfigError, batch_norm, mae_loss, mse_loss,
                            revin_denormalize, revin_normalize, validate_config)
from acformer.tensor import ConfigurationError, NonFiniteError, ShapeError, Tape, Tensor

from grad_cases import TINY, tiny_model_case


def tiny(**kw):
    return ACFormer(ACFormerConfig(**{**TINY, **kw}))


def test_default_config_shapes():
    cfg = ACFormerConfig()
    assert cfg.patch_len == 11
    assert cfg.ff_width == 2 * 11 * 8
    model = ACFormer(cfg)
    assert model.num_parameters() == 73_991
    y = model(np.random.default_rng(0).normal(size=(2, 96, 7)))
    assert y.shape == (2, 96, 7)


def test_invalid_stride_names_invariant():
    errors = validate_config(ACFormerConfig(seq_len=100, kernel_size=16, stride=8))
    assert any("(S-K) mod T" in e for e in errors)
    with pytest.raises(ConfigError, match=r"\(S-K\) mod T"):
        ACFormer(ACFormerConfig(seq_len=100))


def test_config_reports_every_violation():
    errors = validate_config(ACFormerConfig(seq_len=100, gate_kernel=4, bn_momentum=2.0))
    assert len(errors) == 3


def test_gate_kernel_must_be_odd():
    with pytest.raises(ConfigError, match="odd"):
        tiny(gate_kernel=2)


def test_unknown_ablation():
    with pytest.raises(ConfigurationError):
        ACFormerConfig().with_ablation("no-everything")


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), S=st.integers(2, 40), C=st.integers(1, 5), scale=st.floats(1e-3, 1e3))
def test_revin_round_trip(seed, S, C, scale):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, S, C)) * scale + rng.normal(size=C) * scale
    xn, state = revin_normalize(x)
    back = revin_denormalize(xn, state).data
    assert np.max(np.abs(back - x)) <= 1e-10 * max(1.0, scale)


def test_revin_round_trip_affine():
    x = np.random.default_rng(3).normal(size=(1, 10, 2)) * 5 + 2
    w, b = Tensor(np.array([0.5, 2.0])), Tensor(np.array([0.1, -0.3]))
    xn, state = revin_normalize(x, weight=w, bias=b)
    assert np.max(np.abs(revin_denormalize(xn, state).data - x)) < 1e-8


def test_revin_constant_channel_is_zero():
    x = np.full((1, 8, 1), 3.0)
    xn, _ = revin_normalize(x)
    assert np.all(xn.data == 0.0)


def test_revin_needs_two_steps():
    with pytest.raises(ShapeError):
        revin_normalize(np.ones((1, 1, 2)))


def test_losses():
    p = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert mae_loss(p, np.zeros((2, 2))).item() == 2.5
    assert mse_loss(p, np.zeros((2, 2))).item() == 7.5
    with pytest.raises(ShapeError):
        mae_loss(p, np.zeros(3))


def test_batch_norm_train_and_eval():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3, 5)) * 3 + 1)
    rm, rv = np.zeros(5), np.ones(5)
    out = batch_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), rm, rv, True, 0.1, 1e-5).data
    assert np.allclose(out.reshape(-1, 5).mean(axis=0), 0, atol=1e-12)
    assert np.allclose(out.reshape(-1, 5).var(axis=0), 1, atol=1e-4)
    flat = x.data.reshape(-1, 5)
    assert np.allclose(rm, 0.1 * flat.mean(axis=0))
    assert np.allclose(rv, 0.9 + 0.1 * flat.var(axis=0, ddof=1))
    ev = batch_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), rm, rv, False, 0.1, 1e-5).data
    assert np.allclose(ev, (x.data - rm) / np.sqrt(rv + 1e-5))


def test_single_and_batched_forward_agree():
    model = tiny()
    x = np.random.default_rng(1).normal(size=(12, 3))
    assert np.allclose(model(x).data, model(x[None]).data[0], atol=1e-12)


def test_expansion_recovers_seq_len():
    model = tiny()
    xn = Tensor(np.random.default_rng(0).normal(size=(2, 12, 3)))
    assert model.expand(model.compress(xn)).shape == (2, 3, 12)


def test_wrong_input_shape():
    with pytest.raises(ShapeError):
        tiny()(np.zeros((2, 12, 4)))


def test_non_finite_input_rejected():
    x = np.zeros((12, 3))
    x[3, 1] = np.nan
    with pytest.raises(NonFiniteError):
        tiny()(x)


def test_attention_rows_on_simplex():
    model = ACFormer(ACFormerConfig(n_channels=5, seed=4))
    maps = model.collect_attention(np.random.default_rng(0).normal(size=(3, 96, 5)) * 4)
    assert len(maps) == 2
    for a in maps:
        assert a.shape == (3, 8, 5, 5)
        assert np.all(a >= 0)
        assert np.max(np.abs(a.sum(axis=-1) - 1)) <= 1e-12


def test_single_channel_attention_is_identity():
    model = tiny(n_channels=1)
    maps = model.collect_attention(np.random.default_rng(0).normal(size=(2, 12, 1)))
    assert all(np.all(a == 1.0) for a in maps)


def test_zeroed_gate_removes_attention_output():
    model = tiny()
    x = np.random.default_rng(0).normal(size=(2, 12, 3))
    for name, p in model.params.items():
        if "gate" in name:
            p.data[...] = 0.0
    with_attn = model(x).data
    for name, p in model.params.items():
        if name.split(".")[-1] in ("wv", "bv"):
            p.data[...] = np.random.default_rng(9).normal(size=p.shape)
    # gate output is 0 * sigmoid(0) = 0, so the value projection has no effect
    assert np.allclose(model(x).data, with_attn, atol=1e-12)


def test_zero_parameters_forecast_the_window_mean():
    model = tiny()
    for p in model.parameters():
        p.data[...] = 0.0
    x = np.random.default_rng(2).normal(size=(2, 12, 3)) + 5
    y = model(x).data
    assert np.allclose(y, np.broadcast_to(x.mean(axis=1, keepdims=True), y.shape), atol=1e-12)


def test_no_attention_is_channel_independent():
    model = tiny(use_attention=False)
    x = np.random.default_rng(0).normal(size=(1, 12, 3))
    base = model(x).data
    x2 = x.copy()
    x2[:, :, 1] += np.linspace(0, 3, 12)
    out = model(x2).data
    assert np.allclose(out[..., [0, 2]], base[..., [0, 2]], atol=1e-12)
    assert not np.allclose(out[..., 1], base[..., 1])


@pytest.mark.parametrize("overrides", [{}, {"use_gate": False}, {"use_attention": False}, {"revin_affine": True},
                                       {"per_head_qkv": True}, {"per_channel_projection": True}])
def test_end_to_end_gradients(overrides):
    f, tensors, rng = tiny_model_case(7, **overrides)
    rep = grad_check_many(f, tensors, tol=1e-3, max_entries=150, rng=rng)
    assert rep.passed, rep


def test_parameter_names_unique_and_deterministic():
    a, b = ACFormer(ACFormerConfig(seed=3)), ACFormer(ACFormerConfig(seed=3))
    assert list(a.params) == list(b.params)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = ACFormer(ACFormerConfig(seed=4))
    assert not np.array_equal(a.params["compress.weight"].data, c.params["compress.weight"].data)


def test_state_dict_round_trip_and_mismatch():
    a, b = tiny(seed=1), tiny(seed=2)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(0).normal(size=(12, 3))
    assert np.array_equal(a(x).data, b(x).data)
    state = a.state_dict()
    state.pop("head.bias")
    with pytest.raises(ShapeError, match="head.bias"):
        b.load_state_dict(state)


@pytest.mark.parametrize("overrides", [{}, {"use_attention": False}, {"d_ff": 5, "revin_affine": True}])
def test_checkpoint_round_trip(tmp_path, overrides):
    model = tiny(seed=5, **overrides)
    model.train()
    model(np.random.default_rng(0).normal(size=(4, 12, 3)))  # move running stats
    model.eval()
    path = tmp_path / "m.acfm"
    checkpoint.save(model, path)
    again = checkpoint.load(path)
    assert again.cfg == model.cfg
    x = np.random.default_rng(1).normal(size=(2, 12, 3))
    assert np.array_equal(model(x).data, again(x).data)
    assert checkpoint.encode(again) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    blob = checkpoint.encode(tiny())
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:-3])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob + b"\0")


def test_no_attention_ig_is_diagonal():
    model = tiny(use_attention=False, seed=3)
    xs = np.random.default_rng(0).normal(size=(3, 12, 3))
    field = individual_receptive_field(model, xs)
    off = ~np.eye(3, dtype=bool)
    assert np.all(field.ig[:, off] == 0.0)
