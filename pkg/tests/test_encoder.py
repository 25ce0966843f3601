import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import attention_by_hand
from voltgrid.diffcore import ParamSet, finite_difference_check
from voltgrid.encoder import (
    AttentionLayer,
    EncoderConfig,
    build_window,
    encode,
    make_encoder,
    preset,
    sinusoidal_positions,
)

D = 6


def history(n, d=D, seed=0):
    return list(np.random.default_rng(seed).standard_normal((n, d)))


def encoder(variant="attention", dtype=torch.float64, **kw):
    cfg = EncoderConfig(variant=variant, **{"model_dim": 8, "heads": 2, "window": 4, **kw})
    return make_encoder(cfg, D, torch.Generator().manual_seed(0)).to(dtype)


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(model_dim=10, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(dropout=1.0)
    with pytest.raises(ValueError):
        EncoderConfig(variant="lstm")


def test_presets():
    assert (preset("paper").layers, preset("paper").model_dim, preset("paper").heads, preset("paper").dropout) == (6, 256, 4, 0.1)
    assert (preset("desk").layers, preset("desk").model_dim, preset("desk").heads) == (2, 64, 4)
    assert preset("desk").window == 12


# ---------------------------------------------------------------- windows

def test_window_padding_at_start():
    w = build_window(history(1), 0, 4)
    assert w.rows.shape == (4, D)
    assert list(w.pad_mask) == [False, False, False, True]
    assert np.all(w.rows[:3] == 0.0)


def test_window_without_padding():
    h = history(10)
    w = build_window(h, 7, 4)
    assert w.pad_mask.all()
    assert np.array_equal(w.rows, np.asarray(h[4:8]))


def test_window_is_pure():
    h = history(5)
    a, b = build_window(h, 3, 4), build_window(h, 3, 4)
    assert np.array_equal(a.rows, b.rows) and np.array_equal(a.pad_mask, b.pad_mask)


def test_window_errors():
    with pytest.raises(ValueError):
        build_window([], 0, 4)
    with pytest.raises(ValueError):
        build_window(history(2), 2, 4)


# ---------------------------------------------------------------- encoders

def test_passthrough_returns_newest_row():
    h = history(6)
    w = build_window(h, 5, 4)
    enc = make_encoder(EncoderConfig(variant="passthrough", window=4), D)
    assert np.array_equal(encode(w, enc), h[5])


@pytest.mark.parametrize("variant", ["recurrent", "attention"])
def test_output_dimension_and_determinism(variant):
    enc = encoder(variant)
    w = build_window(history(6), 5, 4)
    a, b = encode(w, enc), encode(w, enc)
    assert a.shape == (8,) and np.array_equal(a, b)


def test_shape_mismatch_rejected():
    enc = encoder()
    with pytest.raises(ValueError):
        encode(build_window(history(6, d=D + 1), 5, 4), enc)


def test_all_masked_window_rejected():
    enc = encoder()
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 4, D, dtype=torch.float64), torch.zeros(1, 4, dtype=torch.bool))


def test_identical_rows_invariant_to_window_extension():
    enc = encoder(positional_encoding=False)
    row = np.random.default_rng(1).standard_normal(D)
    two = build_window([row] * 2, 1, 4)
    three = build_window([row] * 3, 2, 4)
    np.testing.assert_allclose(encode(two, enc), encode(three, enc), atol=1e-12)


def test_positional_encoding_makes_order_matter():
    enc = encoder()
    h = history(4, seed=3)
    swapped = [h[1], h[0], h[2], h[3]]
    a = encode(build_window(h, 3, 4), enc)
    b = encode(build_window(swapped, 3, 4), enc)
    assert not np.allclose(a, b)


def test_without_positions_past_rows_commute():
    enc = encoder(positional_encoding=False)
    h = history(4, seed=3)
    swapped = [h[1], h[0], h[2], h[3]]
    np.testing.assert_allclose(encode(build_window(h, 3, 4), enc), encode(build_window(swapped, 3, 4), enc), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2), st.floats(-1e3, 1e3))
def test_padded_rows_are_ignored(n_pad, fill):
    """Whatever sits in padded rows never reaches the output."""
    for variant in ("recurrent", "attention"):
        enc = encoder(variant)
        h = history(4 - n_pad, seed=4)
        w = build_window(h, len(h) - 1, 4)
        rows = w.rows.copy()
        rows[:n_pad] = fill
        a = enc(torch.as_tensor(w.rows[None]), torch.as_tensor(w.pad_mask[None]))
        b = enc(torch.as_tensor(rows[None]), torch.as_tensor(w.pad_mask[None]))
        assert torch.allclose(a, b, atol=1e-12)


def test_padded_rows_get_zero_attention():
    enc = encoder()
    w = build_window(history(2), 1, 4)
    enc(torch.as_tensor(w.rows[None]), torch.as_tensor(w.pad_mask[None]))
    for layer in enc.layers:
        assert torch.all(layer.last_weights[..., :2] == 0.0)


def test_dropout_only_in_training_mode():
    enc = encoder(dropout=0.5)
    w = build_window(history(6), 5, 4)
    assert np.array_equal(encode(w, enc), encode(w, enc))
    torch.manual_seed(0)
    assert not np.array_equal(encode(w, enc, training=True), encode(w, enc))


def test_sinusoidal_positions_values():
    pe = sinusoidal_positions(3, 4)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert float(pe[1, 0]) == pytest.approx(np.sin(1.0))
    assert float(pe[1, 3]) == pytest.approx(np.cos(1.0 / 100.0))


# ---------------------------------------------------------------- attention layer

def test_single_token_attends_to_itself():
    layer = AttentionLayer(4, 2, 8).double()
    x = torch.randn(1, 3, 4, dtype=torch.float64)
    mask = torch.tensor([[False, False, True]])
    layer(x, mask)
    assert torch.all(layer.last_weights[..., 2] == 1.0)


def test_identical_tokens_identical_outputs():
    layer = AttentionLayer(4, 2, 8).double()
    x = torch.randn(1, 1, 4, dtype=torch.float64).repeat(1, 2, 1)
    out = layer(x, torch.ones(1, 2, dtype=torch.bool))
    assert torch.allclose(out[0, 0], out[0, 1], atol=1e-14)


def test_attention_matches_hand_computation():
    torch.manual_seed(2)
    layer = AttentionLayer(3, 1, 6).double()
    x = torch.randn(2, 3, dtype=torch.float64)
    mask = np.array([True, True])
    got, weights = layer.attend(x[None], torch.as_tensor(mask[None]))
    wq, wk, wv = (getattr(layer, n).weight.detach().numpy().T for n in "qkv")
    bq, bk, bv = (getattr(layer, n).bias.detach().numpy() for n in "qkv")
    xn = x.numpy()
    ref, ref_w = attention_by_hand(np.c_[xn, np.ones(2)], np.r_[wq, bq[None]], np.r_[wk, bk[None]], np.r_[wv, bv[None]], mask)
    ref = ref @ layer.o.weight.detach().numpy().T + layer.o.bias.detach().numpy()
    np.testing.assert_allclose(weights[0, 0].detach().numpy(), ref_w, atol=1e-12)
    np.testing.assert_allclose(got[0].detach().numpy(), ref, atol=1e-12)


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("variant", ["recurrent", "attention"])
def test_encoder_gradients_match_finite_differences(variant):
    enc = encoder(variant, layers=2)
    w = build_window(history(3, seed=5), 2, 4)
    rows, mask = torch.as_tensor(w.rows[None]), torch.as_tensor(w.pad_mask[None])
    r = torch.randn(8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    assert finite_difference_check(lambda: (enc(rows, mask)[0] * r).sum(), ParamSet.from_module(enc), max_entries=16) < 1e-3
