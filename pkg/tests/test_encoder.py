import json

import numpy as np
import pytest

from seqfuse import tensor as T
from seqfuse.encoder import (
    EncoderConfig,
    default_grid,
    encoder_forward,
    init_weights,
    load_weights,
    match_params,
    multi_head_attention,
    param_count,
    save_weights,
    weights_from_dict,
    weights_to_dict,
)
from seqfuse.errors import ContractError, DimensionError
from seqfuse.presets import PRESET_PAIRS, get_preset
from seqfuse.tensor import Tensor

from reference import count_scalars, max_rel, naive_attention, naive_encoder


def _config(**kw):
    base = dict(token_dim=6, key_dim=4, ffwd_dim=7, num_heads=2, num_layers=2, max_seq_len=16)
    base.update(kw)
    return EncoderConfig(**base)


def _randomize_biases(weights, rng):
    # fresh weights have zero biases and unit gains; perturb so every term is exercised
    for name, t in weights.named_parameters():
        if t.ndim == 1:
            t.data += rng.normal(0, 0.3, size=t.shape)


# ---------------------------------------------------------------- attention


def test_attention_matches_per_head_oracle(f64):
    rng = np.random.default_rng(3)
    w = init_weights(_config(num_heads=2), 3)
    _randomize_biases(w, rng)
    q_src, kv_src = rng.normal(size=(5, 6)), rng.normal(size=(4, 6))
    mask = rng.random((5, 4)) > 0.3
    mask[2] = False  # a query that sees nothing
    out, acts = multi_head_attention(Tensor(q_src), Tensor(kv_src), mask, w.layers[0], record=True)
    assert max_rel(out.data, naive_attention(q_src, kv_src, mask, w.layers[0])) <= 1e-10
    np.testing.assert_array_equal(out.data[2], 0.0)
    for probs in acts.probs:
        np.testing.assert_array_equal(probs[~mask], 0.0)
        visible = mask.any(axis=1)
        np.testing.assert_allclose(probs[visible].sum(axis=1), 1.0, atol=1e-6)


def test_attention_mask_shape_checked(f64):
    w = init_weights(_config(), 0)
    with pytest.raises(DimensionError):
        multi_head_attention(Tensor(np.ones((3, 6))), Tensor(np.ones((2, 6))), np.ones((3, 3), bool), w.layers[0])


# ---------------------------------------------------------------- encoder stack


def test_zero_layers_is_identity(f64):
    w = init_weights(_config(num_layers=0), 0)
    x = np.random.default_rng(0).normal(size=(4, 6))
    out, acts = encoder_forward(Tensor(x), range(4), np.ones((4, 4), bool), w)
    np.testing.assert_array_equal(out.data, x)
    assert acts == []


def test_full_range_matches_self_attention_reference(f64):
    rng = np.random.default_rng(8)
    w = init_weights(_config(num_layers=3), 8)
    _randomize_biases(w, rng)
    x = rng.normal(size=(5, 6))
    mask = np.ones((5, 5), bool)
    out, _ = encoder_forward(Tensor(x), range(5), mask, w)
    assert max_rel(out.data, naive_encoder(x, range(5), mask, w)) <= 1e-10


def test_positional_table_matches_reference(f64):
    rng = np.random.default_rng(4)
    w = init_weights(_config(positional=True), 4)
    x = rng.normal(size=(5, 6))
    mask = np.ones((5, 3), bool)
    pos = np.array([0, 1, 2, 3, 3])
    out, _ = encoder_forward(Tensor(x), range(3), mask, w, pos)
    assert max_rel(out.data, naive_encoder(x, range(3), mask, w, pos)) <= 1e-10
    with pytest.raises(ContractError):
        encoder_forward(Tensor(x), range(3), mask, w)


@pytest.mark.parametrize("layers", [1, 2, 4])
def test_prefix_rows_ignore_later_rows_under_cross_attention(layers, f64):
    rng = np.random.default_rng(layers)
    w = init_weights(_config(num_layers=layers), layers)
    n, extra = 4, 3
    x = rng.normal(size=(n + extra, 6))
    mask = np.ones((n + extra, n), bool)
    base, _ = encoder_forward(Tensor(x), range(n), mask, w)
    x2 = x.copy()
    x2[n:] = rng.normal(size=(extra, 6)) * 50
    moved, _ = encoder_forward(Tensor(x2), range(n), mask, w)
    assert max_rel(base.data[:n], moved.data[:n]) <= 1e-6


@pytest.mark.parametrize("prec", ["f32", "f64"])
def test_hidden_positions_never_affect_outputs(prec):
    rng = np.random.default_rng(21)
    with T.precision(prec):
        w = init_weights(_config(num_layers=2), 21)
        x = rng.normal(size=(6, 6))
        visible = np.array([True, True, False, True, False, True])
        mask = np.broadcast_to(visible, (6, 6))
        base, _ = encoder_forward(Tensor(x), range(6), mask, w)
        x2 = x.copy()
        x2[~visible] = rng.normal(size=(2, 6)) * 1e3
        moved, _ = encoder_forward(Tensor(x2), range(6), mask, w)
    assert max_rel(base.data[visible], moved.data[visible]) <= 1e-6


def test_encoder_rejects_wrong_token_width(f64):
    w = init_weights(_config(), 0)
    with pytest.raises(DimensionError):
        encoder_forward(Tensor(np.ones((3, 5))), range(3), np.ones((3, 3), bool), w)


def test_encoder_rejects_bad_kv_range(f64):
    w = init_weights(_config(), 0)
    with pytest.raises(ContractError):
        encoder_forward(Tensor(np.ones((3, 6))), range(0, 4), np.ones((3, 4), bool), w)


def test_config_validation():
    with pytest.raises(ContractError):
        EncoderConfig(token_dim=0, key_dim=1, ffwd_dim=1)
    with pytest.raises(ContractError):
        EncoderConfig(token_dim=1, key_dim=1, ffwd_dim=1, max_seq_len=0)


# ---------------------------------------------------------------- parameter counting


def test_unit_config_has_sixteen_parameters():
    cfg = EncoderConfig(token_dim=1, key_dim=1, ffwd_dim=1, num_heads=1, num_layers=1)
    assert param_count(cfg) == 16
    assert count_scalars(init_weights(cfg, 0)) == 16


def test_public_append_count_matches_enumeration():
    cfg = get_preset("public-append").encoder_config()
    assert param_count(cfg) == count_scalars(init_weights(cfg, 0))
    # 2 layers of 3*(16*24+24) + (24*16+16) + (16*24+24) + (24*16+16) + 4*16
    assert param_count(cfg) == 2 * (3 * (16 * 24 + 24) + (24 * 16 + 16) + (16 * 24 + 24) + (24 * 16 + 16) + 64)


def test_count_matches_enumeration_on_random_configs():
    rng = np.random.default_rng(50)
    for _ in range(50):
        d, k, f, h, l = (int(v) for v in rng.integers(1, 9, size=5))
        positional = bool(rng.integers(2))
        cfg = EncoderConfig(token_dim=d, key_dim=k, ffwd_dim=f, num_heads=h, num_layers=l,
                            max_seq_len=int(rng.integers(1, 20)), positional=positional)
        assert param_count(cfg) == count_scalars(init_weights(cfg, 0))


@pytest.mark.parametrize("field", ["key_dim", "ffwd_dim", "num_layers", "num_heads"])
def test_count_strictly_increasing(field):
    cfg = _config()
    counts = [param_count(cfg.replace(**{field: v})) for v in range(1, 8)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


# ---------------------------------------------------------------- parameter matching


def test_match_to_itself_returns_reference_dims():
    cfg = get_preset("public-append").encoder_config()
    result = match_params(cfg, cfg, default_grid(4, 64))
    assert (result.key_dim, result.ffwd_dim) == (24, 24)
    assert result.relative_gap == 0


def test_append_matched_to_public_concat_uses_wider_dims():
    concat = get_preset("public-concat").encoder_config()
    append = get_preset("public-append").encoder_config()
    for prefer in ("closest", "balanced"):
        result = match_params(concat, append, default_grid(4, 128), prefer=prefer)
        assert result.relative_gap <= 0.01
        assert max(result.key_dim, result.ffwd_dim) > 16


def test_closest_rule_is_exhaustive_minimum():
    ref = get_preset("ads-concat").encoder_config()
    tgt = get_preset("ads-append").encoder_config()
    grid = default_grid(4, 96)
    result = match_params(ref, tgt, grid, prefer="closest")
    ref_count = param_count(ref)
    best = min((abs(param_count(tgt.replace(key_dim=k, ffwd_dim=f)) - ref_count), k, f) for k, f in grid)
    assert (result.key_dim, result.ffwd_dim) == best[1:]


def test_closest_rule_breaks_ties_by_smaller_key_dim():
    # d=h=l=1: count = 7k + 3f + 6, so the reference (2, 7) has 41
    ref = EncoderConfig(token_dim=1, key_dim=2, ffwd_dim=7, num_heads=1, num_layers=1)
    assert param_count(ref) == 41
    # (3, 4) -> 39 and (1, 10) -> 43 are both 2 away
    result = match_params(ref, ref, [(3, 4), (1, 10)], prefer="closest")
    assert (result.key_dim, result.ffwd_dim) == (1, 10)


@pytest.mark.parametrize("dataset", sorted(PRESET_PAIRS))
def test_balanced_match_within_one_percent(dataset):
    append_name, concat_name = PRESET_PAIRS[dataset]
    append, concat = get_preset(append_name), get_preset(concat_name)
    result = match_params(concat.encoder_config(), append.encoder_config(), default_grid(4, 512), prefer="balanced")
    assert result.relative_gap <= 0.01
    assert result.key_dim >= concat.key_dim and result.ffwd_dim >= concat.ffwd_dim


def test_match_rejects_empty_grid_and_unknown_rule():
    cfg = _config()
    with pytest.raises(ContractError):
        match_params(cfg, cfg, [])
    with pytest.raises(ContractError):
        match_params(cfg, cfg, [(4, 4)], prefer="nearest")


# ---------------------------------------------------------------- weight files


def test_weight_file_round_trip(tmp_path, f64):
    w = init_weights(_config(positional=True), 5)
    path = tmp_path / "w.json"
    save_weights(w, path)
    loaded = load_weights(path)
    assert loaded.config == w.config
    for (n1, a), (n2, b) in zip(w.named_parameters(), loaded.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(a.data, b.data)


def test_unknown_format_version_rejected(f64):
    doc = weights_to_dict(init_weights(_config(), 0))
    doc["format_version"] = 99
    with pytest.raises(ContractError):
        weights_from_dict(json.loads(json.dumps(doc)))
