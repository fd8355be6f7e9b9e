import math

import numpy as np
import pytest

from hmtlrec import autograd as ag
from hmtlrec.data import ItemRecord, build_catalog
from hmtlrec.encoder import (
    EncoderConfig, ItemFeatures, embed_item, encode_session, init_encoder, init_layer, self_attention,
)


def _setup(positional=True, d=8, heads=2, layers=2, seed=0, titles=True):
    recs = [ItemRecord(f"i{k}", (f"a{k % 3}", f"b{k % 2}"), f"tok{k} common" if titles and k % 4 else "")
            for k in range(12)]
    catalog, tax = build_catalog(recs, 2, metadata_vocab=50)
    cfg = EncoderConfig(d, d, d, layers=layers, heads=heads, max_len=8, positional=positional)
    rng = np.random.default_rng(seed)
    with ag.precision(np.float64):
        params = init_encoder(rng, catalog.item_count, tax.sizes, catalog.metadata_vocab, cfg)
    # O(1) weights so that differences are visible
    for p in params.parameters():
        p.data[...] = rng.normal(size=p.shape) * 0.3 + (1.0 if "gain" in p.name else 0.0)
    return catalog, tax, cfg, params, ItemFeatures(catalog, tax.sizes)


def test_input_width_for_default_dims():
    assert EncoderConfig(128, 128, 128).width == 384
    with pytest.raises(ValueError):
        EncoderConfig(10, 10, 10, heads=8).validate()


def test_embed_item_layout():
    catalog, tax, cfg, params, feats = _setup()
    with ag.precision(np.float64):
        v = embed_item(1, 2, params, feats, cfg)
    cats = catalog.categories[1]
    expect_cat = params.categories[0].data[cats[0]] + params.categories[1].data[cats[1]]
    toks = catalog.tokens(1)
    expect = np.concatenate([params.item.data[1], expect_cat, params.metadata.data[toks].mean(axis=0)])
    np.testing.assert_allclose(v, expect + params.position.data[2], rtol=1e-12)


def test_item_without_tokens_has_zero_metadata():
    catalog, tax, cfg, params, feats = _setup(positional=False)
    assert len(catalog.tokens(0)) == 0
    with ag.precision(np.float64):
        v = embed_item(0, 0, params, feats, cfg)
    assert (v[16:] == 0.0).all()


def test_category_embeddings_cancel():
    catalog, tax, cfg, params, feats = _setup(positional=False)
    a, b = catalog.categories[5]
    vec = np.random.default_rng(1).normal(size=8)
    params.categories[0].data[a] = vec
    params.categories[1].data[b] = -vec
    with ag.precision(np.float64):
        v = embed_item(5, 0, params, feats, cfg)
    assert (v[8:16] == 0.0).all()


def test_embed_item_rejects_bad_index():
    catalog, tax, cfg, params, feats = _setup()
    with pytest.raises(IndexError):
        embed_item(catalog.item_count, 0, params, feats, cfg)
    with pytest.raises(IndexError):
        embed_item(0, cfg.max_len, params, feats, cfg)


def test_single_position_attention():
    rng = np.random.default_rng(2)
    layer = init_layer(rng, 4, 4, "l")
    x = rng.normal(size=(1, 1, 4))
    with ag.precision(np.float64):
        out, w = self_attention(ag.Tensor(x), np.ones((1, 1), bool), layer, 2)
    np.testing.assert_array_equal(w.data, np.ones((1, 2, 1, 1)))
    v = x @ layer.wv.data + layer.bv.data
    np.testing.assert_allclose(out.data, v @ layer.wo.data + layer.bo.data, rtol=1e-6)


def test_attention_two_positions_one_head_oracle():
    rng = np.random.default_rng(3)
    D = 3
    with ag.precision(np.float64):
        layer = init_layer(rng, D, 4, "l")
    for p in layer.parameters():
        p.data[...] = rng.normal(size=p.shape) * 0.5
    x = rng.normal(size=(2, D))
    with ag.precision(np.float64):
        out, _ = self_attention(ag.Tensor(x[None]), np.ones((1, 2), bool), layer, 1)
    q = x @ layer.wq.data + layer.bq.data
    k = x @ layer.wk.data + layer.bk.data
    v = x @ layer.wv.data + layer.bv.data
    ref = np.zeros((2, D))
    for i in range(2):
        s = [sum(q[i, c] * k[j, c] for c in range(D)) / math.sqrt(D) for j in range(2)]
        e = [math.exp(t) for t in s]
        a = [t / sum(e) for t in e]
        mixed = a[0] * v[0] + a[1] * v[1]
        ref[i] = mixed @ layer.wo.data + layer.bo.data
    np.testing.assert_allclose(out.data[0], ref, atol=1e-5)


def test_masked_positions_do_not_leak():
    rng = np.random.default_rng(4)
    layer = init_layer(rng, 4, 4, "l")
    x = rng.normal(size=(1, 3, 4))
    mask = np.array([[False, True, False]])
    with ag.precision(np.float64):
        out, w = self_attention(ag.Tensor(x), mask, layer, 2)
        x2 = x.copy()
        x2[0, [0, 2]] = rng.normal(size=(2, 4)) * 10
        out2, _ = self_attention(ag.Tensor(x2), mask, layer, 2)
    assert (w.data[..., [0, 2]] == 0).all()
    np.testing.assert_array_equal(out.data[0, 1], out2.data[0, 1])


def test_single_item_prefix_pools_to_its_output():
    catalog, tax, cfg, params, feats = _setup()
    with ag.precision(np.float64):
        enc = encode_session(np.array([[3]]), np.ones((1, 1), bool), params, feats, cfg)
    np.testing.assert_array_equal(enc.z_final.data[0], enc.outputs.data[0, 0])


def test_identical_items_without_positions():
    catalog, tax, cfg, params, feats = _setup(positional=False)
    with ag.precision(np.float64):
        enc = encode_session(np.array([[5, 5]]), np.ones((1, 2), bool), params, feats, cfg)
    np.testing.assert_allclose(enc.outputs.data[0, 0], enc.outputs.data[0, 1], rtol=1e-12)
    np.testing.assert_allclose(enc.z_final.data[0], enc.outputs.data[0, 0], rtol=1e-12)


def test_permutation_invariance_without_positions():
    catalog, tax, cfg, params, feats = _setup(positional=False)
    for p in params.parameters():
        p.data = p.data.astype(np.float32)
    rng = np.random.default_rng(5)
    for _ in range(20):
        seq = rng.integers(catalog.item_count, size=(1, 6))
        perm = seq[:, rng.permutation(6)]
        a = encode_session(seq, np.ones((1, 6), bool), params, feats, cfg).z_final.data
        b = encode_session(perm, np.ones((1, 6), bool), params, feats, cfg).z_final.data
        np.testing.assert_allclose(a, b, atol=1e-5)


def test_positions_break_permutation_symmetry():
    catalog, tax, cfg, params, feats = _setup(positional=True)
    with ag.precision(np.float64):
        a = encode_session(np.array([[1, 2, 3]]), np.ones((1, 3), bool), params, feats, cfg).z_final.data
        b = encode_session(np.array([[3, 2, 1]]), np.ones((1, 3), bool), params, feats, cfg).z_final.data
    assert not np.allclose(a, b)


def test_padding_changes_nothing():
    catalog, tax, cfg, params, feats = _setup()
    pad = catalog.pad
    with ag.precision(np.float64):
        short = encode_session(np.array([[1, 4, 2]]), np.ones((1, 3), bool), params, feats, cfg).z_final.data
        items = np.array([[1, 4, 2, pad, pad, pad]])
        long = encode_session(items, items != pad, params, feats, cfg).z_final.data
    assert np.max(np.abs(short - long)) == 0.0


def test_all_masked_rejected():
    catalog, tax, cfg, params, feats = _setup()
    with pytest.raises(ValueError):
        encode_session(np.array([[1, 2]]), np.zeros((1, 2), bool), params, feats, cfg)


def test_z_final_finite_for_all_items():
    catalog, tax, cfg, params, feats = _setup()
    items = np.arange(catalog.item_count).reshape(-1, 1)
    enc = encode_session(items, np.ones_like(items, bool), params, feats, cfg)
    assert np.isfinite(enc.z_final.data).all() and enc.z_final.shape == (catalog.item_count, 24)


def test_pad_row_gets_no_gradient():
    catalog, tax, cfg, params, feats = _setup()
    pad = catalog.pad
    items = np.array([[1, 2, pad], [3, pad, pad]])
    with ag.precision(np.float64):
        enc = encode_session(items, items != pad, params, feats, cfg)
        ag.sum_all(enc.z_final).backward()
    assert (params.item.grad[pad] == 0).all()
