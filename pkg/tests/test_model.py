import math

import numpy as np
import pytest

from hmtlrec import autograd as ag
from hmtlrec.data import augment_all, collate, ingest_events, build_catalog
from hmtlrec.encoder import EncoderConfig
from hmtlrec.gradcheck import model_check, tiny_model
from hmtlrec.model import (
    HeadOptions, LossWeights, Mode, Recommender, combined_loss, init_heads, predict_categories,
    predict_next_item, project_category_predictions, train_step,
)
from hmtlrec.synthetic import toy_dataset


def _heads(D=4, n_items=6, sizes=(2, 3), seed=0, bias=False):
    rng = np.random.default_rng(seed)
    with ag.precision(np.float64):
        h = init_heads(rng, D, n_items, sizes, proj_bias=bias)
    for p in h.parameters():
        p.data[...] = rng.normal(size=p.shape)
    return h


def test_zero_category_heads_give_zero_scores():
    h = _heads()
    for p in h.category_parameters():
        p.data[...] = 0
    z = ag.Tensor(np.random.default_rng(1).normal(size=(2, 4)))
    assert all((p.data == 0).all() for p in predict_categories(z, h))


def test_identity_category_head():
    h = _heads(D=3, sizes=(2,))       # 2 categories + UNKNOWN = 3 outputs
    h.category_w[0].data[...] = np.eye(3)
    h.category_b[0].data[...] = 0
    z = np.random.default_rng(2).normal(size=(1, 3))
    with ag.precision(np.float64):
        np.testing.assert_array_equal(predict_categories(ag.Tensor(z), h)[0].data, z)


def test_projection_linear_and_zero():
    h = _heads()
    p = [ag.Tensor(np.zeros((1, 3))), ag.Tensor(np.zeros((1, 4)))]
    assert all((e.data == 0).all() for e in project_category_predictions(p, h))
    rng = np.random.default_rng(3)
    scores = [ag.Tensor(rng.normal(size=(2, 3))), ag.Tensor(rng.normal(size=(2, 4)))]
    one = project_category_predictions(scores, h)
    two = project_category_predictions([ag.scale(s, 2.0) for s in scores], h)
    for a, b in zip(one, two):
        np.testing.assert_allclose(b.data, 2 * a.data, rtol=1e-12)


def test_projection_with_bias_at_zero_scores():
    h = _heads(bias=True)
    out = project_category_predictions([ag.Tensor(np.zeros((1, 3))), ag.Tensor(np.zeros((1, 4)))], h)
    np.testing.assert_array_equal(out[0].data[0], h.proj_b[0].data)


def test_next_item_formula_oracle():
    h = _heads(D=4, n_items=6, sizes=(2, 3))
    rng = np.random.default_rng(4)
    z = rng.normal(size=(1, 4))
    with ag.precision(np.float64):
        scores = predict_categories(ag.Tensor(z), h)
        proj = project_category_predictions(scores, h)
        p_next = predict_next_item(ag.Tensor(z), proj, 1.0, h).data[0]
    p1 = z[0] @ h.category_w[0].data + h.category_b[0].data
    p2 = z[0] @ h.category_w[1].data + h.category_b[1].data
    hidden = z[0] + p1 @ h.proj_w[0].data + p2 @ h.proj_w[1].data
    ref = [sum(hidden[d] * h.item_w.data[d, i] for d in range(4)) + h.item_b.data[i] for i in range(6)]
    np.testing.assert_allclose(p_next, ref, atol=1e-6)


def test_lambda_zero_boundary():
    h = _heads()
    z = ag.Tensor(np.random.default_rng(5).normal(size=(3, 4)))
    proj = project_category_predictions(predict_categories(z, h), h)
    flat = predict_next_item(z, [], 0.0, h).data
    assert np.array_equal(predict_next_item(z, proj, 0.0, h).data, flat)
    zeros = [ag.Tensor(np.zeros_like(e.data)) for e in proj]
    assert np.array_equal(predict_next_item(z, zeros, 1.0, h).data, flat)


def test_combined_loss():
    t = lambda v: ag.Tensor(np.array(v))
    assert combined_loss(t(2.0), [t(0.5), t(0.5)], 1.0).item() == 3.0
    assert combined_loss(t(2.0), [t(0.5), t(0.5)], 0.0).item() == 2.0
    vals = [combined_loss(t(2.0), [t(0.25), t(0.5)], lam).item() for lam in (0.0, 0.5, 1.0, 2.0)]
    np.testing.assert_allclose(np.diff(vals) / np.diff([0.0, 0.5, 1.0, 2.0]), 0.75)


def test_uniform_losses():
    with ag.precision(np.float64):
        assert ag.cross_entropy(np.zeros((1, 1200)), [7]).item() == pytest.approx(math.log(1200), abs=1e-9)
        assert ag.cross_entropy(np.zeros((1, 117000)), [0]).item() == pytest.approx(11.670, abs=1e-3)


def test_losses_at_uniform_output_init(small_model):
    # zeroed output heads give uniform predictions: every loss is ln(class count)
    m = small_model
    for p in m.heads.parameters():
        p.data[...] = 0
    items = np.array([[1, 2, 3], [4, 5, m.catalog.pad]])
    tg = np.array([6, 7])
    with ag.precision(np.float64):
        out = m.forward(items, items != m.catalog.pad, Mode.HIERARCHICAL, LossWeights(), tg,
                        m.catalog.categories[tg])
    assert out.item_loss.item() == pytest.approx(math.log(m.catalog.item_count), abs=1e-3)
    for loss, n in zip(out.category_losses, m.taxonomy.sizes):
        assert loss.item() == pytest.approx(math.log(n + 1), abs=1e-3)


def _toy_batch():
    recs, events = toy_dataset(0)
    catalog, tax = build_catalog(recs, 1)
    sessions = ingest_events(events, catalog)
    ex = augment_all(sessions, catalog)
    return catalog, tax, collate(ex, catalog.pad, 1)


def test_lr_zero_leaves_parameters():
    catalog, tax, batch = _toy_batch()
    m = Recommender(catalog, tax, EncoderConfig(8, 8, 8, heads=2), seed=0)
    before = {p.name: p.data.copy() for p in m.parameters()}
    train_step(m, batch, ag.AdamState(lr=0.0))
    assert all(np.array_equal(before[p.name], p.data) for p in m.parameters())


def test_single_task_gives_category_heads_zero_gradient():
    catalog, tax, batch = _toy_batch()
    m = Recommender(catalog, tax, EncoderConfig(8, 8, 8, heads=2), seed=0)
    report = train_step(m, batch, ag.AdamState(lr=1e-3), mode=Mode.SINGLE)
    assert set(report) == {"L_next", "L_final"}
    for p in m.heads.category_parameters() + m.heads.projection_parameters():
        assert (p.grad == 0).all()


def test_hierarchical_routes_item_loss_into_category_heads():
    catalog, tax, batch = _toy_batch()
    m = Recommender(catalog, tax, EncoderConfig(8, 8, 8, heads=2), seed=0)
    # only the item loss: category heads still receive gradient through the projection
    train_step(m, batch, ag.AdamState(lr=1e-3), weights=LossWeights(category=0.0, projection=1.0))
    assert np.abs(m.heads.category_w[0].grad).sum() > 0
    m2 = Recommender(catalog, tax, EncoderConfig(8, 8, 8, heads=2), seed=0,
                     head_options=HeadOptions(detach_category_scores=True))
    train_step(m2, batch, ag.AdamState(lr=1e-3), weights=LossWeights(category=0.0, projection=1.0))
    assert (m2.heads.category_w[0].grad == 0).all()


def test_flat_mode_ignores_projection():
    catalog, tax, batch = _toy_batch()
    m = Recommender(catalog, tax, EncoderConfig(8, 8, 8, heads=2), seed=0)
    train_step(m, batch, ag.AdamState(lr=1e-3), mode=Mode.FLAT)
    assert all((p.grad == 0).all() for p in m.heads.projection_parameters())
    assert np.abs(m.heads.category_w[0].grad).sum() > 0


def test_step_report_components():
    catalog, tax, batch = _toy_batch()
    m = Recommender(catalog, tax, EncoderConfig(8, 8, 8, heads=2), seed=0)
    r = train_step(m, batch, ag.AdamState(lr=1e-3), weights=LossWeights(0.5, 1.0))
    assert r["L_final"] == pytest.approx(r["L_next"] + 0.5 * r["L_C1"], rel=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts():
    from hmtlrec.model import NonFiniteLossError
    catalog, tax, batch = _toy_batch()
    m = Recommender(catalog, tax, EncoderConfig(8, 8, 8, heads=2), seed=0)
    m.heads.item_b.data[0] = np.inf
    with pytest.raises(NonFiniteLossError):
        train_step(m, batch, ag.AdamState())


def test_parameter_names_unique(small_model):
    names = list(small_model.named_parameters())
    assert len(names) == len(set(names))
    assert "heads.proj.1.w" in names and "encoder.layer.1.wq" in names


@pytest.mark.parametrize("mode", list(Mode))
def test_full_model_gradient_check(mode):
    report = model_check(mode, n_probes=150, seed=1)
    assert report.passed, report.summary()


def test_gradient_check_covers_every_group():
    report = model_check(Mode.HIERARCHICAL, n_probes=600)
    groups = {n.split(".")[0] + "." + n.split(".")[1] for n in report.params_covered()}
    assert {"encoder.item", "encoder.category", "encoder.metadata", "encoder.position", "encoder.layer",
            "heads.category", "heads.proj", "heads.item"} <= groups
    assert report.passed
