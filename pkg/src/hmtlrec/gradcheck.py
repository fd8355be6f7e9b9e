"""Finite-difference verification suite for every differentiable op and the full model."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import GradCheckReport, Parameter
from .data import ItemRecord, build_catalog
from .encoder import EncoderConfig, init_layer, self_attention, transformer_layer
from .model import LossWeights, Mode, Recommender

TINY_ITEMS = 50
TINY_LEVELS = (4, 7)


def _p(rng, *shape, name="x", scale=1.0) -> Parameter:
    return Parameter(rng.normal(size=shape) * scale, name=name)


class _Readout:
    """Contract an op's output with fixed random weights so every element gets its own sensitivity."""

    def __init__(self, seed: int):
        self.seed = seed
        self.weights = None

    def __call__(self, out):
        if self.weights is None:
            self.weights = np.random.default_rng(self.seed).normal(size=out.shape)
        return ag.sum_all(ag.mul(out, ag.Tensor(self.weights)))


def op_cases(rng: np.random.Generator):
    """(name, loss_fn, params) for each primitive on random shapes of at most 8 per dimension."""
    dims = lambda k: [int(d) for d in rng.integers(2, 9, size=k)]
    cases = []

    b, i, o = dims(3)
    x, w, bias = _p(rng, b, i, name="x"), _p(rng, i, o, name="w"), _p(rng, o, name="b")
    cases.append(("affine", lambda r=_Readout(1): r(ag.affine(x, w, bias)), [x, w, bias]))

    b, l, d = dims(3)
    a3, w2 = _p(rng, b, l, d, name="a"), _p(rng, d, d, name="w")
    cases.append(("matmul-batched", lambda r=_Readout(2): r(ag.matmul(a3, w2)), [a3, w2]))

    u, v = _p(rng, b, d, name="u"), _p(rng, d, name="v")
    cases.append(("add-mul-broadcast",
                  lambda r=_Readout(3): r(ag.mul(ag.add(u, v), ag.scale(u, 0.5))), [u, v]))

    table = _p(rng, 8, d, name="table")
    idx = rng.integers(8, size=(b, l))
    cases.append(("embedding", lambda r=_Readout(4): r(ag.embedding(table, idx)), [table]))

    bag_idx = rng.integers(8, size=12)
    segs = np.sort(rng.integers(5, size=12))
    weights = rng.uniform(0.1, 1.0, size=12)
    cases.append(("embedding-bag-mean",
                  lambda r=_Readout(5): r(ag.embedding_bag_mean(table, bag_idx, segs, weights, 5)),
                  [table]))

    c1, c2 = _p(rng, b, l, 3, name="c1"), _p(rng, b, l, 4, name="c2")
    cases.append(("concat", lambda r=_Readout(6): r(ag.concat([c1, c2])), [c1, c2]))

    t4 = _p(rng, b, l, 2, 3, name="t")
    cases.append(("reshape-transpose",
                  lambda r=_Readout(7): r(ag.reshape(ag.transpose(t4, (0, 2, 1, 3)), (b, -1))),
                  [t4]))

    rx = _p(rng, b, d, name="x")
    # shift values off zero so probes rarely straddle the kink
    rx.data += np.sign(rx.data) * 0.01
    cases.append(("relu", lambda r=_Readout(8): r(ag.relu(rx)), [rx]))

    lx, lg, lb = _p(rng, b, l, d, name="x"), _p(rng, d, name="gain"), _p(rng, d, name="bias")
    cases.append(("layer-norm", lambda r=_Readout(9): r(ag.layer_norm(lx, lg, lb)), [lx, lg, lb]))

    sx = _p(rng, b, l, l, name="scores")
    smask = rng.random((b, 1, l)) < 0.7
    smask[..., 0] = True
    cases.append(("masked-softmax",
                  lambda r=_Readout(10): r(ag.masked_softmax(sx, smask)), [sx]))

    mx = _p(rng, b, l, d, name="x")
    mmask = rng.random((b, l)) < 0.6
    mmask[:, 0] = True
    cases.append(("masked-mean", lambda r=_Readout(11): r(ag.masked_mean(mx, mmask)), [mx]))

    logits = _p(rng, b, o, name="logits")
    targets = rng.integers(o, size=b)
    cases.append(("cross-entropy", lambda: ag.cross_entropy(logits, targets), [logits]))

    heads = 2
    width = heads * int(rng.integers(2, 5))
    layer = init_layer(rng, width, 4, "layer")
    for p in layer.parameters():
        p.data[...] = rng.normal(size=p.shape) * 0.5 + (1.0 if "gain" in p.name else 0.0)
    ax = _p(rng, b, l, width, name="x")
    amask = rng.random((b, l)) < 0.7
    amask[:, 0] = True
    cases.append(("self-attention",
                  lambda r=_Readout(12): r(self_attention(ax, amask, layer, heads)[0]),
                  [ax, *layer.parameters()]))
    cases.append(("transformer-layer",
                  lambda r=_Readout(13): r(transformer_layer(ax, amask, layer, heads)),
                  [ax, *layer.parameters()]))
    return cases


def tiny_model(seed: int = 0, mode_scale: float = 0.5) -> tuple[Recommender, dict]:
    """D = 12, T = 2, |I| = 50, |C_1| = 4, |C_2| = 7 model in float64 with a batch of 3.

    Parameters are redrawn at O(1) scale: at the default small init the
    layer-norm inputs are so small that a 1e-4 central-difference step is far
    outside the locally quadratic region.
    """
    rng = np.random.default_rng(seed)
    records = [ItemRecord(f"i{i}", (f"a{i % TINY_LEVELS[0]}", f"b{i % TINY_LEVELS[1]}"),
                          " ".join(f"w{j}" for j in range(i % 4)))
               for i in range(TINY_ITEMS)]
    catalog, taxonomy = build_catalog(records, 2, metadata_vocab=32)
    with ag.precision(np.float64):
        model = Recommender(catalog, taxonomy, EncoderConfig(4, 4, 4, layers=2, heads=2, max_len=5), seed=seed)
    for p in model.parameters():
        embedding = p.name.startswith("encoder.") and ".layer." not in p.name
        p.data[...] = rng.normal(size=p.shape) * (1.0 if embedding else mode_scale)
        if "gain" in p.name:
            p.data += 1.0
    pad = catalog.pad
    items = np.array([[1, 2, 3, pad, pad], [4, 5, pad, pad, pad], [7, 8, 9, 10, 11]])
    targets = np.array([3, 40, 12])
    batch = {"items": items, "mask": items != pad, "targets": targets,
             "target_categories": catalog.categories[targets]}
    return model, batch


def model_check(mode: Mode | str = Mode.HIERARCHICAL, n_probes: int = 600, seed: int = 0) -> GradCheckReport:
    model, batch = tiny_model(seed)

    def loss():
        return model.forward(batch["items"], batch["mask"], mode, LossWeights(1.0, 1.0),
                             batch["targets"], batch["target_categories"]).final_loss

    params = model.parameters()
    if Mode(mode) is Mode.SINGLE:
        params = model.encoder.parameters() + [model.heads.item_w, model.heads.item_b]
    elif Mode(mode) is Mode.FLAT:
        params = [p for p in params if not p.name.startswith("heads.proj")]
    return ag.finite_difference_check(loss, params, n_probes=n_probes, tolerance=1e-3, step=1e-4, seed=seed)


def run_suite(n_probes: int = 600, seed: int = 0, op_probes: int = 100) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    results = []
    with ag.precision(np.float64):
        for name, fn, params in op_cases(rng):
            results.append((name, ag.finite_difference_check(fn, params, n_probes=op_probes, seed=seed)))
    results.append(("model/hierarchical", model_check(Mode.HIERARCHICAL, n_probes, seed)))
    results.append(("model/flat-mtl", model_check(Mode.FLAT, max(100, n_probes // 3), seed)))
    results.append(("model/single-task", model_check(Mode.SINGLE, max(100, n_probes // 3), seed)))
    return results
