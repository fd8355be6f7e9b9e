import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hmtlrec import autograd as ag
from hmtlrec.checkpoint import Checkpoint, decode, encode
from hmtlrec.config import RunConfig, parse_config, serialize_config
from hmtlrec.data import ItemRecord, Session, augment_all, build_catalog, make_batches, split_train_valid
from hmtlrec.evaluation import CandidateSet, EvalExample, naive_rank_and_score, rank_and_score

finite = st.floats(-30, 30, allow_nan=False, width=64)


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_normalized_and_shift_invariant(x, c):
    with ag.precision(np.float64):
        p = ag.softmax(x).data
        q = ag.softmax(x + c).data
    assert abs(p.sum() - 1) < 1e-6 and (p >= 0).all()
    np.testing.assert_allclose(p, q, atol=1e-9)


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=finite), st.data())
def test_cross_entropy_nonnegative(x, data):
    t = data.draw(st.integers(0, len(x) - 1))
    with ag.precision(np.float64):
        assert ag.cross_entropy(x[None], [t]).item() >= 0


@given(st.lists(st.integers(2, 9), min_size=2, max_size=30), st.floats(0.05, 0.95), st.integers(0, 2**16))
def test_split_is_partition(lengths, fraction, seed):
    sessions = [Session(f"s{k}", tuple(range(n))) for k, n in enumerate(lengths)]
    tr, va = split_train_valid(sessions, fraction, seed)
    ids_tr, ids_va = {s.session_id for s in tr}, {s.session_id for s in va}
    assert not ids_tr & ids_va and len(ids_tr | ids_va) == len(sessions)
    assert abs(len(va) - fraction * len(sessions)) <= 1 or len(va) in (1, len(sessions) - 1)


@given(st.lists(st.lists(st.integers(0, 9), min_size=1, max_size=25), min_size=1, max_size=10),
       st.integers(1, 8), st.integers(1, 7), st.integers(0, 99))
def test_augmentation_counts_and_batches(seqs, max_len, batch_size, seed):
    catalog, _ = build_catalog([ItemRecord(f"i{k}", (f"c{k % 3}",)) for k in range(10)], 1)
    sessions = [Session(f"s{k}", tuple(s)) for k, s in enumerate(seqs)]
    ex = augment_all(sessions, catalog, max_len)
    assert len(ex) == sum(len(s) - 1 for s in seqs)
    seen = 0
    for b in make_batches(ex, batch_size, seed, catalog.pad, 1):
        assert b.mask.any(axis=1).all()
        assert ((b.items == catalog.pad) == ~b.mask).all()
        seen += len(b)
    assert seen == len(ex)


@given(st.data())
@settings(max_examples=200)
def test_rank_and_score_equals_naive(data):
    n = data.draw(st.integers(1, 100))
    scores = np.array(data.draw(st.lists(st.integers(-3, 3), min_size=n, max_size=n)), dtype=float)
    cand = sorted(data.draw(st.sets(st.integers(0, n - 1), min_size=1)))
    gt = data.draw(st.integers(0, n - 1))
    future = (gt, *data.draw(st.lists(st.integers(0, n - 1), max_size=4)))
    k = data.draw(st.integers(1, 25))
    got = rank_and_score(scores, CandidateSet(np.array(cand)), EvalExample((0,), gt, future), k)
    assert (got.mrr, got.hit, got.recall) == naive_rank_and_score(scores, cand, gt, future, k)
    assert 0 <= got.mrr <= got.hit <= 1 and 0 <= got.recall <= 1


safe_text = st.text(st.characters(blacklist_categories=("Cs", "Cc", "Zl", "Zp")), max_size=12).map(str.strip)


@given(safe_text, st.integers(1, 8).map(lambda k: 8 * k), st.floats(0, 10, allow_nan=False), st.booleans(),
       st.sampled_from(["hierarchical", "flat-mtl", "single-task"]), st.sampled_from(["\t", ",", ";", "|"]))
def test_config_round_trip(path, dim, weight, positional, mode, delim):
    cfg = RunConfig()
    cfg.data.events = path.replace("#", "")
    cfg.model.d_item = dim
    cfg.loss.projection_weight = weight
    cfg.model.positional = positional
    cfg.train.mode = mode
    cfg.data.delimiter = delim
    assert parse_config(serialize_config(cfg)) == cfg


@given(st.dictionaries(st.text(min_size=1, max_size=10), hnp.arrays(
    st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
    max_size=4))
def test_checkpoint_encoding_lossless(tensors):
    tensors = {k.replace("/", "_"): v for k, v in tensors.items()}
    ck = Checkpoint("x = 1", "a", "b", tensors)
    back = decode(encode(ck))
    assert set(back.tensors) == set(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
