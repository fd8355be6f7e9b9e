import json
import shutil

import numpy as np
import pytest

from hmtlrec import autograd as ag
from hmtlrec.checkpoint import (
    Checkpoint, CheckpointCorruptError, CheckpointVersionError, FingerprintMismatchError, decode, encode,
    load_checkpoint, save_checkpoint,
)
from hmtlrec.config import ConfigError, RunConfig, load_config, parse_config, serialize_config
from hmtlrec.workflows import model_from_checkpoint, run_evaluate, run_train


# ---------------------------------------------------------------- config


def test_config_round_trip():
    cfg = RunConfig()
    cfg.data.events = "/tmp/ev.tsv"
    cfg.data.cat_columns = ("cat_1", "cat_2")
    cfg.data.levels = 2
    cfg.data.delimiter = ","
    cfg.loss.category_weight = 0.25
    cfg.model.positional = False
    cfg.train.mode = "flat-mtl"
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_config_default_tab_delimiter_round_trips():
    cfg = RunConfig()
    assert "data.delimiter = \\t" in serialize_config(cfg)
    assert parse_config(serialize_config(cfg)).data.delimiter == "\t"


def test_config_defaults_match_published_settings():
    cfg = RunConfig()
    assert (cfg.optim.batch_size, cfg.optim.lr) == (1024, 1e-4)
    assert (cfg.model.d_item, cfg.model.d_category, cfg.model.d_metadata) == (128, 128, 128)
    assert (cfg.model.layers, cfg.model.heads) == (2, 8)
    assert (cfg.loss.category_weight, cfg.loss.projection_weight) == (1.0, 1.0)


@pytest.mark.parametrize("text, key, line", [
    ("model.d_item = 12\nmodel.nope = 3\n", "model.nope", 2),
    ("train.epochs = many\n", "train.epochs", 1),
    ("# c\n\ntrain.mode = deep\n", "train.mode", None),
    ("model.heads = 5\n", None, None),
    ("optim.lr = 1\noptim.lr = 2\n", "optim.lr", 2),
])
def test_config_errors_name_field_and_line(text, key, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    if key:
        assert err.value.key == key
    if line:
        assert err.value.line == line


def test_config_paths_relative_to_file(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "ev.tsv").write_text("session_id\titem_id\ttimestamp\n")
    (tmp_path / "d" / "it.tsv").write_text("item_id\tcat_1\ttitle\n")
    (tmp_path / "run.cfg").write_text("data.events = d/ev.tsv\ndata.items = d/it.tsv\n")
    cfg = load_config(tmp_path / "run.cfg")
    assert cfg.data.events == str(tmp_path / "d" / "ev.tsv")
    (tmp_path / "bad.cfg").write_text("data.events = d/missing.tsv\ndata.items = d/it.tsv\n")
    with pytest.raises(ConfigError) as err:
        load_config(tmp_path / "bad.cfg")
    assert err.value.key == "data.events"


# ---------------------------------------------------------------- checkpoint format


def _ckpt(seed=0):
    rng = np.random.default_rng(seed)
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b.c": rng.normal(size=5).astype(np.float32)}
    return Checkpoint("train.seed = 1\n", "f" * 64, "e" * 64, tensors, 7, {"lr": 0.001, "beta1": 0.9,
                      "beta2": 0.999, "eps": 1e-8}, {"a": np.ones((3, 4), np.float32)},
                      {"a": np.full((3, 4), 2.0, np.float32)}, epoch=2, best_valid_mrr=0.25,
                      trainer={"best_epoch": 2, "bad_epochs": 0})


def test_checkpoint_round_trip_bitwise(tmp_path):
    ck = _ckpt()
    save_checkpoint(tmp_path / "x.ckpt", ck)
    back = load_checkpoint(tmp_path / "x.ckpt")
    for k, v in ck.tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].dtype == v.dtype
    assert back.adam_m["a"].tobytes() == ck.adam_m["a"].tobytes()
    assert (back.adam_step, back.epoch, back.best_valid_mrr, back.config) == (7, 2, 0.25, ck.config)
    assert encode(back) == encode(ck)


def test_checkpoint_truncation_and_corruption():
    raw = encode(_ckpt())
    with pytest.raises(CheckpointCorruptError) as err:
        decode(raw[:-1])
    assert err.value.exit_code == 4
    flipped = bytearray(raw)
    flipped[40] ^= 0xFF
    with pytest.raises(CheckpointCorruptError):
        decode(bytes(flipped))
    with pytest.raises(CheckpointCorruptError):
        decode(b"NOTACKPT" + raw[8:])


def test_checkpoint_version_error():
    raw = bytearray(encode(_ckpt()))
    raw[8:12] = (99).to_bytes(4, "little")
    with pytest.raises(CheckpointVersionError) as err:
        decode(bytes(raw))
    assert err.value.exit_code == 3


def test_distinct_exit_codes():
    codes = {CheckpointCorruptError.exit_code, CheckpointVersionError.exit_code,
             FingerprintMismatchError.exit_code}
    assert len(codes) == 3


def test_save_is_atomic(tmp_path, monkeypatch):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, _ckpt(0))
    good = path.read_bytes()
    import hmtlrec.checkpoint as mod

    def boom(*a, **k):
        raise RuntimeError("disk full")
    monkeypatch.setattr(mod.os, "replace", boom)
    with pytest.raises(RuntimeError):
        save_checkpoint(path, _ckpt(1))
    assert path.read_bytes() == good
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]


# ---------------------------------------------------------------- training workflows


@pytest.fixture(scope="module")
def sample_cfg(tmp_path_factory):
    from hmtlrec.synthetic import write_sample
    d = tmp_path_factory.mktemp("sample")
    paths = write_sample(d, n_sessions=120, seed=1)
    cfg = load_config(paths["config"])
    cfg.train.epochs = 2
    cfg.train.log_every = 1
    return cfg


def test_same_config_gives_identical_checkpoints(sample_cfg, tmp_path):
    a = run_train(sample_cfg, tmp_path / "a")
    b = run_train(sample_cfg, tmp_path / "b")
    assert a.best_checkpoint.read_bytes() == b.best_checkpoint.read_bytes()
    assert a.last_checkpoint.read_bytes() == b.last_checkpoint.read_bytes()


def test_resume_equals_uninterrupted(sample_cfg, tmp_path):
    full = run_train(sample_cfg, tmp_path / "full", max_epochs=2)
    part = run_train(sample_cfg, tmp_path / "part", max_epochs=1)
    resumed = run_train(sample_cfg, tmp_path / "part", resume=part.last_checkpoint, max_epochs=2)
    assert resumed.epochs == 2
    assert resumed.last_checkpoint.read_bytes() == full.last_checkpoint.read_bytes()


def test_run_log_starts_with_resolved_config(sample_cfg, tmp_path):
    res = run_train(sample_cfg, tmp_path / "r")
    records = [json.loads(line) for line in res.log_path.read_text().splitlines()]
    assert records[0]["event"] == "config"
    assert records[0]["config"]["optim"]["batch_size"] == sample_cfg.optim.batch_size
    assert records[0]["config"]["model"]["ff_mult"] == 4
    assert sum(r["event"] == "epoch" for r in records) == 2
    steps = [r for r in records if r["event"] == "step"]
    assert steps and {"L_next", "L_C1", "L_C2", "L_final", "epoch", "step"} <= set(steps[0])
    data = next(r for r in records if r["event"] == "data")
    assert "unresolved_events" in data["train_events"]


def test_loaded_model_forward_is_bitwise(sample_cfg, tmp_path):
    res = run_train(sample_cfg, tmp_path / "r", max_epochs=1)
    ckpt = load_checkpoint(res.last_checkpoint)
    _, m1 = model_from_checkpoint(ckpt)
    save_checkpoint(tmp_path / "copy.ckpt", ckpt)
    _, m2 = model_from_checkpoint(load_checkpoint(tmp_path / "copy.ckpt"))
    items = np.array([[1, 2, 3], [4, 5, m1.catalog.pad]])
    with ag.no_grad():
        a = m1.forward(items, items != m1.catalog.pad).item_scores.data
        b = m2.forward(items, items != m2.catalog.pad).item_scores.data
    assert a.tobytes() == b.tobytes()


def test_fingerprint_mismatch(sample_cfg, tmp_path):
    res = run_train(sample_cfg, tmp_path / "r", max_epochs=1)
    items = tmp_path / "items_changed.tsv"
    shutil.copy(sample_cfg.data.items, items)
    lines = items.read_text().splitlines()
    lines[1] = lines[1].replace("cat", "kat", 1)
    items.write_text("\n".join(lines) + "\n")
    ckpt = load_checkpoint(res.last_checkpoint)
    ckpt.config = ckpt.config.replace(sample_cfg.data.items, str(items))
    save_checkpoint(tmp_path / "moved.ckpt", ckpt)
    with pytest.raises(FingerprintMismatchError):
        run_evaluate(tmp_path / "moved.ckpt")
