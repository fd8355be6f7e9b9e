"""End-to-end train / evaluate / predict workflows shared by the CLI and tests."""

from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint, FingerprintMismatchError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_dict, parse_config, serialize_config
from .data import (CategoryTaxonomy, IngestStats, ItemCatalog, Session, augment_all, build_catalog,
                   catalog_fingerprint, chronological_split, dataset_summary, ingest_events,
                   read_events_file, read_items_file, split_train_valid, taxonomy_fingerprint)
from .evaluation import CandidatePolicy, MetricsReport, eval_examples, evaluate, top_categories
from .model import Recommender
from .train import RunLog, TrainSettings, Trainer

logger = logging.getLogger(__name__)

PINNED_ARCHITECTURE = {
    "normalization": "post-norm",
    "ff_width": "4x model width",
    "activation": "relu",
    "pooling": "mean over valid positions",
    "batch_loss": "mean",
    "projection_input": "raw category logits",
}


@dataclass
class Dataset:
    catalog: ItemCatalog
    taxonomy: CategoryTaxonomy
    train: list[Session]
    valid: list[Session]
    test: list[Session]
    test_source: str
    stats: dict


def load_catalog(cfg: RunConfig) -> tuple[ItemCatalog, CategoryTaxonomy]:
    records = read_items_file(cfg.data.items, cfg.data.levels, cfg.column_map())
    return build_catalog(records, cfg.data.levels, cfg.data.metadata_vocab)


def load_sessions(path, cfg: RunConfig, catalog: ItemCatalog, stats: IngestStats | None = None) -> list[Session]:
    return ingest_events(read_events_file(path, cfg.column_map()), catalog, stats)


def load_dataset(cfg: RunConfig) -> Dataset:
    catalog, taxonomy = load_catalog(cfg)
    train_stats = IngestStats()
    sessions = load_sessions(cfg.data.events, cfg, catalog, train_stats)
    stats = {"train_events": train_stats.as_dict()}
    if cfg.data.test_events:
        test_stats = IngestStats()
        test = load_sessions(cfg.data.test_events, cfg, catalog, test_stats)
        stats["test_events"] = test_stats.as_dict()
        source = "provided"
    else:
        sessions, test = chronological_split(sessions, cfg.data.test_fraction)
        source = f"chronological split (last {cfg.data.test_fraction:.0%} of sessions)"
    train, valid = split_train_valid(sessions, cfg.data.valid_fraction, cfg.train.split_seed)
    stats["train"] = dataset_summary(train, catalog, taxonomy)
    stats["valid_sessions"] = len(valid)
    stats["test_sessions"] = len(test)
    return Dataset(catalog, taxonomy, train, valid, test, source, stats)


@contextlib.contextmanager
def numeric_context(cfg: RunConfig):
    with contextlib.ExitStack() as stack:
        stack.enter_context(ag.precision(np.float64 if cfg.numeric.precision == "float64" else np.float32))
        if cfg.numeric.debug:
            stack.enter_context(ag.debug_mode(True))
        if cfg.numeric.deterministic:
            try:
                from threadpoolctl import threadpool_limits
            except ImportError:  # pragma: no cover
                pass
            else:
                stack.enter_context(threadpool_limits(1))
        yield


def build_model(cfg: RunConfig, catalog: ItemCatalog, taxonomy: CategoryTaxonomy) -> Recommender:
    return Recommender(catalog, taxonomy, cfg.encoder_config(), seed=cfg.train.seed,
                       head_options=cfg.head_options())


def train_settings(cfg: RunConfig) -> TrainSettings:
    return TrainSettings(cfg.mode(), cfg.optim.lr, cfg.optim.batch_size, cfg.train.epochs, cfg.train.patience,
                         cfg.train.seed, cfg.loss_weights(), cfg.train.log_every)


def make_checkpoint(cfg: RunConfig, model: Recommender, trainer: Trainer,
                    params: dict[str, np.ndarray] | None = None) -> Checkpoint:
    state = trainer.state
    return Checkpoint(
        config=serialize_config(cfg),
        catalog_fingerprint=catalog_fingerprint(model.catalog),
        taxonomy_fingerprint=taxonomy_fingerprint(model.taxonomy),
        tensors=params if params is not None else {p.name: p.data.copy() for p in model.parameters()},
        adam_step=state.step,
        adam={"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        epoch=trainer.epoch,
        best_valid_mrr=trainer.best_mrr,
        trainer={"best_epoch": trainer.best_epoch, "bad_epochs": trainer.bad_epochs},
    )


def load_parameters(model: Recommender, ckpt: Checkpoint) -> None:
    named = model.named_parameters()
    missing = set(named) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(named)
    if missing or extra:
        raise ConfigError(f"checkpoint parameters do not match the model (missing {sorted(missing)[:3]}, "
                          f"unexpected {sorted(extra)[:3]})")
    for name, p in named.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)
        p.grad = np.zeros_like(p.data)


def restore_trainer(trainer: Trainer, ckpt: Checkpoint) -> None:
    load_parameters(trainer.model, ckpt)
    st = trainer.state
    st.step = ckpt.adam_step
    st.lr, st.beta1, st.beta2, st.eps = (ckpt.adam[k] for k in ("lr", "beta1", "beta2", "eps"))
    st.m = {k: v.copy() for k, v in ckpt.adam_m.items()}
    st.v = {k: v.copy() for k, v in ckpt.adam_v.items()}
    trainer.epoch = ckpt.epoch
    trainer.best_mrr = ckpt.best_valid_mrr
    trainer.best_epoch = ckpt.trainer.get("best_epoch", 0)
    trainer.bad_epochs = ckpt.trainer.get("bad_epochs", 0)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[RunConfig, Recommender]:
    """Rebuild the catalog from the checkpoint's config and verify its fingerprints."""
    cfg = parse_config(ckpt.config)
    catalog, taxonomy = load_catalog(cfg)
    ckpt.check_fingerprints(catalog_fingerprint(catalog), taxonomy_fingerprint(taxonomy))
    dtype = next(iter(ckpt.tensors.values())).dtype
    with ag.precision(dtype):
        model = build_model(cfg, catalog, taxonomy)
    load_parameters(model, ckpt)
    return cfg, model


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    epochs: int
    best_epoch: int
    best_valid_mrr: float


def run_train(cfg: RunConfig, out_dir=None, resume=None, max_epochs: int | None = None) -> TrainResult:
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path, last_path, log_path = out / "best.ckpt", out / "last.ckpt", out / "train.log"
    with numeric_context(cfg), open(log_path, "a" if resume else "w", encoding="utf-8") as fh:
        log = RunLog(fh)
        log.write("config", config=config_dict(cfg), architecture=PINNED_ARCHITECTURE,
                  positional_mode="learned" if cfg.model.positional else "none")
        data = load_dataset(cfg)
        log.write("data", test_source=data.test_source, **data.stats)
        model = build_model(cfg, data.catalog, data.taxonomy)
        examples = augment_all(data.train, data.catalog, cfg.data.max_len)
        valid = eval_examples(data.valid, max_len=cfg.data.max_len)
        trainer = Trainer(model, examples, valid, train_settings(cfg), log)
        if resume:
            ckpt = load_checkpoint(resume)
            ckpt.check_fingerprints(catalog_fingerprint(data.catalog), taxonomy_fingerprint(data.taxonomy))
            restore_trainer(trainer, ckpt)
            log.write("resume", checkpoint=str(resume), epoch=trainer.epoch)

        def on_epoch(t: Trainer) -> None:
            if t.best_epoch == t.epoch:
                save_checkpoint(best_path, make_checkpoint(cfg, model, t))
            save_checkpoint(last_path, make_checkpoint(cfg, model, t))

        trainer.fit(max_epochs=max_epochs, on_epoch=on_epoch)
        log.write("done", epochs=trainer.epoch, best_epoch=trainer.best_epoch, best_valid_mrr=trainer.best_mrr)
    return TrainResult(best_path, last_path, log_path, trainer.epoch, trainer.best_epoch, trainer.best_mrr)


def run_evaluate(checkpoint, test_path=None, policy: CandidatePolicy | None = None,
                 final_only: bool | None = None, k: int = 20) -> MetricsReport:
    ckpt = load_checkpoint(checkpoint)
    cfg, model = model_from_checkpoint(ckpt)
    policy = policy or cfg.policy()
    final_only = cfg.eval.final_only if final_only is None else final_only
    with numeric_context(cfg):
        if test_path:
            sessions = load_sessions(test_path, cfg, model.catalog)
        else:
            sessions = load_dataset(cfg).test
        examples = eval_examples(sessions, final_only=final_only)
        report = evaluate(model, examples, policy, cfg.mode(), cfg.loss_weights(), k=k,
                          eval_unit="final-transition" if final_only else "every-prefix")
    report.meta["positional_mode"] = "learned" if cfg.model.positional else "none"
    report.meta["checkpoint_epoch"] = ckpt.epoch
    return report


def run_sweep(checkpoint, test_path=None, ks=(1, 2, 5, 10), with_random: bool = True,
              seed: int = 0) -> list[MetricsReport]:
    """Category policy at each k, plus a random policy of matched mean candidate size."""
    ckpt = load_checkpoint(checkpoint)
    cfg, model = model_from_checkpoint(ckpt)
    reports = []
    with numeric_context(cfg):
        sessions = load_sessions(test_path, cfg, model.catalog) if test_path else load_dataset(cfg).test
        examples = eval_examples(sessions, final_only=cfg.eval.final_only)
        mode, weights = cfg.mode(), cfg.loss_weights()
        reports.append(evaluate(model, examples, CandidatePolicy("full"), mode, weights))
        for k in ks:
            cat = evaluate(model, examples, CandidatePolicy("category", k=k), mode, weights)
            reports.append(cat)
            if with_random:
                size = max(1, int(round(cat.candidate_fraction * model.catalog.item_count)))
                reports.append(evaluate(model, examples, CandidatePolicy("random", size=size, seed=seed),
                                        mode, weights))
    return reports


def predict(model: Recommender, external_ids, top_n: int = 10, top_k: int = 3, mode=None, weights=None) -> dict:
    resolved, skipped = [], []
    for ext in external_ids:
        (resolved if ext in model.catalog.index else skipped).append(ext)
    if not resolved:
        raise ValueError(f"none of the session items are in the catalog: {list(external_ids)}")
    seq = [model.catalog.lookup(e) for e in resolved][-model.config.max_len:]
    items = np.array([seq], dtype=np.int64)
    from .model import LossWeights, Mode
    with ag.no_grad():
        out = model.forward(items, np.ones_like(items, dtype=bool), mode or Mode.HIERARCHICAL,
                            weights or LossWeights(), with_categories=True)
    scores = out.item_scores.data[0]
    top = np.lexsort((np.arange(len(scores)), -scores))[:top_n]
    categories = []
    for t, p in enumerate(out.category_scores):
        level_scores = p.data[0][:model.taxonomy.sizes[t]]
        chosen = top_categories(level_scores, min(top_k, len(level_scores)))
        categories.append([{"category": model.taxonomy.labels[t][int(c)], "index": int(c),
                            "score": float(level_scores[c])} for c in chosen])
    return {
        "session": resolved,
        "skipped": skipped,
        "items": [{"item_id": model.catalog.external(int(i)), "score": float(scores[i])} for i in top],
        "categories": [{"level": t + 1, "top": cats} for t, cats in enumerate(categories)],
    }


def run_predict(checkpoint, external_ids, top_n: int = 10, top_k: int = 3) -> dict:
    ckpt = load_checkpoint(checkpoint)
    cfg, model = model_from_checkpoint(ckpt)
    with numeric_context(cfg):
        return predict(model, external_ids, top_n, top_k, cfg.mode(), cfg.loss_weights())


def write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = payload.to_json() if hasattr(payload, "to_json") else json.dumps(payload, indent=2)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text + "\n", encoding="utf-8")
    tmp.replace(path)


__all__ = ["FingerprintMismatchError", "run_train", "run_evaluate", "run_sweep", "run_predict", "predict"]
