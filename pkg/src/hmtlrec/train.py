"""Epoch loop with validation-based early stopping."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .autograd import AdamState
from .data import TrainingExample, make_batches
from .evaluation import CandidatePolicy, EvalExample, evaluate
from .model import LossWeights, Mode, Recommender, train_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSettings:
    mode: Mode = Mode.HIERARCHICAL
    lr: float = 1e-4
    batch_size: int = 1024
    epochs: int = 100
    patience: int = 5
    seed: int = 0
    weights: LossWeights = LossWeights()
    log_every: int = 50


class RunLog:
    """Line-oriented JSON log; every record carries an ``event`` field."""

    def __init__(self, stream: IO[str] | None = None):
        self.stream = stream
        self.records: list[dict] = []

    def write(self, event: str, **fields) -> None:
        rec = {"event": event, **fields}
        self.records.append(rec)
        if self.stream is not None:
            self.stream.write(json.dumps(rec, sort_keys=False) + "\n")
            self.stream.flush()


def epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch])


class Trainer:
    def __init__(self, model: Recommender, train: Sequence[TrainingExample],
                 valid: Sequence[EvalExample] | None, settings: TrainSettings,
                 log: RunLog | None = None, state: AdamState | None = None):
        self.model = model
        self.train = train
        self.valid = valid
        self.settings = settings
        self.log = log or RunLog()
        self.state = state or AdamState(lr=settings.lr)
        self.epoch = 0                      # epochs completed
        self.best_mrr = -1.0
        self.best_epoch = 0
        self.best_params: dict[str, np.ndarray] | None = None
        self.bad_epochs = 0

    def train_epoch(self) -> dict[str, float]:
        s = self.settings
        seq = epoch_seed(s.seed, self.epoch)
        shuffle_seed, dropout_seed = seq.spawn(2)
        rng = np.random.default_rng(dropout_seed) if self.model.config.dropout > 0 else None
        level_count = self.model.taxonomy.level_count
        totals: dict[str, float] = {}
        n = 0
        batches = make_batches(self.train, s.batch_size, int(shuffle_seed.generate_state(1)[0]),
                               self.model.catalog.pad, level_count)
        for step, batch in enumerate(batches):
            report = train_step(self.model, batch, self.state, s.weights, s.mode, rng)
            for key, value in report.items():
                totals[key] = totals.get(key, 0.0) + value * len(batch)
            n += len(batch)
            if s.log_every and step % s.log_every == 0:
                self.log.write("step", epoch=self.epoch + 1, step=self.state.step, **report)
        self.epoch += 1
        return {k: v / max(n, 1) for k, v in totals.items()}

    def validate(self) -> float:
        report = evaluate(self.model, self.valid, CandidatePolicy("full"), self.settings.mode, self.settings.weights)
        return report.mrr_at_20

    def fit(self, max_epochs: int | None = None, on_epoch=None) -> None:
        """Train until ``max_epochs`` total epochs or until validation MRR@20 stalls for ``patience`` epochs."""
        limit = self.settings.epochs if max_epochs is None else max_epochs
        while self.epoch < limit:
            losses = self.train_epoch()
            record = {"epoch": self.epoch, **losses}
            if self.valid:
                mrr = self.validate()
                record["valid_mrr_at_20"] = mrr
                if mrr > self.best_mrr:
                    self.best_mrr, self.best_epoch, self.bad_epochs = mrr, self.epoch, 0
                    self.best_params = {p.name: p.data.copy() for p in self.model.parameters()}
                else:
                    self.bad_epochs += 1
            self.log.write("epoch", **record)
            logger.info("epoch %d %s", self.epoch, record)
            if on_epoch is not None:
                on_epoch(self)
            if self.valid and self.bad_epochs >= self.settings.patience:
                self.log.write("early_stop", epoch=self.epoch, best_epoch=self.best_epoch)
                break

    def restore_best(self) -> None:
        if self.best_params is None:
            return
        for p in self.model.parameters():
            p.data[...] = self.best_params[p.name]
