"""Run configuration in a flat ``section.key = value`` text format.

Example::

    data.events = data/train_events.tsv
    data.items = data/items.tsv
    model.d_item = 128
    train.mode = hierarchical

Unknown keys and malformed values are rejected with the line number. Relative
paths resolve against the config file's directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .data import METADATA_VOCAB, ColumnMap
from .encoder import EncoderConfig
from .evaluation import CandidatePolicy
from .model import HeadOptions, LossWeights, Mode


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key + ': ' if key else ''}{message}")
        self.key = key
        self.line = line


@dataclass
class DataConfig:
    events: str = ""
    items: str = ""
    test_events: str = ""           # empty: chronological split of ``events``
    delimiter: str = "\t"
    col_session: str = "session_id"
    col_item: str = "item_id"
    col_time: str = "timestamp"
    col_item_id: str = "item_id"
    cat_columns: tuple[str, ...] = ()
    col_title: str = "title"
    levels: int = 1
    max_len: int = 20
    metadata_vocab: int = METADATA_VOCAB
    valid_fraction: float = 0.1
    test_fraction: float = 0.1


@dataclass
class ModelConfig:
    d_item: int = 128
    d_category: int = 128
    d_metadata: int = 128
    layers: int = 2
    heads: int = 8
    ff_mult: int = 4
    dropout: float = 0.0
    positional: bool = True
    proj_bias: bool = False
    proj_input: str = "logits"
    detach_category_scores: bool = False


@dataclass
class LossConfig:
    category_weight: float = 1.0        # weight on the summed category losses
    projection_weight: float = 1.0      # weight on projected category embeddings in the item head


@dataclass
class OptimConfig:
    lr: float = 1e-4
    batch_size: int = 1024


@dataclass
class TrainConfig:
    mode: str = "hierarchical"
    epochs: int = 100
    patience: int = 5
    seed: int = 0
    split_seed: int = 0
    log_every: int = 50


@dataclass
class EvalConfig:
    policy: str = "full"                # full | category-topk | random
    k: int = 3
    size: int = 0
    seed: int = 0
    final_only: bool = False


@dataclass
class NumericConfig:
    precision: str = "float32"          # float64 for verification runs
    deterministic: bool = True
    debug: bool = False


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    numeric: NumericConfig = field(default_factory=NumericConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    # derived views used by the rest of the package

    def encoder_config(self) -> EncoderConfig:
        m = self.model
        return EncoderConfig(m.d_item, m.d_category, m.d_metadata, m.layers, m.heads, self.data.max_len,
                             m.ff_mult, m.dropout, m.positional)

    def head_options(self) -> HeadOptions:
        return HeadOptions(self.model.proj_bias, self.model.proj_input, self.model.detach_category_scores)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss.category_weight, self.loss.projection_weight)

    def mode(self) -> Mode:
        return Mode(self.train.mode)

    def column_map(self) -> ColumnMap:
        d = self.data
        return ColumnMap(d.col_session, d.col_item, d.col_time, d.col_item_id, d.cat_columns, d.col_title,
                         d.delimiter)

    def policy(self) -> CandidatePolicy:
        kind = {"full": "full", "category-topk": "category", "random": "random"}[self.eval.policy]
        return CandidatePolicy(kind, self.eval.k, self.eval.size, self.eval.seed)

    def validate(self) -> None:
        try:
            self.encoder_config().validate()
            self.head_options()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.train.mode not in {m.value for m in Mode}:
            raise ConfigError(f"must be one of {[m.value for m in Mode]}", "train.mode")
        if self.eval.policy not in ("full", "category-topk", "random"):
            raise ConfigError("must be full, category-topk or random", "eval.policy")
        if self.numeric.precision not in ("float32", "float64"):
            raise ConfigError("must be float32 or float64", "numeric.precision")
        if self.optim.lr < 0:
            raise ConfigError("must be >= 0", "optim.lr")
        if self.optim.batch_size < 1:
            raise ConfigError("must be >= 1", "optim.batch_size")
        if self.data.levels < 1:
            raise ConfigError("must be >= 1", "data.levels")
        if self.data.cat_columns and len(self.data.cat_columns) != self.data.levels:
            raise ConfigError(f"needs {self.data.levels} names", "data.cat_columns")
        for key in ("valid_fraction", "test_fraction"):
            if not 0.0 < getattr(self.data, key) < 1.0:
                raise ConfigError("must be in (0, 1)", f"data.{key}")

    def check_paths(self) -> None:
        for key in ("events", "items", "test_events"):
            value = getattr(self.data, key)
            if key != "test_events" and not value:
                raise ConfigError("is required", f"data.{key}")
            if value and not Path(value).exists():
                raise ConfigError(f"file not found: {value}", f"data.{key}")


_PATH_KEYS = {("data", "events"), ("data", "items"), ("data", "test_events"), ("output", "dir")}


def _encode(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return value.encode("unicode_escape").decode("ascii")
    return str(value)


def _decode(text: str, kind, key: str, line: int | None):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == tuple[str, ...]:
            return tuple(part.strip() for part in text.split(",") if part.strip())
        return text.encode("ascii", "backslashreplace").decode("unicode_escape")
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {getattr(kind, '__name__', kind)}", key, line) from None


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    cfg = RunConfig()
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError("expected 'section.key = value'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", key, lineno)
        seen[key] = lineno
        section_name, _, name = key.partition(".")
        section = getattr(cfg, section_name, None) if section_name in _sections() else None
        if section is None or not name or name not in {f.name for f in fields(section)}:
            raise ConfigError("unknown key", key, lineno)
        kind = get_type_hints(type(section))[name]
        decoded = _decode(value, kind, key, lineno)
        if (section_name, name) in _PATH_KEYS and decoded and base_dir is not None:
            decoded = str((base_dir / decoded).resolve()) if not Path(decoded).is_absolute() else decoded
        setattr(section, name, decoded)
    cfg.validate()
    return cfg


def _sections() -> list[str]:
    return [f.name for f in fields(RunConfig)]


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section_name in _sections():
        section = getattr(cfg, section_name)
        for f in fields(section):
            lines.append(f"{section_name}.{f.name} = {_encode(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def config_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    cfg = parse_config(text, path.parent.resolve())
    if check_paths:
        cfg.check_paths()
    return cfg
