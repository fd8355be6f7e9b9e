"""Hierarchical multi-task session-based recommendation on a small numpy autodiff core."""

from .autograd import Parameter, Tensor, adam_step, finite_difference_check
from .data import build_catalog, ingest_events, prefix_augment
from .encoder import EncoderConfig
from .evaluation import CandidatePolicy, MetricsReport, evaluate, rank_and_score
from .model import LossWeights, Mode, Recommender

__version__ = "0.1.0"
