"""Attentive multiview item similarity with cold-start masking."""
from .core_math import NoActiveViewError, ShapeError
from .evaluation import EvalReport, evaluate, make_cold_split
from .item2vec import build_baskets, export_cf_view, train_sgns
from .model import NamModel, PairScoreBreakdown, pair_forward
from .training import (
    PairExample, TrainConfig, build_pair_dataset, load_checkpoint, save_checkpoint,
    train_phase1, train_phase2,
)
from .views import DirectViewTable, ViewId, ViewRegistry

__version__ = "0.1.0"
