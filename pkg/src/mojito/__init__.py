"""MOJITO: time-aware sequential recommendation with Gaussian-mixture attention."""
from .config import MojitoConfig, load_config, parse_config_text
from .data import ContextSchema, Dataset, SplitDataset, build_dataset, leave_one_out_split
from .evaluation import EvalReport, evaluate
from .model import MojitoModel
from .train import Trainer, train

__all__ = [
    "ContextSchema",
    "Dataset",
    "EvalReport",
    "MojitoConfig",
    "MojitoModel",
    "SplitDataset",
    "Trainer",
    "build_dataset",
    "evaluate",
    "leave_one_out_split",
    "load_config",
    "parse_config_text",
    "train",
]
__version__ = "0.1.0"
