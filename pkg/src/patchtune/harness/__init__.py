from .config import METHODS, TrainConfig, load_config
from .train import evaluate, finetune, pretrain, run_matrix

__all__ = ["METHODS", "TrainConfig", "load_config", "evaluate", "finetune", "pretrain", "run_matrix"]
