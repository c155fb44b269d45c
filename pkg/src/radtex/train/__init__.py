from .loops import (MODE_DEFAULTS, MODES, ConfigError, LossLog, PretrainResult, RunSpec, TrainingDiverged, TransferResult,
                    corpus_tokens, evaluate, evaluate_caption_loss, predict, pretrain, run_trials,
                    subsample, task_kind, task_targets, transfer)
from .optim import SGD, LookAhead, Schedule, lr_at

__all__ = [
    "MODE_DEFAULTS", "MODES", "ConfigError", "LookAhead", "LossLog", "PretrainResult", "RunSpec", "SGD", "Schedule",
    "TrainingDiverged", "TransferResult", "corpus_tokens", "evaluate", "evaluate_caption_loss", "lr_at",
    "predict", "pretrain", "run_trials", "subsample", "task_kind", "task_targets", "transfer",
]
