"""Pretraining and transfer loops, per-trial subsampling and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import tensor as T
from .. import textpipe as tp
from ..bench.metrics import MetricRecord, binary_task_metrics, multiclass_task_metrics
from ..model import (BackboneConfig, ClassifierModel, ModelConfig, CaptioningModel, TextualHeadConfig,
                     caption_loss, classify, load_checkpoint, transplant_backbone)
from ..model.layers import Module
from ..synthdata import EDEMA, FINDINGS, AugmentParams, Dataset, augment_batch
from .optim import SGD, LookAhead, Schedule, lr_at

log = logging.getLogger(__name__)

MODES = ("pretrain", "frozen", "unfrozen", "scratch")
_ALIASES = {"transfer-frozen": "frozen", "transfer-unfrozen": "unfrozen", "caption": "pretrain"}

# epochs, max_lr, weight decay, lookahead, loss kind
MODE_DEFAULTS = {
    "pretrain": dict(epochs=30, max_lr=0.05, weight_decay=1e-4, lookahead=True),
    "frozen": dict(epochs=20, max_lr=2e-2, weight_decay=0.0, lookahead=False),
    "unfrozen": dict(epochs=20, max_lr=2e-3, weight_decay=0.0, lookahead=False),
    "scratch": dict(epochs=50, max_lr=2e-1, weight_decay=0.0, lookahead=False),
}


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class RunSpec:
    mode: str = "pretrain"
    task: str = "pathology9"
    epochs: int | None = None
    batch_size: int = 16
    max_lr: float | None = None
    weight_decay: float | None = None
    momentum: float = 0.9
    warmup_fraction: float = 0.05
    lookahead: bool | None = None
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    seed: int = 0
    n_train: int | None = None
    rotation: float = 10.0
    translation: float = 0.05
    vocab_size: int = 1000
    max_caption_len: int | None = None
    model: dict = field(default_factory=dict)
    data: str | None = None
    test_data: str | None = None
    init: str | None = None

    def __post_init__(self):
        self.mode = _ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        task_kind(self.task)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    @property
    def loss(self) -> str:
        if self.mode == "pretrain":
            return "caption"
        return "multiclass-ce" if self.task == "edema" else "binary-ce"

    def resolved(self) -> "RunSpec":
        """Copy with mode defaults filled into every unset field."""
        d = MODE_DEFAULTS[self.mode]
        return replace(
            self,
            epochs=d["epochs"] if self.epochs is None else self.epochs,
            max_lr=d["max_lr"] if self.max_lr is None else self.max_lr,
            weight_decay=d["weight_decay"] if self.weight_decay is None else self.weight_decay,
            lookahead=d["lookahead"] if self.lookahead is None else self.lookahead,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss"] = self.loss
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"loss"}
        if unknown:
            raise ConfigError(f"unknown RunSpec fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})


def task_kind(task: str) -> tuple[int, list[str]]:
    """Head width and output names for a task name."""
    if task == "pathology9":
        return len(FINDINGS), list(FINDINGS)
    if task == "edema":
        return 4, [f"grade{c}" for c in range(4)]
    if task.startswith("finding:") and task.split(":", 1)[1] in FINDINGS:
        return 1, [task.split(":", 1)[1]]
    raise ConfigError(f"unknown task {task!r}")


def task_targets(task: str, ds: Dataset) -> np.ndarray:
    if task == "pathology9":
        return ds.labels.astype(np.float32)
    if task == "edema":
        return ds.severity.copy()
    j = FINDINGS.index(task.split(":", 1)[1])
    return ds.labels[:, j:j + 1].astype(np.float32)


def _augment(spec: RunSpec) -> AugmentParams | None:
    if not spec.rotation and not spec.translation:
        return None
    p = AugmentParams(spec.rotation, spec.translation)
    return p


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _optimizer(spec: RunSpec, params) -> SGD | LookAhead:
    opt = SGD(params, momentum=spec.momentum, weight_decay=spec.weight_decay)
    return LookAhead(opt, spec.lookahead_k, spec.lookahead_alpha) if spec.lookahead else opt


@dataclass
class LossLog:
    rows: list[tuple[int, int, float, float]] = field(default_factory=list)

    def add(self, epoch, step, lr, loss):
        self.rows.append((epoch, step, lr, loss))

    def epoch_means(self) -> list[float]:
        by = {}
        for e, _, _, loss in self.rows:
            by.setdefault(e, []).append(loss)
        return [float(np.mean(by[e])) for e in sorted(by)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "lr", "loss"])
            for e, s, lr, loss in self.rows:
                w.writerow([e, s, repr(float(lr)), repr(float(loss))])


def _fit(model: Module, spec: RunSpec, n: int, step_loss, params) -> LossLog:
    """Shared epoch/step driver: shuffle, schedule, backward, optimizer step."""
    opt = _optimizer(spec, params)
    steps_per_epoch = math.ceil(n / spec.batch_size)
    schedule = Schedule(spec.max_lr, spec.epochs * steps_per_epoch, spec.warmup_fraction)
    rng = np.random.default_rng([spec.seed, 11])
    logbook = LossLog()
    step = 0
    for epoch in range(spec.epochs):
        for idx in _batches(n, spec.batch_size, rng):
            lr = lr_at(schedule, step + 1)
            T.reset_tape()
            opt.zero_grad()
            try:
                loss = step_loss(np.sort(idx), rng)
                T.backward(loss)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"{spec.mode} diverged at epoch {epoch} step {step}: {exc}") from None
            opt.step(lr)
            logbook.add(epoch, step, lr, loss.item())
            step += 1
        log.debug("%s epoch %d loss %.4f", spec.mode, epoch, logbook.epoch_means()[-1])
    return logbook


# ---------------------------------------------------------------------------
# pretraining


def corpus_tokens(findings: Sequence[str], vocab: tp.Vocabulary, max_len: int | None = None):
    """Tokenize every caption; the cap defaults to the 95th-percentile length of the corpus."""
    seqs = [tp.tokenize(tp.normalize(f), vocab, tp.MAX_CAPTION_LEN) for f in findings]
    if max_len is None:
        max_len = tp.percentile_length([len(s) for s in seqs], 95)
    seqs = [s if len(s) <= max_len else s[:max_len - 1] + [tp.EOS_ID] for s in seqs]
    return seqs, max_len


@dataclass
class PretrainResult:
    model: CaptioningModel
    log: LossLog
    vocab: tp.Vocabulary
    max_caption_len: int

    @property
    def epoch_losses(self) -> list[float]:
        return self.log.epoch_means()


def build_captioner(spec: RunSpec, vocab: tp.Vocabulary, max_len: int) -> CaptioningModel:
    m = dict(spec.model)
    textual = dict(m.get("textual", {}))
    textual["vocab_size"] = len(vocab)
    textual.setdefault("max_positions", max(tp.MAX_CAPTION_LEN, max_len))
    cfg = ModelConfig(BackboneConfig(**m.get("backbone", {})), TextualHeadConfig(**textual),
                      m.get("dtype", "float32"))
    return CaptioningModel(cfg, vocab, seed=spec.seed, max_caption_len=max_len)


def pretrain(spec: RunSpec, ds: Dataset, vocab: tp.Vocabulary | None = None,
             model: CaptioningModel | None = None) -> PretrainResult:
    """Bidirectional captioning pretraining over full epochs (no early stopping)."""
    spec = spec.resolved()
    if spec.mode != "pretrain":
        raise ConfigError("pretrain needs a pretrain-mode spec")
    if len(ds) == 0:
        raise ConfigError("pretraining dataset is empty")
    if vocab is None:
        vocab = tp.train_vocab(ds.findings, spec.vocab_size)
    seqs, max_len = corpus_tokens(ds.findings, vocab, spec.max_caption_len)
    if model is None:
        model = build_captioner(spec, vocab, max_len)
    model.train()
    aug = _augment(spec)

    def step_loss(idx, rng):
        images = augment_batch(ds.images[idx], aug, rng)
        tokens = tp.pad_batch([seqs[i] for i in idx])
        return caption_loss(model, images, tokens, rng)

    logbook = _fit(model, spec, len(ds), step_loss, model.parameters())
    model.eval()
    return PretrainResult(model, logbook, vocab, max_len)


def evaluate_caption_loss(model: CaptioningModel, ds: Dataset, batch_size: int = 32) -> float:
    """Mean eval-mode caption loss (no dropout, no augmentation), weighted by batch size."""
    seqs, _ = corpus_tokens(ds.findings, model.vocab, model.max_caption_len)
    model.eval()
    total = 0.0
    with T.no_grad():
        for i in range(0, len(ds), batch_size):
            idx = np.arange(i, min(i + batch_size, len(ds)))
            loss = caption_loss(model, ds.images[idx], tp.pad_batch([seqs[j] for j in idx]))
            total += loss.item() * len(idx)
    return total / len(ds)


# ---------------------------------------------------------------------------
# transfer


@dataclass
class TransferResult:
    model: ClassifierModel
    log: LossLog
    spec: RunSpec


def _init_model(init) -> Module | None:
    if init is None or isinstance(init, Module):
        return init
    return load_checkpoint(init)


def transfer(spec: RunSpec, train: Dataset, init=None) -> TransferResult:
    """Fit a decision head (frozen) or the whole classifier (unfrozen / scratch)."""
    spec = spec.resolved()
    if spec.mode == "pretrain":
        raise ConfigError("transfer needs a frozen, unfrozen or scratch spec")
    width, _ = task_kind(spec.task)
    init_model = _init_model(init if init is not None else spec.init)
    if spec.mode == "scratch":
        init_model = None
        bcfg = BackboneConfig(**spec.model.get("backbone", {}))
    elif init_model is None:
        raise ConfigError(f"{spec.mode} transfer needs an init checkpoint")
    else:
        bcfg = init_model.backbone.cfg
    dtype = spec.model.get("dtype", "float32")
    clf = ClassifierModel(bcfg, width, seed=spec.seed, dtype=dtype)
    if init_model is not None:
        transplant_backbone(init_model, clf)

    targets = task_targets(spec.task, train)
    rows = np.arange(len(train)) if spec.task != "edema" else np.nonzero(targets >= 0)[0]
    if len(rows) == 0:
        raise ConfigError("no labelled training examples for this task")
    frozen = spec.mode == "frozen"
    if frozen:
        clf.backbone.requires_grad_(False)
        clf.backbone.eval()
        clf.head.train()
        params = clf.head.parameters()
    else:
        clf.train()
        params = clf.parameters()
    aug = _augment(spec)

    def step_loss(idx, rng):
        sel = rows[idx]
        images = augment_batch(train.images[sel], aug, rng)
        logits = classify(clf, images, frozen=frozen)
        if spec.task == "edema":
            return T.softmax_cross_entropy(logits, targets[sel])
        # mean over examples, summed over outputs: each column trains like its own probe
        return T.mul(T.bce_with_logits(logits, targets[sel]), float(width))

    logbook = _fit(clf, spec, len(rows), step_loss, params)
    clf.eval()
    return TransferResult(clf, logbook, spec)


def predict(model: ClassifierModel, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(classify(model, images[i:i + batch_size]).data)
    return np.concatenate(out).astype(np.float64)


def evaluate(model: ClassifierModel, task: str, test: Dataset) -> dict:
    logits = predict(model, test.images)
    if task == "edema":
        keep = test.severity >= 0
        a, ap, f1, per = multiclass_task_metrics(logits[keep], test.severity[keep], 4)
        return {"auc": a, "aucpr": ap, "macro_f1": f1, "per_class": per}
    _, names = task_kind(task)
    a, ap, per = binary_task_metrics(logits, task_targets(task, test).astype(int), names)
    return {"auc": a, "aucpr": ap, "macro_f1": None, "per_class": per}


# ---------------------------------------------------------------------------
# trials


def subsample(targets: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` indices, first securing a positive and a negative for every output column.

    ``targets`` is N×K binary or a length-N class vector (−1 = unlabelled).
    Columns with no positives in the pool are skipped; the rest is uniform.
    """
    targets = np.asarray(targets)
    if targets.ndim == 1:
        labelled = np.nonzero(targets >= 0)[0]
        matrix = (targets[:, None] == np.arange(max(int(targets.max()) + 1, 1))[None]).astype(int)
        need_neg = False
    else:
        labelled = np.arange(len(targets))
        matrix = targets.astype(int)
        need_neg = True
    if n > len(labelled):
        raise ConfigError(f"n_train={n} exceeds the {len(labelled)} labelled training examples")
    chosen: list[int] = []
    taken = np.zeros(len(targets), dtype=bool)
    for k in range(matrix.shape[1]):
        for want in ((1, 0) if need_neg else (1,)):
            if len(chosen) >= n:
                break
            if any(matrix[i, k] == want for i in chosen):
                continue
            pool = labelled[(matrix[labelled, k] == want) & ~taken[labelled]]
            if len(pool):
                pick = int(rng.choice(pool))
                chosen.append(pick)
                taken[pick] = True
    rest = labelled[~taken[labelled]]
    fill = rng.choice(rest, size=n - len(chosen), replace=False) if n > len(chosen) else []
    out = np.concatenate([np.asarray(chosen, dtype=np.int64), np.asarray(fill, dtype=np.int64)])
    return np.sort(out)


def run_trials(spec: RunSpec, train: Dataset, test: Dataset, init=None, n_trials: int = 5,
               pretrain_fraction: float = 1.0, seeds: Sequence[int] | None = None,
               on_trial=None) -> list[MetricRecord]:
    """Repeat a transfer run with seeds ``seed+0 .. seed+n−1``, each on its own training subsample.

    ``on_trial(trial, result)`` is called after each fit, before evaluation.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be at least 1")
    init_model = _init_model(init if init is not None else spec.init)
    seeds = list(seeds) if seeds is not None else [spec.seed + i for i in range(n_trials)]
    records = []
    for trial, seed in enumerate(seeds):
        trial_spec = replace(spec, seed=seed)
        if spec.n_train is None:
            subset = train
        else:
            idx = subsample(task_targets(spec.task, train), spec.n_train, np.random.default_rng([seed, 7]))
            subset = train.subset(idx)
        result = transfer(trial_spec, subset, init_model)
        if on_trial is not None:
            on_trial(trial, result)
        m = evaluate(result.model, spec.task, test)
        records.append(MetricRecord(
            task=spec.task, mode=spec.mode, pretrain_fraction=pretrain_fraction,
            n_train="all" if spec.n_train is None else spec.n_train, trial=trial,
            auc=m["auc"], aucpr=m["aucpr"], macro_f1=m["macro_f1"], seed=seed, per_class=m["per_class"],
        ))
    return records
