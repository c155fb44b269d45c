"""Data-efficiency sweep: modes × labelled-set sizes × pretraining fractions × trials.

Outputs a per-trial CSV, an aggregated CSV with t-intervals, and one SVG per
task with two panels: AUC against labelled examples (per mode) and AUC
against pretraining fraction (per mode and labelled-set size).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..model import Module, load_checkpoint, save_checkpoint
from ..synthdata import Dataset, SynthConfig, generate_dataset, load_dataset
from ..train.loops import ConfigError, RunSpec, pretrain, run_trials, task_kind, task_targets
from .metrics import MetricRecord, mean_ci

log = logging.getLogger(__name__)

CSV_HEADER = ["task", "mode", "pretrain_fraction", "n_train", "trial", "auc", "aucpr", "macro_f1"]
TRANSFER_MODES = ("frozen", "unfrozen", "scratch")


@dataclass
class ExperimentSpec:
    task: str = "pathology9"
    modes: tuple[str, ...] = TRANSFER_MODES
    n_train: tuple[int | str, ...] = (10, 100, 1000, "all")
    fractions: tuple[float, ...] = (0.01, 0.1, 0.5, 1.0)
    trials: int = 5
    seed: int = 0
    # data: either directories or synthetic sizes
    pretrain_data: str | None = None
    train_data: str | None = None
    test_data: str | None = None
    synth: dict = field(default_factory=dict)
    n_pretrain: int = 5000
    n_downstream: int = 2000
    n_test: int = 500
    # run overrides
    pretrain: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)

    def __post_init__(self):
        self.modes = tuple(self.modes)
        self.n_train = tuple(self.n_train)
        self.fractions = tuple(float(f) for f in self.fractions)
        if not self.modes or not self.n_train or not self.fractions:
            raise ConfigError("experiment grid is empty")
        bad = [m for m in self.modes if m not in TRANSFER_MODES]
        if bad:
            raise ConfigError(f"unknown transfer modes {bad}")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("pretrain fractions must lie in (0, 1]")
        if any(n != "all" and (not isinstance(n, int) or n < 1) for n in self.n_train):
            raise ConfigError("n_train entries must be positive integers or 'all'")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        task_kind(self.task)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ExperimentSpec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Splits:
    pretrain: Dataset | None
    train: Dataset
    test: Dataset


def load_splits(spec: ExperimentSpec, need_pretrain: bool = True) -> Splits:
    cfg = SynthConfig.from_dict(spec.synth)

    def get(path, n, stream):
        return load_dataset(path) if path else generate_dataset(cfg, n, seed=spec.seed * 10 + stream)

    pre = get(spec.pretrain_data, spec.n_pretrain, 1) if need_pretrain else None
    return Splits(pre, get(spec.train_data, spec.n_downstream, 2), get(spec.test_data, spec.n_test, 3))


def labelled_count(task: str, ds: Dataset) -> int:
    targets = task_targets(task, ds)
    return int((targets >= 0).sum()) if targets.ndim == 1 else len(ds)


def check_grid(spec: ExperimentSpec, train: Dataset) -> None:
    size = labelled_count(spec.task, train)
    bad = [(m, n) for m in spec.modes for n in spec.n_train if n != "all" and n > size]
    if bad:
        cells = ", ".join(f"{m}/n_train={n}" for m, n in bad)
        raise ConfigError(f"n_train exceeds the {size}-example training split in cells: {cells}")


def pretrain_subset(ds: Dataset, fraction: float) -> Dataset:
    """Nested prefixes: every smaller fraction is a prefix of every larger one."""
    n = max(1, int(round(fraction * len(ds))))
    return ds.subset(np.arange(n))


def pretrained_models(spec: ExperimentSpec, pre: Dataset | None, cache_dir: Path | None = None) -> dict[float, Module]:
    models = {}
    for f in spec.fractions:
        given = spec.checkpoints.get(str(f)) or spec.checkpoints.get(f)
        cached = cache_dir / f"pretrain_{f:g}.ckpt" if cache_dir else None
        if given:
            models[f] = load_checkpoint(given)
        elif cached is not None and cached.exists():
            models[f] = load_checkpoint(cached)
        else:
            if pre is None:
                raise ConfigError(f"no checkpoint and no pretraining data for fraction {f}")
            run = RunSpec(**{"seed": spec.seed, "model": spec.model, **spec.pretrain, "mode": "pretrain"})
            log.info("pretraining on fraction %g", f)
            result = pretrain(run, pretrain_subset(pre, f))
            models[f] = result.model
            if cached is not None:
                cached.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(result.model, cached)
    return models


def _cell_spec(spec: ExperimentSpec, mode: str, n) -> RunSpec:
    base = {"seed": spec.seed, "model": spec.model, **spec.transfer.get(mode, {})}
    return RunSpec(**base, mode=mode, task=spec.task, n_train=None if n == "all" else n)


def run_experiment(spec: ExperimentSpec, out: Path | None = None, splits: Splits | None = None,
                   models: dict[float, Module] | None = None, threads: int = 1) -> list[MetricRecord]:
    """Run the grid; scratch cells run once per n_train and are reported under every fraction."""
    needs_init = any(m != "scratch" for m in spec.modes)
    if splits is None:
        splits = load_splits(spec, need_pretrain=needs_init and models is None)
    check_grid(spec, splits.train)
    if needs_init and models is None:
        models = pretrained_models(spec, splits.pretrain, Path(out) / "checkpoints" if out else None)

    jobs = []
    for mode in spec.modes:
        for n in spec.n_train:
            if mode == "scratch":
                jobs.append((mode, n, None))
            else:
                jobs.extend((mode, n, f) for f in spec.fractions)

    def work(job):
        mode, n, f = job
        init = None if f is None else models[f]
        return run_trials(_cell_spec(spec, mode, n), splits.train, splits.test, init=init,
                          n_trials=spec.trials, pretrain_fraction=1.0 if f is None else f)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    records = []
    for (mode, n, f), recs in zip(jobs, results):
        if f is None:
            for frac in spec.fractions:
                records.extend(replace(r, pretrain_fraction=frac) for r in recs)
        else:
            records.extend(recs)
    records.sort(key=lambda r: (spec.modes.index(r.mode), spec.n_train.index(r.n_train),
                                r.pretrain_fraction, r.trial))
    if out is not None:
        write_outputs(spec, records, Path(out), x_all=labelled_count(spec.task, splits.train))
    return records


# ---------------------------------------------------------------------------
# tables


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def class_names(task: str) -> list[str]:
    return task_kind(task)[1]


def records_csv(records: Sequence[MetricRecord], task: str) -> str:
    names = class_names(task)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER + [f"auc_{c}" for c in names] + [f"aucpr_{c}" for c in names])
    for r in records:
        per = [r.per_class.get(c, {}).get("auc") for c in names] + \
              [r.per_class.get(c, {}).get("aucpr") for c in names]
        w.writerow([_fmt(v) for v in (r.task, r.mode, r.pretrain_fraction, r.n_train, r.trial,
                                      r.auc, r.aucpr, r.macro_f1)] + [_fmt(v) for v in per])
    return buf.getvalue()


@dataclass
class Aggregate:
    task: str
    mode: str
    pretrain_fraction: float
    n_train: int | str
    trials: int
    auc_mean: float
    auc_ci95: float | None
    aucpr_mean: float
    aucpr_ci95: float | None
    macro_f1_mean: float | None
    macro_f1_ci95: float | None


def _mean_hw(values):
    if len(values) >= 2:
        return mean_ci(values)
    return float(np.mean(values)), None


def aggregate(records: Sequence[MetricRecord]) -> list[Aggregate]:
    cells: dict[tuple, list[MetricRecord]] = {}
    for r in records:
        cells.setdefault((r.task, r.mode, r.pretrain_fraction, r.n_train), []).append(r)
    out = []
    for (task, mode, frac, n), rs in cells.items():
        am, ah = _mean_hw([r.auc for r in rs])
        pm, ph = _mean_hw([r.aucpr for r in rs])
        f1 = [r.macro_f1 for r in rs if r.macro_f1 is not None]
        fm, fh = _mean_hw(f1) if f1 else (None, None)
        out.append(Aggregate(task, mode, frac, n, len(rs), am, ah, pm, ph, fm, fh))
    return out


def aggregate_csv(rows: Sequence[Aggregate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(Aggregate)]
    w.writerow(names)
    for a in rows:
        w.writerow([_fmt(getattr(a, k)) for k in names])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# plots

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


class _Panel:
    def __init__(self, x0, y0, w, h, xs, ys, logx=True):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.logx = logx
        lx = [math.log10(x) if logx else x for x in xs]
        self.xmin, self.xmax = min(lx), max(lx)
        if self.xmax == self.xmin:
            self.xmin, self.xmax = self.xmin - 1, self.xmax + 1
        lo, hi = min(ys), max(ys)
        pad = max(0.02, 0.05 * (hi - lo))
        self.ymin, self.ymax = max(0.0, lo - pad), min(1.0, hi + pad)
        if self.ymax <= self.ymin:
            self.ymin, self.ymax = self.ymin - 0.05, self.ymax + 0.05

    def px(self, x):
        v = math.log10(x) if self.logx else x
        return self.x0 + (v - self.xmin) / (self.xmax - self.xmin) * self.w

    def py(self, y):
        return self.y0 + self.h - (y - self.ymin) / (self.ymax - self.ymin) * self.h

    def axes(self, xticks, xlabel, ylabel, title) -> list[str]:
        x0, y0, w, h = self.x0, self.y0, self.w, self.h
        parts = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#333"/>',
                 f'<text x="{x0 + w / 2:.1f}" y="{y0 - 10}" text-anchor="middle" font-size="13">{title}</text>',
                 f'<text x="{x0 + w / 2:.1f}" y="{y0 + h + 36}" text-anchor="middle" font-size="12">{xlabel}</text>',
                 f'<text x="{x0 - 42}" y="{y0 + h / 2:.1f}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 {x0 - 42} {y0 + h / 2:.1f})">{ylabel}</text>']
        for x, label in xticks:
            px = self.px(x)
            parts.append(f'<line x1="{px:.1f}" y1="{y0 + h}" x2="{px:.1f}" y2="{y0 + h + 5}" stroke="#333"/>')
            parts.append(f'<text x="{px:.1f}" y="{y0 + h + 18}" text-anchor="middle" font-size="11">{label}</text>')
        for y in np.linspace(self.ymin, self.ymax, 5):
            py = self.py(y)
            parts.append(f'<line x1="{x0 - 5}" y1="{py:.1f}" x2="{x0}" y2="{py:.1f}" stroke="#333"/>')
            parts.append(f'<text x="{x0 - 8}" y="{py + 4:.1f}" text-anchor="end" font-size="11">{y:.2f}</text>')
        return parts

    def series(self, pts, color, label, slot) -> list[str]:
        """pts: (x, mean, half_width or None) sorted by x."""
        coords = " ".join(f"{self.px(x):.1f},{self.py(m):.1f}" for x, m, _ in pts)
        parts = [f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>']
        for x, m, hw in pts:
            px, py = self.px(x), self.py(m)
            parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="3" fill="{color}"/>')
            if hw:
                lo, hi = self.py(max(self.ymin, m - hw)), self.py(min(self.ymax, m + hw))
                parts.append(f'<line x1="{px:.1f}" y1="{lo:.1f}" x2="{px:.1f}" y2="{hi:.1f}" stroke="{color}"/>')
        ly = self.y0 + 14 + 16 * slot
        lx = self.x0 + self.w + 12
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 24}" y="{ly}" font-size="11">{label}</text>')
        return parts


def _n_value(n, x_all: int) -> int:
    return x_all if n == "all" else int(n)


def svg_plot(rows: Sequence[Aggregate], task: str, x_all: int) -> str:
    """Left panel: AUC vs labelled examples at the largest fraction.  Right: AUC vs pretraining fraction."""
    top = max(r.pretrain_fraction for r in rows)
    left = [r for r in rows if r.pretrain_fraction == top]
    modes = list(dict.fromkeys(r.mode for r in rows))
    ns = sorted({_n_value(r.n_train, x_all) for r in rows})
    fracs = sorted({r.pretrain_fraction for r in rows})
    ys = [r.auc_mean for r in rows]
    p1 = _Panel(70, 40, 300, 240, ns, ys)
    p2 = _Panel(610, 40, 300, 240, fracs, ys)
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="1080" height="340" font-family="sans-serif">',
             '<rect width="100%" height="100%" fill="white"/>']
    parts += p1.axes([(n, "all" if n == x_all and any(r.n_train == "all" for r in rows) else str(n)) for n in ns],
                     "labelled training examples", "mean AUC", f"{task}: AUC vs labelled examples")
    for i, mode in enumerate(modes):
        pts = sorted((_n_value(r.n_train, x_all), r.auc_mean, r.auc_ci95) for r in left if r.mode == mode)
        parts += p1.series(pts, _COLORS[i % len(_COLORS)], mode, i)
    parts += p2.axes([(f, f"{f:g}") for f in fracs], "pretraining fraction", "mean AUC",
                     f"{task}: AUC vs pretraining size")
    slot = 0
    for mode in modes:
        for n in sorted({r.n_train for r in rows}, key=lambda v: _n_value(v, x_all)):
            pts = sorted((r.pretrain_fraction, r.auc_mean, r.auc_ci95) for r in rows
                         if r.mode == mode and r.n_train == n)
            if len(pts) < 1:
                continue
            parts += p2.series(pts, _COLORS[slot % len(_COLORS)], f"{mode} n={n}", slot)
            slot += 1
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_outputs(spec: ExperimentSpec, records: Sequence[MetricRecord], out: Path, x_all: int) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    rows = aggregate(records)
    paths = {"csv": out / "results.csv", "aggregate": out / "aggregate.csv", "svg": out / f"{spec.task.replace(':', '-')}.svg"}
    paths["csv"].write_text(records_csv(records, spec.task), encoding="utf-8")
    paths["aggregate"].write_text(aggregate_csv(rows), encoding="utf-8")
    paths["svg"].write_text(svg_plot(rows, spec.task.replace(":", "-"), x_all), encoding="utf-8")
    return paths
