"""``radtex`` command line: data generation, vocabulary, pretraining, transfer, captioning, sweeps.

Settings merge in order: built-in defaults, ``--config`` JSON, explicit flags.
The merged view is written to ``<out>/config.resolved.json`` before any work
and can be fed back through ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import synthdata as S
from . import textpipe as tp
from .bench import harness
from .gradcheck import run_suite
from .model import CaptioningModel, load_checkpoint, save_checkpoint
from .train import loops
from .train.loops import ConfigError, RunSpec

log = logging.getLogger("radtex")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _n_train(text: str):
    return text if text == "all" else int(text)


# RunSpec fields exposed as flags: name -> parser type
_RUN_FLAGS = {
    "mode": str, "task": str, "epochs": int, "batch_size": int, "max_lr": float, "weight_decay": float,
    "momentum": float, "warmup_fraction": float, "lookahead": _bool, "lookahead_k": int,
    "lookahead_alpha": float, "n_train": int, "rotation": float, "translation": float, "vocab_size": int,
    "max_caption_len": int, "data": str, "test_data": str, "init": str,
}
_SYNTH_FLAGS = {"canvas": int, "noise_amplitude": float, "contrast": float, "jitter": float, "clutter": int}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radtex", description="Captioning pretraining and label-efficient transfer.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="JSON file with settings for this command")
        c.add_argument("--out", help="output directory (default: ./out)")
        c.add_argument("--seed", type=int)
        c.add_argument("--threads", type=int, help="worker cap (fallback: RADTEX_THREADS, then cores)")
        c.add_argument("-v", "--verbose", action="store_true")
        return c

    c = command("gen-data", "write a synthetic corpus (PGM images + reports.jsonl)")
    c.add_argument("--n", type=int)
    c.add_argument("--prior", type=float, help="presence prior shared by all findings")
    for k, t in _SYNTH_FLAGS.items():
        c.add_argument(_flag(k), dest=k, type=t)

    c = command("train-vocab", "train a wordpiece vocabulary on a corpus's FINDINGS text")
    c.add_argument("--data")
    c.add_argument("--vocab-size", dest="vocab_size", type=int)

    for name, help_ in (("pretrain", "bidirectional captioning pretraining"),
                        ("transfer", "frozen / unfrozen / scratch downstream training")):
        c = command(name, help_)
        for k, t in _RUN_FLAGS.items():
            c.add_argument(_flag(k), dest=k, type=_n_train if k == "n_train" else t)
        if name == "pretrain":
            c.add_argument("--vocab", help="vocabulary file (trained on the corpus when absent)")
        else:
            c.add_argument("--trials", type=int)

    c = command("caption", "generate FINDINGS text with beam search")
    c.add_argument("--checkpoint")
    c.add_argument("--data")
    c.add_argument("--beams", type=int)
    c.add_argument("--max-len", dest="max_len", type=int)
    c.add_argument("--limit", type=int)

    c = command("bench", "data-efficiency sweep with CSV and SVG output")
    c.add_argument("--spec", help="ExperimentSpec JSON")
    c.add_argument("--trials", type=int)
    c.add_argument("--task")

    c = command("grad-check", "finite-difference check of every differentiable op")
    c.add_argument("--instances", type=int)
    c.add_argument("--ops", help="comma-separated subset of ops")
    return p


DEFAULTS = {
    "gen-data": {"n": 1000, "seed": 0, "synth": {}},
    "train-vocab": {"vocab_size": 1000},
    "pretrain": {"mode": "pretrain"},
    "transfer": {"mode": "frozen", "trials": 1},
    "caption": {"beams": 2, "limit": None, "max_len": None},
    "bench": {},
    "grad-check": {"instances": 20, "seed": 0, "ops": None},
}
_GLOBAL = ("config", "out", "threads", "verbose", "command", "spec")


def resolve(args: argparse.Namespace) -> dict:
    """defaults ← config file ← explicit flags."""
    cfg = json.loads(json.dumps(DEFAULTS[args.command]))
    path = args.config or getattr(args, "spec", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded.pop("command", None)
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k in _GLOBAL or v is None:
            continue
        if k in _SYNTH_FLAGS:
            cfg.setdefault("synth", {})[k] = v
        elif k == "prior":
            cfg.setdefault("synth", {})["priors"] = [v] * len(S.FINDINGS)
        else:
            cfg[k] = v
    return cfg


def threads_from(args) -> int:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("RADTEX_THREADS"):
        try:
            n = int(os.environ["RADTEX_THREADS"])
        except ValueError:
            raise ConfigError("RADTEX_THREADS must be an integer") from None
    else:
        n = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    return n


def _write_resolved(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(
        json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(_flag(k) for k in missing))


def _run_spec(cfg: dict) -> RunSpec:
    known = {f.name for f in fields(RunSpec)}
    extra = set(cfg) - known - {"vocab", "trials", "loss"}
    if extra:
        raise ConfigError(f"unknown settings: {sorted(extra)}")
    return RunSpec.from_dict({k: v for k, v in cfg.items() if k in known}).resolved()


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, out: Path, threads: int) -> dict:
    synth = S.SynthConfig.from_dict(cfg.get("synth", {}))
    synth.validate()
    cfg["synth"] = S.config_dict(synth)
    if int(cfg["n"]) < 1:
        raise ConfigError("--n must be at least 1")
    _write_resolved(out, "gen-data", cfg)
    S.generate_corpus(synth, int(cfg["n"]), int(cfg["seed"]), out)
    return {"examples": int(cfg["n"]), "path": str(out)}


def cmd_train_vocab(cfg: dict, out: Path, threads: int) -> dict:
    _require(cfg, "data")
    _write_resolved(out, "train-vocab", cfg)
    ds = S.load_dataset(cfg["data"])
    vocab = tp.train_vocab(ds.findings, int(cfg["vocab_size"]))
    vocab.save(out / "vocab.txt")
    lengths = [len(tp.tokenize(tp.normalize(f), vocab)) for f in ds.findings]
    return {"pieces": len(vocab), "p95_tokens": tp.percentile_length(lengths, 95)}


def cmd_pretrain(cfg: dict, out: Path, threads: int) -> dict:
    _require(cfg, "data")
    spec = _run_spec(cfg)
    if spec.mode != "pretrain":
        raise ConfigError("pretrain needs mode=pretrain")
    cfg.update(spec.to_dict())
    _write_resolved(out, "pretrain", cfg)
    ds = S.load_dataset(spec.data)
    vocab = tp.Vocabulary.load(cfg["vocab"]) if cfg.get("vocab") else None
    result = loops.pretrain(spec, ds, vocab)
    save_checkpoint(result.model, out / "model.ckpt")
    result.log.write_csv(out / "loss.csv")
    (out / "epoch_loss.csv").write_text(
        "epoch,loss\n" + "".join(f"{e},{v!r}\n" for e, v in enumerate(result.epoch_losses)), encoding="utf-8")
    return {"checkpoint": str(out / "model.ckpt"), "final_loss": result.epoch_losses[-1]}


def cmd_transfer(cfg: dict, out: Path, threads: int) -> dict:
    _require(cfg, "data")
    spec = _run_spec(cfg)
    if spec.mode == "pretrain":
        raise ConfigError("transfer needs mode frozen, unfrozen or scratch")
    if spec.mode != "scratch" and not spec.init:
        raise ConfigError(f"{spec.mode} transfer needs --init")
    trials = int(cfg.get("trials") or 1)
    if trials < 1:
        raise ConfigError("--trials must be at least 1")
    cfg.update(spec.to_dict())
    _write_resolved(out, "transfer", cfg)
    train = S.load_dataset(spec.data)
    if spec.n_train is not None and spec.n_train > harness.labelled_count(spec.task, train):
        raise ConfigError(f"n_train={spec.n_train} exceeds the training split")
    init = load_checkpoint(spec.init) if spec.mode != "scratch" else None

    def save(trial, result):
        save_checkpoint(result.model, out / f"classifier_{trial}.ckpt")
        result.log.write_csv(out / f"loss_{trial}.csv")

    if spec.test_data:
        test = S.load_dataset(spec.test_data)
        recs = loops.run_trials(spec, train, test, init, n_trials=trials, on_trial=save)
        (out / "results.csv").write_text(harness.records_csv(recs, spec.task), encoding="utf-8")
        return {"trials": trials, "auc": [r.auc for r in recs]}
    for trial in range(trials):
        trial_spec = RunSpec.from_dict({**spec.to_dict(), "seed": spec.seed + trial})
        subset = train
        if spec.n_train is not None:
            idx = loops.subsample(loops.task_targets(spec.task, train), spec.n_train,
                                  np.random.default_rng([trial_spec.seed, 7]))
            subset = train.subset(idx)
        save(trial, loops.transfer(trial_spec, subset, init))
    return {"trials": trials}


def cmd_caption(cfg: dict, out: Path, threads: int) -> dict:
    from .decode import generate_report

    _require(cfg, "checkpoint", "data")
    _write_resolved(out, "caption", cfg)
    model = load_checkpoint(cfg["checkpoint"])
    if not isinstance(model, CaptioningModel):
        raise ConfigError("caption needs a captioning checkpoint")
    ds = S.load_dataset(cfg["data"])
    n = len(ds) if cfg.get("limit") is None else min(len(ds), int(cfg["limit"]))
    with open(out / "captions.jsonl", "w", encoding="utf-8") as fh:
        for i in range(n):
            text = generate_report(model, ds.images[i], int(cfg["beams"]), cfg.get("max_len"))
            fh.write(json.dumps({"id": ds.ids[i], "generated": text, "reference": ds.findings[i]}) + "\n")
    return {"captions": n}


def cmd_bench(cfg: dict, out: Path, threads: int) -> dict:
    spec = harness.ExperimentSpec.from_dict(cfg)
    _write_resolved(out, "bench", spec.to_dict())
    records = harness.run_experiment(spec, out, threads=threads)
    return {"rows": len(records), "csv": str(out / "results.csv")}


def cmd_grad_check(cfg: dict, out: Path | None, threads: int) -> dict:
    from .gradcheck import OPS

    ops = cfg.get("ops")
    if isinstance(ops, str):
        ops = [o.strip() for o in ops.split(",") if o.strip()]
    unknown = [o for o in ops or () if o not in OPS]
    if unknown:
        raise ConfigError(f"unknown ops: {unknown}")
    if out is not None:
        _write_resolved(out, "grad-check", cfg)
    results = run_suite(int(cfg["instances"]), int(cfg["seed"]), ops)
    lines = ["op,instances,max_rel_err,passed"] + [
        f"{r.op},{r.instances},{r.max_rel_err:.3e},{int(r.passed)}" for r in results]
    for line in lines:
        print(line)
    if out is not None:
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise GradCheckFailed("ops over tolerance: " + ",".join(failed))
    return {"ops": len(results)}


class GradCheckFailed(Exception):
    pass


COMMANDS = {
    "gen-data": cmd_gen_data, "train-vocab": cmd_train_vocab, "pretrain": cmd_pretrain,
    "transfer": cmd_transfer, "caption": cmd_caption, "bench": cmd_bench, "grad-check": cmd_grad_check,
}


def _fail(kind: str, message: str, code: int) -> int:
    one_line = " ".join(str(message).split())
    print(f"radtex: error: {kind}: {one_line}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve(args)
        threads = threads_from(args)
        if args.command == "grad-check":
            out = Path(args.out) if args.out else None
        else:
            out = Path(args.out or "out")
        summary = COMMANDS[args.command](cfg, out, threads)
    except (ConfigError, tp.AbsentSectionError) as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        return _fail("config", f"{type(exc).__name__}: {exc}", EXIT_CONFIG)
    except GradCheckFailed as exc:
        return _fail("gradcheck", exc, EXIT_FAIL)
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure on one line
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_FAIL)
    if summary is not None and args.command != "grad-check":
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
