"""Command-line entry point: ``routekt {synth,preprocess,relmat,train,eval}``.

Every subcommand resolves its configuration as built-in defaults, then an
optional ``--config`` JSON file, then explicit flags, and writes a
``manifest.json`` into ``--out`` before doing any work.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import (DataError, Vocab, file_digest, load_artifact, load_dataset, make_splits, preprocess,
                   save_artifact)
from .model import load_checkpoint
from .relevance import RouteIndex, build_relevance_matrix, relevance_stats
from .synth import SynthSpec, generate
from .train import TrainConfig, TrainingDiverged, cross_validate, evaluate, relevance_for

log = logging.getLogger("routekt")

EXIT_OK, EXIT_CONFIG, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3, 4
ARTIFACT_NAME = "dataset.json"


class ConfigError(ValueError):
    pass


# Flag name -> (default, type, help). Defaults live here and nowhere else in the CLI.
OPTIONS: dict[str, tuple[object, type, str]] = {
    "data": (None, str, "input path: interactions JSONL for preprocess, dataset artifact otherwise"),
    "questions": (None, str, "question/concept routes JSONL"),
    "out": (None, str, "output directory"),
    "seed": (0, int, "random seed for splits, initialisation and batching"),
    "dim": (64, int, "embedding width"),
    "heads": (4, int, "attention heads"),
    "blocks": (2, int, "blocks per attention stack"),
    "lr": (1e-4, float, "Adam learning rate"),
    "batch": (64, int, "sequences per mini-batch"),
    "epochs": (200, int, "maximum training epochs"),
    "patience": (10, int, "epochs without validation-AUC improvement before stopping"),
    "max_len": (200, int, "keep at most this many most recent interactions per student"),
    "min_interactions": (3, int, "drop students with fewer interactions"),
    "threads": (1, int, "BLAS threads; 1 keeps runs bit-for-bit reproducible"),
    "folds": (None, str, "comma-separated folds to train (default: all five)"),
    "checkpoint": (None, str, "checkpoint to evaluate"),
    "roots": (2, int, "synthetic concept trees"),
    "depth": (3, int, "levels per synthetic concept tree"),
    "branching": (2, int, "children per synthetic concept"),
    "questions_per_leaf": (25, int, "synthetic questions attached to each leaf concept"),
    "students": (500, int, "synthetic students"),
    "min_seq": (3, int, "shortest synthetic sequence"),
    "max_seq": (100, int, "longest synthetic sequence"),
    "gain": (0.25, float, "mastery gain per related prior exposure"),
    "guess": (0.2, float, "probability of a correct answer without mastery"),
    "slip": (0.1, float, "probability of an error despite mastery"),
}
SYNTH_KEYS = ["roots", "depth", "branching", "questions_per_leaf", "students", "min_seq", "max_seq",
              "gain", "guess", "slip"]
SUBCOMMAND_OPTIONS = {
    "synth": ["out", "seed"] + SYNTH_KEYS,
    "preprocess": ["data", "questions", "out", "seed", "max_len", "min_interactions"],
    "relmat": ["data", "out"],
    "train": ["data", "out", "seed", "dim", "heads", "blocks", "lr", "batch", "epochs", "patience",
              "folds", "threads"],
    "eval": ["data", "checkpoint", "out", "batch", "threads"],
}
REQUIRED = {
    "synth": ["out"],
    "preprocess": ["data", "questions", "out"],
    "relmat": ["data", "out"],
    "train": ["data", "out"],
    "eval": ["data", "checkpoint", "out"],
}


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    input_hashes: dict[str, str]
    version: str
    seed: int | None

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="routekt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMAND_OPTIONS) + "}")
    helps = {
        "synth": "generate a synthetic dataset with known concept routes",
        "preprocess": "filter, expand, truncate/pad and split raw interactions",
        "relmat": "build per-student relevance matrices and summary statistics",
        "train": "cross-validated training with early stopping on validation AUC",
        "eval": "evaluate a checkpoint on the held-out test split",
    }
    for name, opts in SUBCOMMAND_OPTIONS.items():
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="JSON file of option values; explicit flags override it")
        for opt in opts:
            default, typ, text = OPTIONS[opt]
            # SUPPRESS keeps unset flags out of the namespace so the config file can fill them.
            p.add_argument(_flag(opt), dest=opt, type=typ, default=argparse.SUPPRESS,
                           help=f"{text} (default: {default})")
        if name == "train":
            p.add_argument("--no-mask", dest="mask", action="store_false", default=argparse.SUPPRESS,
                           help="ablation: attend to every past step regardless of concept routes "
                                "(default: mask enabled)")
    return parser


def resolve_config(subcommand: str, flags: dict) -> dict:
    """Defaults < config file < flags, restricted to the subcommand's options."""
    allowed = list(SUBCOMMAND_OPTIONS[subcommand]) + (["mask"] if subcommand == "train" else [])
    cfg = {k: OPTIONS[k][0] for k in SUBCOMMAND_OPTIONS[subcommand]}
    if subcommand == "train":
        cfg["mask"] = True
    if flags.get("config"):
        try:
            file_cfg = json.loads(Path(flags["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {flags['config']}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key not in allowed:
                raise ConfigError(f"unknown config key {key!r} for {subcommand}")
            cfg[key] = value
    for key, value in flags.items():
        if key in allowed:
            cfg[key] = value
    for key in allowed:
        typ = bool if key == "mask" else OPTIONS[key][1]
        value = cfg[key]
        if value is None:
            continue
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            cfg[key] = value = float(value)
        if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
            raise ConfigError(f"{key} must be {typ.__name__}, got {value!r}")
    missing = [_flag(k) for k in REQUIRED[subcommand] if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"{subcommand} requires {', '.join(missing)}")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch"], max_epochs=cfg["epochs"], patience=cfg["patience"],
                     dim=cfg["dim"], heads=cfg["heads"], blocks=cfg["blocks"], seed=cfg["seed"],
                     use_mask=cfg["mask"], threads=cfg["threads"])
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return tc


def _hashes(cfg: dict, keys: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for k in keys:
        if cfg.get(k) is not None:
            path = Path(cfg[k])
            if not path.is_file():
                raise DataError(f"--{k.replace('_', '-')}: no such file {path}")
            out[k] = file_digest(path)
    return out


def _artifact_path(p: str) -> Path:
    path = Path(p)
    return path / ARTIFACT_NAME if path.is_dir() else path


# ---------------------------------------------------------------- subcommands


def cmd_synth(cfg: dict, out: Path) -> None:
    spec = SynthSpec(roots=cfg["roots"], depth=cfg["depth"], branching=cfg["branching"],
                     questions_per_leaf=cfg["questions_per_leaf"], students=cfg["students"],
                     min_len=cfg["min_seq"], max_len=cfg["max_seq"], gain=cfg["gain"], guess=cfg["guess"],
                     slip=cfg["slip"], seed=cfg["seed"])
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    paths = generate(spec).write(out)
    print(f"wrote {paths['interactions']} and {paths['questions']}")


def cmd_preprocess(cfg: dict, out: Path) -> None:
    records, table, load_report = load_dataset(cfg["data"], cfg["questions"])
    seqs, report = preprocess(records, table, max_len=cfg["max_len"],
                              min_interactions=cfg["min_interactions"], load_report=load_report)
    split = make_splits(seqs, cfg["seed"])
    digest = save_artifact(out / ARTIFACT_NAME, seqs, table, split, report,
                           {"config": cfg, "inputs": file_digest(cfg["data"], cfg["questions"])})
    print(f"{len(seqs)} sequences, {report.dropped_short} dropped as short; artifact sha256 {digest}")


def cmd_relmat(cfg: dict, out: Path) -> None:
    seqs, table, _, _ = load_artifact(_artifact_path(cfg["data"]))
    index = RouteIndex(table)
    arrays, summary, text = {}, [], []
    for s in seqs:
        n = int(s.valid_mask.sum())
        F = build_relevance_matrix(s.questions[:n], index)
        arrays[s.student_id] = F.entries
        st = relevance_stats(F)
        text.append(f"# {s.student_id}\n{F.to_text()}\n{st.to_text()}\n")
        summary.append({"student_id": s.student_id, "n": st.n, "density": st.density, "isolated": st.isolated})
    np.savez_compressed(out / "relevance.npz", **arrays)
    (out / "relevance.txt").write_text("\n".join(text))
    (out / "relevance_stats.jsonl").write_text("".join(json.dumps(r) + "\n" for r in summary))
    densities = [r["density"] for r in summary if r["n"] > 1]
    mean = float(np.mean(densities)) if densities else float("nan")
    print(f"{len(summary)} matrices, mean off-diagonal density {mean:.4f}")


def cmd_train(cfg: dict, out: Path) -> None:
    tc = train_config(cfg)
    seqs, table, split, _ = load_artifact(_artifact_path(cfg["data"]))
    folds = None
    if cfg["folds"]:
        try:
            folds = [int(f) for f in cfg["folds"].split(",")]
        except ValueError as exc:
            raise ConfigError(f"--folds must be comma-separated integers, got {cfg['folds']!r}") from exc
        if any(not 0 <= f < len(split.folds) for f in folds):
            raise ConfigError(f"--folds entries must lie in [0, {len(split.folds)})")
    (out / "config.json").write_text(json.dumps(asdict(tc), indent=2, sort_keys=True) + "\n")
    report, _ = cross_validate(tc, seqs, table, split, folds=folds, run_dir=out)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    if report.auc_mean is None:
        print("test AUC undefined on every fold")
    else:
        print(f"test AUC {report.auc_mean:.4f} ± {report.auc_std:.4f}, "
              f"accuracy {report.accuracy_mean:.4f} ± {report.accuracy_std:.4f}")


def cmd_eval(cfg: dict, out: Path) -> None:
    seqs, table, split, _ = load_artifact(_artifact_path(cfg["data"]))
    model, _, _ = load_checkpoint(cfg["checkpoint"])
    vocab = Vocab.from_data(seqs, table)
    if vocab.num_questions > model.config.num_questions or vocab.num_concepts > model.config.num_concepts:
        raise DataError("dataset ids exceed the checkpoint's vocabulary")
    test = [seqs[i] for i in split.test]
    report = evaluate(model, test, relevance_for(test, table), batch_size=cfg["batch"])
    (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    auc = "undefined (single class)" if report.auc is None else f"{report.auc:.4f}"
    print(f"test AUC {auc}, accuracy {report.accuracy:.4f} over {report.count} predictions")


COMMANDS: dict[str, tuple[Callable[[dict, Path], None], tuple[str, ...]]] = {
    "synth": (cmd_synth, ()),
    "preprocess": (cmd_preprocess, ("data", "questions")),
    "relmat": (cmd_relmat, ()),
    "train": (cmd_train, ()),
    "eval": (cmd_eval, ("checkpoint",)),
}


def _suggest(argv: list[str]) -> int | None:
    if not argv or argv[0].startswith("-") or argv[0] in COMMANDS:
        return None
    close = difflib.get_close_matches(argv[0], list(COMMANDS), n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    print(f"routekt: error: unknown subcommand {argv[0]!r}{hint}", file=sys.stderr)
    print(f"choose from: {', '.join(COMMANDS)}", file=sys.stderr)
    return EXIT_USAGE


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    status = _suggest(argv)
    if status is not None:
        return status
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.subcommand is None:
        parser.print_help()
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(ns).items() if k not in ("subcommand", "verbose")}
    run, path_keys = COMMANDS[ns.subcommand]
    try:
        cfg = resolve_config(ns.subcommand, flags)
        hashes = _hashes(cfg, path_keys)
        if ns.subcommand in ("relmat", "train", "eval"):
            hashes["data"] = file_digest(_artifact_path(cfg["data"]))
        out = Path(cfg["out"])
        if ns.subcommand == "train":
            cfg["train_config"] = asdict(train_config(cfg))
        RunManifest(ns.subcommand, cfg, hashes, __version__, cfg.get("seed")).write(out)
        with threadpool_limits(cfg.get("threads", 1)):
            run(cfg, out)
    except ConfigError as exc:
        print(f"routekt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"routekt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"routekt: training error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
