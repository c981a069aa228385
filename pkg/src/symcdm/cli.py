"""Command-line surface: train, eval, diagnose, export-tree, synth, defaults.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
failure. Every command is deterministic given its flags and input files;
outputs are written only under the requested output locations.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import dataset as ds_mod
from .autodiff import PoConfig, monotonicity_audit, predict_dataset
from .errors import ConfigError, DataError, TrainingError
from .exprtree import parse, serialize, to_graph, to_infix
from .gp import GpConfig
from .metrics import evaluate_model
from .trainer import EsConfig, TrainConfig, TrainedModel, VARIANTS, run_training

_CONFIG_SECTIONS = {
    "dataset": (
        "logs",
        "qmatrix",
        "n_students",
        "test_fraction",
        "split_seed",
        "attribute_labels",
    ),
    "train": ("outer_epochs", "variant", "seed"),
    "po": ("learning_rate", "batch_size", "inner_epochs", "shuffle_seed"),
    "gp": (
        "population_size",
        "generations",
        "crossover_rate",
        "mutation_rate",
        "init_depth",
        "tournament_k",
        "selection_mode",
        "max_height",
        "prefer_larger_on_tie",
        "seed",
    ),
    "es": ("learning_rate", "population_size", "generations", "mutation_rate", "tournament_k"),
    "output": ("dir",),
}

DOA_EXACT_STUDENT_LIMIT = 1000


def _default_config() -> dict:
    return {
        "dataset": {
            "logs": "logs.csv",
            "qmatrix": "qmatrix.csv",
            "n_students": 1,
            "test_fraction": 0.2,
            "split_seed": 0,
        },
        "train": {"outer_epochs": 10, "variant": "full", "seed": 0},
        "po": asdict(PoConfig()),
        "gp": asdict(GpConfig()),
        "es": asdict(EsConfig()),
        "output": {"dir": "run_out"},
    }


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    for section, content in raw.items():
        if section not in _CONFIG_SECTIONS:
            raise ConfigError(f"{p}: unknown config section {section!r}")
        if not isinstance(content, dict):
            raise ConfigError(f"{p}: section {section!r} must be an object")
        for key in content:
            if key not in _CONFIG_SECTIONS[section]:
                raise ConfigError(f"{p}: unknown key {section}.{key}")
    merged = _default_config()
    for section, content in raw.items():
        merged[section].update(content)
    return merged


def _build_train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            outer_epochs=cfg["train"]["outer_epochs"],
            variant=cfg["train"]["variant"],
            seed=cfg["train"]["seed"],
            po=PoConfig(**cfg["po"]),
            gp=GpConfig(**cfg["gp"]),
            es=EsConfig(**cfg["es"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training configuration: {exc}") from None


def _load_dataset(cfg_ds: dict) -> ds_mod.ResponseDataset:
    q = ds_mod.load_qmatrix(cfg_ds["qmatrix"])
    return ds_mod.load_logs(cfg_ds["logs"], cfg_ds["n_students"], q)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("SYMCDM_THREADS", "1"))


def cmd_defaults(args) -> int:
    print(json.dumps(_default_config(), indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.variant is not None:
        cfg["train"]["variant"] = args.variant
    out_dir = Path(args.out if args.out is not None else cfg["output"]["dir"])
    train_cfg = _build_train_config(cfg)
    full = _load_dataset(cfg["dataset"])
    train_ds, test_ds = ds_mod.split(
        full, cfg["dataset"]["test_fraction"], cfg["dataset"]["split_seed"]
    )
    labels = cfg["dataset"].get("attribute_labels")
    if labels is not None and len(labels) != full.qmatrix.n_attributes:
        raise ConfigError(
            f"attribute_labels has {len(labels)} entries for "
            f"{full.qmatrix.n_attributes} attributes"
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    log_lines: list[str] = []
    model = run_training(
        train_ds,
        train_cfg,
        log=log_lines.append,
        threads=_threads(args),
        attribute_labels=labels,
    )
    model.save(out_dir)
    (out_dir / "run.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    ds_mod.save_logs(train_ds, out_dir / "train_split.csv")
    if test_ds.n_logs:
        ds_mod.save_logs(test_ds, out_dir / "test_split.csv")
    print(f"model written to {out_dir}")
    print(f"final train accuracy {model.history[-1].train_accuracy:.4f}")
    print(f"tree {to_infix(model.tree)}")
    return 0


def cmd_eval(args) -> int:
    model = TrainedModel.load(args.model_dir)
    q = ds_mod.load_qmatrix(args.qmatrix)
    ds = ds_mod.load_logs(args.logs, model.params.n_students, q)
    if (
        q.n_exercises != model.params.n_exercises
        or q.n_attributes != model.params.n_attributes
    ):
        raise DataError(
            f"model expects {model.params.n_exercises} exercises x "
            f"{model.params.n_attributes} attributes, dataset has "
            f"{q.n_exercises} x {q.n_attributes}"
        )
    if args.doa_mode == "exact" and ds.n_students > DOA_EXACT_STUDENT_LIMIT and not args.force:
        raise ConfigError(
            f"exact DOA is O(N^2) and N={ds.n_students} > {DOA_EXACT_STUDENT_LIMIT}; "
            f"pass --force or use --doa-mode sampled"
        )
    probs = predict_dataset(model.tree, model.params, ds)
    report = evaluate_model(
        probs,
        ds,
        model.params.p_effective,
        doa_mode=args.doa_mode,
        doa_pairs=args.doa_pairs,
        doa_seed=0,
    )
    print(report.summary())
    report.save(Path(args.model_dir) / "eval_report.json")
    return 0


def cmd_diagnose(args) -> int:
    model = TrainedModel.load(args.model_dir)
    p = model.params.p_effective
    diff = model.params.diff_effective
    n, l = p.shape
    labels = model.attribute_labels or [f"attr_{k}" for k in range(l)]
    out_dir = Path(args.out if args.out is not None else args.model_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.all:
        header = "student," + ",".join(labels)
        rows = [header]
        for i in range(n):
            rows.append(f"{i}," + ",".join(f"{v:.6f}" for v in p[i]))
        print("\n".join(rows))
        (out_dir / "diagnosis_all.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        return 0

    i = args.student
    if not 0 <= i < n:
        raise DataError(f"student index {i} out of range [0, {n})")
    exercises = args.exercise if args.exercise else list(range(model.params.n_exercises))
    for j in exercises:
        if not 0 <= j < model.params.n_exercises:
            raise DataError(f"exercise index {j} out of range [0, {model.params.n_exercises})")
    print(f"student {i} proficiency:")
    for k, name in enumerate(labels):
        print(f"  {name}  {p[i, k]:.6f}")
    for j in args.exercise or []:
        print(f"exercise {j} difficulty:")
        for k, name in enumerate(labels):
            print(f"  {name}  {diff[j, k]:.6f}")
    # Plot data: per attribute, this student's proficiency next to the mean
    # difficulty of the requested exercises (all exercises by default).
    diff_col = diff[exercises].mean(axis=0)
    rows = ["attribute,proficiency,difficulty"]
    for k, name in enumerate(labels):
        rows.append(f"{name},{p[i, k]:.6f},{diff_col[k]:.6f}")
    plot_path = out_dir / f"diagnosis_student_{i}.csv"
    plot_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"plot data written to {plot_path}")
    return 0


def cmd_export_tree(args) -> int:
    model = TrainedModel.load(args.model_dir)
    if args.format == "infix":
        text = to_infix(model.tree) + "\n"
    elif args.format == "structured":
        text = serialize(model.tree) + "\n"
        parse(text.strip())  # round-trip guarantee
    elif args.format == "graph":
        text = to_graph(model.tree)
    else:  # argparse choices guard this; defensive for direct calls
        raise ConfigError(f"unknown format {args.format!r}")
    out = Path(args.out if args.out is not None else Path(args.model_dir) / f"tree.{args.format}")
    out.write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_synth(args) -> int:
    ds, truth = ds_mod.generate_synthetic(
        args.students,
        args.exercises,
        args.attrs,
        args.density,
        args.seed,
        logs_per_student=args.logs_per_student,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds_mod.save_logs(ds, out / "logs.csv")
    ds_mod.save_qmatrix(ds.qmatrix, out / "qmatrix.csv")
    truth_payload = {
        "n_students": args.students,
        "n_exercises": args.exercises,
        "n_attributes": args.attrs,
        "density": args.density,
        "seed": args.seed,
        "bayes_accuracy": truth.bayes_accuracy,
        "true_p": [[repr(float(v)) for v in row] for row in truth.true_p],
        "true_diff": [[repr(float(v)) for v in row] for row in truth.true_diff],
        "true_disc": [repr(float(v)) for v in truth.true_disc],
    }
    (out / "truth.json").write_text(
        json.dumps(truth_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote {ds.n_logs} logs for {args.students} students to {out}")
    print(f"bayes accuracy {truth.bayes_accuracy:.4f}")
    return 0


def cmd_audit(args) -> int:
    model = TrainedModel.load(args.model_dir)
    q = ds_mod.load_qmatrix(args.qmatrix)
    report = monotonicity_audit(
        model.tree, model.params, q, n_probes=args.probes, step=args.step, seed=args.seed
    )
    print(
        f"monotonicity violations: {report.n_violations}/{report.n_probes} "
        f"(rate {report.violation_rate:.6f})"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="symcdm",
        description="Symbolic cognitive diagnosis: train, evaluate, and inspect models.",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker cap for fitness evaluation (default: SYMCDM_THREADS or 1); "
        "never changes results",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on a log file")
    p.add_argument("model_dir")
    p.add_argument("logs")
    p.add_argument("qmatrix")
    p.add_argument("--doa-mode", choices=("exact", "sampled"), default="exact")
    p.add_argument("--doa-pairs", type=int, default=1_000_000)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="print proficiency/difficulty for students")
    p.add_argument("model_dir")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--student", type=int)
    group.add_argument("--all", action="store_true")
    p.add_argument("--exercise", type=int, action="append")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("export-tree", help="write the fittest tree in a chosen format")
    p.add_argument("model_dir")
    p.add_argument("--format", choices=("infix", "graph", "structured"), default="structured")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_tree)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--students", type=int, required=True)
    p.add_argument("--exercises", type=int, required=True)
    p.add_argument("--attrs", type=int, required=True)
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--logs-per-student", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("audit", help="numeric monotonicity audit of a trained model")
    p.add_argument("model_dir")
    p.add_argument("qmatrix")
    p.add_argument("--probes", type=int, default=100_000)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("defaults", help="print the full default config as JSON")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
