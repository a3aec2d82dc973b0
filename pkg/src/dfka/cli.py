"""Command-line entry point.

Every command works inside ``<out>/<digest>/`` where the digest hashes the
effective configuration (file plus ``--seed``/``--gamma``/``--k-teachers``
overrides; ``--method`` and ``--lambda`` only pick what to run). Commands run
in order ``train-teachers``, ``generate``, ``fit-ood``, ``train-student``,
``evaluate``; each one only builds its own stage and exits with code 3 if an
earlier one has not been run. ``ablate`` and ``sweep`` build whatever they
need. Results go to ``records/<command>*.jsonl`` (one JSON object per line,
sorted keys) and a summary table on stdout.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import METHODS, ConfigError, ExperimentConfig, load_config, save_config
from .generator import steering_success
from .training import accuracy

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_TEACHER = 4

ABLATIONS = ("stratanet", "stratanet_mul", "stratanet_noST", "md_conf", "msp_conf")
SWEEP_LAMBDAS = (0.0, 0.25, 0.5, 0.65, 0.75, 1.0)

BUILDS = {
    "train-teachers": {"teachers"},
    "generate": {"lm", "transfer"},
    "fit-ood": {"ood"},
    "train-student": {"student"},
    "evaluate": set(),
    "ablate": {"student"},
    "sweep": True,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfka",
        description="Data-free amalgamation of text-classification teachers into one student.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "train-teachers": "train the teachers on their label subsets",
        "generate": "train the base LM and generate steered pseudo-data",
        "fit-ood": "fit the per-teacher Gaussian confidence statistics",
        "train-student": "train the student for --method",
        "evaluate": "report test accuracy for --method",
        "ablate": "train and evaluate the amalgamation variants",
        "sweep": "run the whole chain over a grid of lambda values",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", type=Path, help="JSON run config (defaults to the built-in config)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("runs"), help="root of the run directories (default: runs)")
        p.add_argument("--method", choices=METHODS, help="method to train or evaluate (default: the config's)")
        p.add_argument("--lambda", dest="lam", type=float, help="loss mixing weight for amalgamation methods")
        p.add_argument("--gamma", type=float, help="override the steering strength")
        p.add_argument("--k-teachers", type=int, help="heterogeneous setting with this many teachers")
        p.add_argument("--emit-plots", action="store_true", help="also write PNG charts of the results")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def effective_config(args) -> ExperimentConfig:
    if args.config is not None and not args.config.is_file():
        raise ConfigError(f"config file {args.config} does not exist")
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.gamma is not None:
        cfg = cfg.replace(**{"steer.gamma": args.gamma})
    if args.k_teachers is not None:
        if args.k_teachers < 1:
            raise ConfigError("--k-teachers must be >= 1")
        cfg = P.teacher_sweep_config(cfg, args.k_teachers)
    if args.lam is not None and not 0.0 <= args.lam <= 1.0:
        raise ConfigError("--lambda must lie in [0, 1]")
    return cfg


def run_dir(cfg: ExperimentConfig, out: Path) -> tuple[Path, str]:
    # the method is a per-command choice, so it does not split run directories
    digest = cfg.replace(method=ExperimentConfig().method).digest()
    return out / digest, digest


def _write(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    P.write_records(path, records)


def _tag(command: str, method: str | None = None, lam: float | None = None) -> str:
    parts = [command] + ([method] if method else []) + ([f"lam{lam:g}"] if lam is not None else [])
    return "_".join(parts)


def _table(rows: list[tuple[str, str]]) -> str:
    width = max(len(a) for a, _ in rows)
    return "\n".join(f"{a:<{width}}  {b}" for a, b in rows)


def _plot_lambda(path: Path, lams, accs) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(lams, [100 * a for a in accs], marker="o")
    ax.set_xlabel("lambda")
    ax.set_ylabel("test accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_bars(path: Path, labels, values, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(labels)), 3))
    ax.bar(range(len(labels)), values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def execute(args) -> str:
    cfg = effective_config(args)
    root, digest = run_dir(cfg, args.out)
    root.mkdir(parents=True, exist_ok=True)
    save_config(cfg, root / "config.json")
    exp = P.Experiment(cfg, root, build_missing=BUILDS[args.command])
    method = args.method or cfg.method
    lam = args.lam if method in P.AMALGAM_METHODS else None
    records_dir = root / "records"
    base = {"config": digest, "seed": cfg.seed}

    if args.command == "train-teachers":
        task = exp.task
        records, rows = [], []
        for i, teacher in enumerate(exp.teachers()):
            va = task.valid.select_labels(exp.assignment.subsets[i])
            acc = accuracy(teacher, va.seqs, va.labels)
            records.append({**base, "teacher": i, "labels": list(exp.assignment.subsets[i]),
                            "valid_accuracy": acc})
            rows.append((f"teacher {i} {list(exp.assignment.subsets[i])}", f"{100 * acc:.2f}"))
        _write(records_dir / "train-teachers.jsonl", records)
        return _table([("teacher", "valid acc (%)")] + rows)

    if args.command == "generate":
        exp.teachers()
        ts = exp.transfer_set()
        records, rows = [], []
        for i, teacher in enumerate(exp.teachers()):
            rate = steering_success(teacher, [s for s in ts.train if s.teacher == i] + ts.heldout[i])
            n_train = sum(s.teacher == i for s in ts.train)
            records.append({**base, "teacher": i, "n_train": n_train, "n_heldout": len(ts.heldout[i]),
                            "steering_success": rate})
            rows.append((f"teacher {i}", f"{n_train:5d} {len(ts.heldout[i]):5d} {100 * rate:8.2f}"))
        _write(records_dir / "generate.jsonl", records)
        return _table([("pseudo-data", "train  held  success%")] + rows)

    if args.command == "fit-ood":
        exp.teachers()
        exp.ood_stats()
        auroc = exp.ood_auroc()
        records = [{**base, "teacher": i, "source": s, "auroc": auroc[s][i]}
                   for s in sorted(auroc) for i in range(len(auroc[s]))]
        _write(records_dir / "fit-ood.jsonl", records)
        if args.emit_plots:
            labels = [f"{s}/T{i}" for s in sorted(auroc) for i in range(len(auroc[s]))]
            _plot_bars(root / "auroc.png", labels, [r["auroc"] for r in records], "final-block AUROC")
        return _table([("source", "AUROC per teacher")] +
                      [(s, " ".join(f"{a:.3f}" for a in auroc[s])) for s in sorted(auroc)])

    if args.command == "train-student":
        if method not in P.TRAINED_METHODS:
            raise ConfigError(f"{method} has no student to train")
        exp.teachers()
        if method in P.AMALGAM_METHODS:
            exp.ood_stats()
        exp.student(method, lam)
        record = {**base, "method": method, "lam": lam}
        _write(records_dir / f"{_tag('train-student', method, lam)}.jsonl", [record])
        return f"trained {method} in {root}"

    if args.command == "evaluate":
        exp.teachers()
        result = exp.evaluate(method, lam)
        _write(records_dir / f"{_tag('evaluate', method, lam)}.jsonl", [result.record(digest)])
        return _table([("method", "accuracy (%)"), (_label(result), f"{100 * result.accuracy:.2f}")])

    if args.command == "ablate":
        methods = [args.method] if args.method else list(ABLATIONS)
        bad = [m for m in methods if m not in P.AMALGAM_METHODS]
        if bad:
            raise ConfigError(f"{bad[0]} is not an amalgamation variant")
        exp.teachers()
        exp.ood_stats()
        results = [exp.evaluate(m, args.lam) for m in methods]
        _write(records_dir / f"{_tag('ablate', args.method, args.lam)}.jsonl", [r.record(digest) for r in results])
        if args.emit_plots:
            _plot_bars(root / "ablate.png", methods, [100 * r.accuracy for r in results], "test accuracy (%)")
        return _table([("method", "accuracy (%)")] + [(_label(r), f"{100 * r.accuracy:.2f}") for r in results])

    if args.command == "sweep":
        lams = (args.lam,) if args.lam is not None else SWEEP_LAMBDAS
        results = [exp.evaluate("stratanet", lam) for lam in lams]
        results += [exp.evaluate(m) for m in ("vanilla_ka_R", "ensemble", "teacher_only")]
        _write(records_dir / "sweep.jsonl", [r.record(digest) for r in results])
        if args.emit_plots:
            _plot_lambda(root / "lambda.png", lams, [r.accuracy for r in results[:len(lams)]])
        return _table([("method", "accuracy (%)")] + [(_label(r), f"{100 * r.accuracy:.2f}") for r in results])

    raise AssertionError(args.command)  # argparse restricts the choices


def _label(r: P.MethodResult) -> str:
    return r.method if r.lam is None else f"{r.method}@{r.lam:g}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        print(execute(args))
    except ConfigError as exc:
        print(f"dfka: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except P.MissingArtifact as exc:
        print(f"dfka: {exc} (run the earlier command first)", file=sys.stderr)
        return EXIT_MISSING
    except P.TeacherTrainingError as exc:
        print(f"dfka: {exc}", file=sys.stderr)
        return EXIT_TEACHER
    return 0


if __name__ == "__main__":
    sys.exit(main())
