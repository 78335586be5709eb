"""Command-line experiment runner: ``iclkit {init-config,run,ablate,report,plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .config import ExperimentConfig, load_config, template
from .data import make_stream, write_manifest
from .errors import ConfigError, ICLError, ReportingError
from .herding import BACKEND as HERDING_BACKEND
from .metrics import AccuracyMatrix, mean_std, step_accuracy, step_forgetting
from .trainer import VARIANTS, Learner

log = logging.getLogger("iclkit")

METRICS = ("acc", "fgt", "acc_new", "acc_old")
METRIC_LABELS = {"acc": "Acc", "fgt": "Fgt", "acc_new": "Acc_new", "acc_old": "Acc_old"}
STATUS_FILE = "status.json"
SUMMARY_FILE = "metrics_summary.json"


class UsageError(ICLError):
    pass


def fmt_pm(values) -> str:
    """``mean±std`` in percent with one decimal, e.g. ``94.5±0.8``."""
    mean, std = mean_std(values)
    return f"{100 * mean:.1f}±{100 * std:.1f}"


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _environment() -> dict:
    return {
        "iclkit": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "herding_backend": HERDING_BACKEND,
    }


# -- run ---------------------------------------------------------------------
def execute_run(cfg: ExperimentConfig) -> dict:
    """Run every seed of ``cfg`` into ``cfg.out`` and return the metrics summary.

    ``status.json`` says ``complete: false`` until the last artifact is
    written, so an interrupted or failed run stays flagged.
    """
    out = cfg.check_output_writable()
    status = {"complete": False, "seeds": list(cfg.seeds), "seeds_done": []}
    _dump_json(out / STATUS_FILE, status)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    _dump_json(out / "environment.json", _environment())
    started = time.perf_counter()
    try:
        budget = cfg.train.get("memory_budget", 20)
        dataset = cfg.data.load(budget)
        write_manifest(out / "dataset_manifest.json", {"kind": cfg.data.source, **dataset.manifest})
        spec = cfg.model.backbone(dataset.x.shape[1:])
        per_seed = {}
        for seed in cfg.seeds:
            per_seed[seed] = _run_seed(cfg, dataset, spec, seed, out / f"seed{seed}")
            status["seeds_done"].append(seed)
            _dump_json(out / STATUS_FILE, status)
        summary = _summarize(cfg, per_seed)
        _dump_json(out / SUMMARY_FILE, summary)
        (out / "metrics_summary.txt").write_text(_summary_text(summary), encoding="utf-8")
        _curves({_label(cfg): [per_seed[s]["matrix"] for s in cfg.seeds]}, out)
    except BaseException as exc:
        status["error"] = {"type": type(exc).__name__, "message": str(exc)}
        _dump_json(out / STATUS_FILE, status)
        raise
    status["complete"] = True
    status["elapsed_seconds"] = round(time.perf_counter() - started, 3)
    _dump_json(out / STATUS_FILE, status)
    return summary


def _run_seed(cfg: ExperimentConfig, dataset, spec, seed: int, seed_dir: Path) -> dict:
    seed_dir.mkdir(parents=True, exist_ok=True)
    stream = make_stream(
        dataset,
        cfg.data.initial_classes,
        cfg.data.per_step,
        class_order_seed=seed,
        test_fraction=cfg.data.test_fraction,
        split_seed=cfg.data.split_seed,
    )
    write_manifest(seed_dir / "stream_manifest.json", stream.manifest())
    ckpt = seed_dir / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    with open(seed_dir / "log.jsonl", "w") as fh:
        def on_record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        learner = Learner(
            spec, cfg.plan(seed), cfg.learner, cfg.variant,
            init_temperature=cfg.model.init_temperature, on_record=on_record,
        )
        result = learner.run(stream, checkpoint_dir=ckpt)
    result.matrix.to_csv(seed_dir / "accuracy_matrix.csv")
    _dump_json(seed_dir / "metrics.json", result.metrics)
    write_manifest(seed_dir / "memory_manifest.json", {"steps": result.memory_manifests})
    log.info("seed %d: %s", seed, {k: round(v, 4) for k, v in result.metrics.items()})
    return {"metrics": result.metrics, "matrix": result.matrix}


def _label(cfg: ExperimentConfig) -> str:
    return cfg.learner if cfg.learner != "proposed" else f"proposed/{cfg.variant}"


def _summarize(cfg: ExperimentConfig, per_seed: dict) -> dict:
    seeds = list(cfg.seeds)
    summary = {
        "learner": cfg.learner,
        "variant": cfg.variant,
        "seeds": seeds,
        "per_seed": {str(s): per_seed[s]["metrics"] for s in seeds},
        "mean": {},
        "std": {},
        "formatted": {},
    }
    for m in METRICS:
        values = [per_seed[s]["metrics"][m] for s in seeds]
        summary["mean"][m], summary["std"][m] = mean_std(values)
        summary["formatted"][m] = fmt_pm(values)
    return summary


def _summary_text(summary: dict) -> str:
    head = f"{summary['learner']} / {summary['variant']} over {len(summary['seeds'])} seed(s)"
    rows = [f"{METRIC_LABELS[m]:<8} {summary['formatted'][m]}" for m in METRICS]
    return "\n".join([head] + rows) + "\n"


# -- curves --------------------------------------------------------------------
def _curves(runs: dict[str, list[AccuracyMatrix]], out: Path, prefix: str = "") -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for name, fn, ylabel in (
        ("accuracy", step_accuracy, "average accuracy (%)"),
        ("forgetting", step_forgetting, "forgetting (%)"),
    ):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for label, matrices in runs.items():
            curves = np.array([fn(m) for m in matrices]) * 100
            steps = np.arange(1, curves.shape[1] + 1)
            ax.errorbar(steps, curves.mean(0), yerr=curves.std(0), marker="o", capsize=3, label=label)
            ax.set_xticks(steps)
        ax.set_xlabel("incremental step")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / f"{prefix}{name}_curve.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


# -- report / plot ---------------------------------------------------------------
def _load_completed(run_dir: str | Path) -> tuple[dict, dict]:
    run_dir = Path(run_dir)
    status_path, summary_path = run_dir / STATUS_FILE, run_dir / SUMMARY_FILE
    if not run_dir.is_dir():
        raise ReportingError(f"{run_dir}: no such run directory")
    if status_path.is_file():
        try:
            status = json.loads(status_path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ReportingError(f"{run_dir}: unreadable {STATUS_FILE}") from exc
        if not status.get("complete"):
            raise ReportingError(f"{run_dir}: run is incomplete")
    else:
        status = {}
    if not summary_path.is_file():
        raise ReportingError(f"{run_dir}: missing {SUMMARY_FILE}")
    try:
        return status, json.loads(summary_path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ReportingError(f"{run_dir}: unreadable {SUMMARY_FILE}") from exc


def report(run_dirs, out_prefix: str | Path | None = None) -> list[dict]:
    """Side-by-side metrics table, one row per run directory, in input order.

    Every directory is validated before anything is written.
    """
    if not run_dirs:
        raise ReportingError("no run directories given")
    rows = []
    for d in run_dirs:
        _, summary = _load_completed(d)
        row = {"run": str(d), "learner": summary["learner"], "variant": summary["variant"],
               "seeds": len(summary["seeds"])}
        row.update({METRIC_LABELS[m]: summary["formatted"][m] for m in METRICS})
        rows.append(row)
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{out_prefix}.tsv").write_text(table_tsv(rows), encoding="utf-8")
        Path(f"{out_prefix}.md").write_text(table_markdown(rows), encoding="utf-8")
    return rows


def table_tsv(rows: list[dict]) -> str:
    cols = list(rows[0])
    return "\n".join(["\t".join(cols)] + ["\t".join(str(r[c]) for c in cols) for r in rows]) + "\n"


def table_markdown(rows: list[dict]) -> str:
    cols = list(rows[0])
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    lines += ["| " + " | ".join(str(r[c]) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def plot(run_dirs, out: str | Path) -> list[Path]:
    """Overlay per-step accuracy and forgetting curves of completed runs."""
    runs = {}
    for d in run_dirs:
        _, summary = _load_completed(d)
        label = summary["learner"] if summary["learner"] != "proposed" else f"proposed/{summary['variant']}"
        if label in runs:
            label = str(d)
        runs[label] = [AccuracyMatrix.from_csv(Path(d) / f"seed{s}" / "accuracy_matrix.csv")
                       for s in summary["seeds"]]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return _curves(runs, out)


# -- argument parsing ----------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iclkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"iclkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init-config", help="write a commented default config")
    p.add_argument("path", nargs="?", help="destination (stdout when omitted)")
    p.add_argument("--force", action="store_true", help="overwrite an existing file")

    def common(p, config_required):
        p.add_argument("--config", required=config_required, help="YAML experiment config")
        p.add_argument("--seeds", type=int, nargs="+", help="override the seed list")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("run", help="train and evaluate every seed of a config")
    common(p, True)
    p.add_argument("--learner", help="proposed, finetune_only or replay_only")
    p.add_argument("--variant", help="ablation variant of the proposed learner")

    p = sub.add_parser("ablate", help="run several ablation variants and compare them")
    common(p, False)
    p.add_argument("--variant", nargs="+", default=list(VARIANTS), dest="variants",
                   help="variants to run (default: all)")

    p = sub.add_parser("report", help="comparison table of completed runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="write <out>.tsv and <out>.md")

    p = sub.add_parser("plot", help="per-step accuracy and forgetting curves")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True, help="directory for the PNG files")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seeds=args.seeds, out=args.out,
                              learner=getattr(args, "learner", None), variant=getattr(args, "variant", None))


def _dispatch(args) -> int:
    if args.command == "init-config":
        text = template()
        if args.path is None:
            sys.stdout.write(text)
        else:
            path = Path(args.path)
            if path.exists() and not args.force:
                raise ConfigError("path", f"{path} exists; pass --force to overwrite")
            path.write_text(text)
        return 0
    if args.command == "run":
        summary = execute_run(_config(args))
        sys.stdout.write(_summary_text(summary))
        return 0
    if args.command == "ablate":
        base = _config(args)
        for v in args.variants:
            if v not in VARIANTS:
                raise ConfigError("variant", f"unknown variant {v!r}; expected one of {list(VARIANTS)}")
        dirs = []
        for v in args.variants:
            cfg = base.with_overrides(learner="proposed", variant=v, out=str(Path(base.out) / v))
            execute_run(cfg)
            dirs.append(cfg.out)
        rows = report(dirs, Path(base.out) / "ablation_report")
        sys.stdout.write(table_tsv(rows))
        return 0
    if args.command == "report":
        sys.stdout.write(table_tsv(report(args.run_dirs, args.out)))
        return 0
    if args.command == "plot":
        for path in plot(args.run_dirs, args.out):
            print(path)
        return 0
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        return _fail(exc, 2)
    except ICLError as exc:
        return _fail(exc, 1)
    except OSError as exc:
        return _fail(exc, 1)


def _fail(exc: Exception, code: int) -> int:
    record = {"status": "error", "error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConfigError):
        record["field"] = exc.field
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
