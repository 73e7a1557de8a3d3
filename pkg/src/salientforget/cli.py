"""Command-line experiment runner.

One output directory holds one experiment::

    output_dir/
      config.lock        settings the cached split and original model depend on
      split.manifest     forget indices, reloaded on reruns
      checkpoints/       original.pt, <method>.pt, mask-<method>.pt
      reports/           <method>.json MetricsReports
      tables/            compare / per-class tables (markdown + csv)
      logs/              training logs

Exit codes: 0 ok, 2 input/format error, 3 configuration error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataFormatError, InputError, UnlearnError
from .metrics import METRIC_KEYS, MetricsReport, evaluate_all, format_rte, per_class_accuracy
from .model import ArchitectureSpec, build_classifier, load_checkpoint, save_checkpoint
from .synthetic import write_synthetic_cifar10
from .unlearn import METHODS, run_method, train_classifier

log = logging.getLogger("salientforget")


class Experiment:
    """Paths and cached artifacts of one configured run."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate()
        self.root = Path(cfg.output_dir)
        self._data = None

    # -- paths
    @property
    def lock_path(self):
        return self.root / "config.lock"

    @property
    def manifest_path(self):
        return self.root / "split.manifest"

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.pt"

    def report_path(self, name: str) -> Path:
        return self.root / "reports" / f"{name}.json"

    def table_path(self, name: str) -> Path:
        return self.root / "tables" / name

    # -- state
    def check_lock(self):
        text = self.cfg.lock_text()
        if self.lock_path.exists():
            if self.lock_path.read_text() != text:
                raise ConfigError(
                    f"{self.root} holds a different experiment (config.lock differs); use another --output"
                )
        else:
            self.root.mkdir(parents=True, exist_ok=True)
            self.lock_path.write_text(text)

    @property
    def spec(self) -> ArchitectureSpec:
        return ArchitectureSpec(self.cfg.architecture, self.cfg.num_classes)

    def datasets(self) -> tuple[D.LabeledDataset, D.LabeledDataset]:
        if self._data is None:
            root = self.cfg.resolved_data_dir()
            if not root.is_dir():
                raise DataFormatError(f"dataset directory {root} does not exist")
            if self.cfg.dataset == "cifar100":
                train, test = D.load_cifar100(root)
            else:
                train, test = D.load_cifar10(root)
                if self.cfg.toy_size is not None:
                    train, test = D.toy_subset(train, test, self.cfg.toy_size)
            self._data = (train, test)
        return self._data

    def split(self) -> D.ForgetSplit:
        train, _ = self.datasets()
        if self.manifest_path.exists():
            split = D.ForgetSplit.load(self.manifest_path)
            if split.n != len(train):
                raise DataFormatError(f"{self.manifest_path} was made for a dataset of {split.n} samples")
            return split
        cfg = self.cfg
        split = D.make_forget_split(train, cfg.split_mode, fraction=cfg.split_fraction, label=cfg.split_class,
                                    seed=cfg.split_seed)
        split.save(self.manifest_path)
        return split

    def original(self):
        path = self.checkpoint("original")
        if path.exists():
            model, _ = load_checkpoint(path)
            return model
        train, _ = self.datasets()
        log.info("training original model on %d samples", len(train))
        model = build_classifier(self.spec, self.cfg.train.seed)
        model, report = train_classifier(model, train, np.arange(len(train)), self.cfg.train)
        save_checkpoint(path, model, seed=self.cfg.train.seed, extra={"method": "original"})
        log_path = self.root / "logs" / "train_original.json"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        return model

    def reference(self) -> MetricsReport | None:
        path = self.report_path("retrain")
        return MetricsReport.load(path) if path.exists() else None


def _dataset_summary(ds: D.LabeledDataset) -> str:
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    return (f"{ds.name}: N={len(ds)} K={ds.num_classes} per-class min/max={counts.min()}/{counts.max()} "
            f"mean={list(ds.mean)} std={list(ds.std)}")


def cmd_prepare_data(exp: Experiment, args) -> int:
    root = exp.cfg.resolved_data_dir()
    if args.synthetic:
        if exp.cfg.dataset == "cifar100":
            raise ConfigError("synthetic data is only available in the CIFAR-10 layout")
        if not all((root / f).exists() for f in D.CIFAR10_TRAIN_FILES + (D.CIFAR10_TEST_FILE,)):
            write_synthetic_cifar10(root)
            print(f"wrote synthetic CIFAR-10-format files to {root}")
    exp.check_lock()
    train, test = exp.datasets()
    split = exp.split()
    print(_dataset_summary(train))
    print(_dataset_summary(test))
    print(f"split {split.describe()}: |D_f|={len(split.forget_indices)} |D_r|={len(split.retain_indices)} "
          f"-> {exp.manifest_path}")
    return 0


def cmd_train_original(exp: Experiment, args) -> int:
    exp.check_lock()
    exp.original()
    print(exp.checkpoint("original"))
    return 0


def cmd_unlearn(exp: Experiment, args) -> int:
    exp.check_lock()
    cfg = exp.cfg
    train, test = exp.datasets()
    split = exp.split()
    original = exp.original()
    result = run_method(cfg.method, original, split, train, cfg.unlearn, cfg.train)
    save_checkpoint(exp.checkpoint(cfg.method), result.model, seed=cfg.unlearn.seed, extra={"method": cfg.method})
    if result.mask is not None:
        result.mask.save(exp.checkpoint(f"mask-{cfg.method}"))
    reference = None if cfg.method == "retrain" else exp.reference()
    report = evaluate_all(result.model, train, split, test, result.rte_seconds, reference, cfg.method,
                          mia_seed=cfg.run_seed)
    report.save(exp.report_path(cfg.method))
    phases = {k: v.to_dict() for k, v in result.reports.items()}
    log_path = exp.root / "logs" / f"unlearn_{cfg.method}.json"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text(json.dumps(phases, indent=2) + "\n")
    sys.stdout.write(report.to_json())
    return 0


def cmd_evaluate(exp: Experiment, args) -> int:
    exp.check_lock()
    train, test = exp.datasets()
    split = exp.split()
    path = Path(args.checkpoint) if args.checkpoint else exp.checkpoint("original")
    model, payload = load_checkpoint(path)
    name = payload["extra"].get("method", path.stem)
    reference = None if name == "retrain" else exp.reference()
    report = evaluate_all(model, train, split, test, 0.0, reference, name, mia_seed=exp.cfg.run_seed)
    report.save(exp.report_path(name))
    sys.stdout.write(report.to_json())
    return 0


def compare_rows(reports: list[MetricsReport], reference: MetricsReport) -> list[dict]:
    rows = []
    for rep in [reference] + [r for r in reports if r is not reference]:
        rep.with_reference(reference)
        rows.append({"method": rep.method or "?", **{k: getattr(rep, k) for k in METRIC_KEYS},
                     **{f"{k}_gap": rep.gaps[k] for k in METRIC_KEYS},
                     "avg_gap": rep.avg_gap, "rte": format_rte(rep.rte_seconds)})
    return rows


def render_markdown(rows: list[dict], machine: str | None = None) -> str:
    out = ["| Method | UA | RA | TA | MIA | Avg. Gap | RTE |", "|---|---|---|---|---|---|---|"]
    for r in rows:
        cells = [f"{r[k]:.2f} ({r[k + '_gap']:.2f})" for k in METRIC_KEYS]
        out.append(f"| {r['method']} | " + " | ".join(cells) + f" | {r['avg_gap']:.2f} | {r['rte']} |")
    if machine:
        out.append("")
        out.append(f"RTE measured on {machine}")
    return "\n".join(out) + "\n"


def render_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["method"] + [c for k in METRIC_KEYS for c in (k, f"{k}_gap")] + ["avg_gap", "rte"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (f"{r[c]:.2f}" if isinstance(r[c], float) else r[c]) for c in cols})
    return buf.getvalue()


def cmd_compare(exp: Experiment, args) -> int:
    if not args.reference:
        raise ConfigError("compare needs --reference REPORT (the retrain report)")
    reference = MetricsReport.load(args.reference)
    reports = [MetricsReport.load(p) for p in args.reports]
    rows = compare_rows(reports, reference)
    md = render_markdown(rows, reference.machine)
    out = exp.table_path("compare")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".md").write_text(md)
    out.with_suffix(".csv").write_text(render_csv(rows))
    sys.stdout.write(md)
    return 0


def cmd_per_class(exp: Experiment, args) -> int:
    cfg = exp.cfg
    exp.check_lock()
    train, test = exp.datasets()
    original = exp.original()
    rows = []
    for label in range(train.num_classes):
        split = D.make_forget_split(train, "class", label=label, seed=cfg.split_seed)
        result = run_method(cfg.method, original, split, train, cfg.unlearn, cfg.train)
        before = per_class_accuracy(original, train, split, test)
        after = per_class_accuracy(result.model, train, split, test)
        name = D.CIFAR10_CLASSES[label] if train.num_classes == 10 else str(label)
        rows.append({"class": name, **{f"original_{k}": v for k, v in before.items()},
                     **{f"{cfg.method}_{k}": v for k, v in after.items()},
                     "rte": format_rte(result.rte_seconds)})
        log.info("class %s done", name)
    cols = list(rows[0].keys())
    md = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        md.append("| " + " | ".join(f"{r[c]:.2f}" if isinstance(r[c], float) else str(r[c]) for c in cols) + " |")
    text = "\n".join(md) + "\n"
    out = exp.table_path(f"per_class_{cfg.method}")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".md").write_text(text)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (f"{r[c]:.2f}" if isinstance(r[c], float) else r[c]) for c in cols})
    out.with_suffix(".csv").write_text(buf.getvalue())
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-original": cmd_train_original,
    "unlearn": cmd_unlearn,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "per-class": cmd_per_class,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salientforget", description="Machine-unlearning experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--output", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="overrides run_seed")
        p.add_argument("--method", choices=METHODS, help="overrides method")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "prepare-data":
            p.add_argument("--synthetic", action="store_true",
                           help="write a synthetic CIFAR-10-format dataset to data_dir if it is empty")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="checkpoint to evaluate (default: the original model)")
        if name == "compare":
            p.add_argument("reports", nargs="*", help="MetricsReport JSON files")
            p.add_argument("--reference", help="retrain MetricsReport JSON")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.output:
            cfg.output_dir = args.output
        if args.seed is not None:
            cfg.set_run_seed(args.seed)
        if args.method:
            cfg.method = args.method
        return COMMANDS[args.command](Experiment(cfg), args)
    except UnlearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
