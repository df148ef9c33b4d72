"""Command-line entry point: ``nfcsi {gen-data,train,eval,audit,plot}``.

Outputs go under ``--out`` (default ``runs/<timestamp>``)::

    data/dataset.nfcs (+ .json manifest)
    checkpoints/<arch>_cr<CR>/{best,last}.nfck, history.csv
    reports/<arch>_cr<CR>.json, comparison.{md,csv}
    plots/<metric>_<arch>_cr<CR>.csv
    config.<subcommand>.ini   effective-config echo
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from nfcsi import config as cfg
from nfcsi.dataset import build_dataset, load_bundle, save_bundle
from nfcsi.evaluation import (
    EvalReport,
    compare_reports,
    evaluate,
    format_comparison,
    write_plot_csvs,
)
from nfcsi.model import (
    Architecture,
    ModelConfig,
    build_model,
    closed_form_fc_params,
    count_parameters,
    published_non_fc_budget,
)
from nfcsi.training import read_history_csv, train

logger = logging.getLogger("nfcsi")

DATASET_FILE = Path("data") / "dataset.nfcs"


class CommandError(RuntimeError):
    pass


def _run_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path("runs") / time.strftime("%Y%m%d-%H%M%S")


def _values(args) -> dict:
    values = cfg.load_config(args.config, args.set)
    for flag, (section, key) in {
        "n_train": ("data", "n_train"), "n_val": ("data", "n_val"), "n_test": ("data", "n_test"),
        "cr": ("model", "compression_ratio"), "architecture": ("model", "architecture"),
        "epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"),
        "lr": ("train", "learning_rate"),
    }.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[section][key] = value
    if getattr(args, "seed", None) is not None:
        values["data"]["seed"] = args.seed
        values["train"]["seed"] = args.seed
    return values


def _echo(values: dict, root: Path, command: str) -> None:
    path = cfg.write_effective_config(values, root / f"config.{command}.ini")
    logger.info("effective config written to %s", path)


def _tag(model_config: ModelConfig) -> str:
    return f"{model_config.architecture.value}_cr{model_config.compression_ratio}"


def cmd_gen_data(args) -> int:
    values = _values(args)
    sampling = cfg.sampling_config(values)
    root = _run_root(args)
    path = root / DATASET_FILE
    if path.exists() and not args.force:
        raise CommandError(f"{path} exists; pass --force to overwrite")
    bundle = build_dataset(sampling)
    save_bundle(bundle, path)
    _echo(values, root, "gen-data")
    m = bundle.manifest
    print(f"dataset: {path}")
    print(f"  counts train/val/test: {bundle.counts}")
    print(f"  seed: {sampling.seed}  norm range: [{bundle.norm_min:.6g}, {bundle.norm_max:.6g}]")
    print(f"  r in {sampling.r_range} m, theta in {sampling.theta_range}, phi in {sampling.phi_range}")
    print(f"  Rayleigh distance {m['rayleigh_distance']:.1f} m; max sampled r {m['sampled_r_max']:.2f} m; "
          f"all near-field: {m['all_near_field']}")
    if not m["all_near_field"]:
        raise CommandError("a sampled user lies outside the near field")
    return 0


def cmd_train(args) -> int:
    values = _values(args)
    train_cfg = cfg.train_config(values)
    root = _run_root(args)
    data_path = Path(args.data) if args.data else root / DATASET_FILE
    if not data_path.exists():
        raise CommandError(f"dataset {data_path} not found; run gen-data first")
    bundle = load_bundle(data_path)
    out = root / "checkpoints" / _tag(train_cfg.model)
    resume = None
    if args.resume:
        resume = out / "last.nfck"
        if not resume.exists():
            raise CommandError(f"nothing to resume: {resume} missing")
    _echo(values, root, "train")
    model, history = train(train_cfg, bundle, out, resume_from=resume)
    last = history.records[-1]
    print(f"trained {_tag(train_cfg.model)} for {len(history.records)} epoch(s); "
          f"best epoch {history.best_epoch}")
    print(f"  final train loss {last.train_loss:.4e} (initial {history.initial_train_loss})")
    print(f"  val NMSE {last.val_nmse_db:.2f} dB, rho {last.val_rho:.4f} "
          f"(centered {last.val_centered_nmse_db:.2f} dB, {last.val_centered_rho:.4f})")
    print(f"  checkpoints and history in {out}")
    return 0


def _write_comparison(reports: list[EvalReport], root: Path) -> None:
    rows = compare_reports(reports)
    table = format_comparison(rows)
    (root / "reports").mkdir(parents=True, exist_ok=True)
    (root / "reports" / "comparison.md").write_text(table + "\n")
    with (root / "reports" / "comparison.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(table)


def cmd_eval(args) -> int:
    root = _run_root(args)
    if args.compare:
        reports = [EvalReport.read(p) for p in args.compare]
        _write_comparison(reports, root)
        return 0
    values = _values(args)
    model_cfg = cfg.model_config(values)
    ckpt = Path(args.checkpoint) if args.checkpoint else (
        root / "checkpoints" / _tag(model_cfg) / "best.nfck")
    if not ckpt.exists():
        raise CommandError(f"checkpoint {ckpt} not found")
    data_path = Path(args.data) if args.data else root / DATASET_FILE
    bundle = load_bundle(data_path)
    history_path = Path(args.history) if args.history else ckpt.parent / "history.csv"
    history = read_history_csv(history_path) if history_path.exists() else None
    report = evaluate(ckpt, bundle, cr=args.cr, history=history, split=args.split)
    tag = f"{report.architecture}_cr{report.cr}"
    path = report.write(root / "reports" / f"{tag}.json")
    if history:
        write_plot_csvs(history, root / "plots", tag)
    _echo(values, root, "eval")
    print(f"{tag} on {args.split}: NMSE {report.nmse_db:.2f} dB, rho {report.rho:.4f}; "
          f"centered NMSE {report.centered_nmse_db:.2f} dB, rho {report.centered_rho:.4f}")
    print(f"  constant zero-channel estimate: {report.constant_baseline_nmse_db:.2f} dB (normalized space)")
    if report.poor:
        print("  warning: centered NMSE >= 0 dB, the model does no better than sending nothing")
    print(f"  report: {path}")
    return 0


def cmd_audit(args) -> int:
    if not args.cr:
        raise CommandError("audit needs at least one --cr")
    archs = list(Architecture) if args.architecture in (None, "all") else [Architecture(args.architecture)]
    failures = []
    rows = []
    for arch in archs:
        totals = {}
        for cr in args.cr:
            mc = ModelConfig(compression_ratio=cr, architecture=arch)
            audit = count_parameters(build_model(mc))
            closed = closed_form_fc_params(mc)
            if audit.fc_params != closed:
                failures.append(f"{arch.value} CR={cr}: fc {audit.fc_params} != closed form {closed}")
            totals[cr] = audit
            rows.append({"architecture": arch.value, "cr": cr, "total": audit.total,
                         "fc": audit.fc_params, "non_fc": audit.non_fc_params,
                         "legacy_non_fc": audit.legacy_non_fc_params})
            print(f"{arch.value:12s} CR={cr:<3d} total {audit.total:>9,d}  fc {audit.fc_params:>9,d} "
                  f"(2LK+K+L = {closed:,d})  non-fc {audit.non_fc_params:>6,d}")
        crs = sorted(totals)
        for a, b in zip(crs, crs[1:]):
            L = ModelConfig(a).flattened_length
            expected = (2 * L + 1) * (L // a - L // b)
            got = totals[a].total - totals[b].total
            status = "ok" if got == expected else "FAIL"
            print(f"{arch.value:12s} total(CR={a}) - total(CR={b}) = {got:,d} (expected {expected:,d}) {status}")
            if got != expected:
                failures.append(f"{arch.value}: difference law violated for CR {a}/{b}")
        target = published_non_fc_budget(arch)
        audit = totals[crs[0]]
        gap = (audit.non_fc_params - target) / target
        print(f"{arch.value:12s} non-fc {audit.non_fc_params:,d} vs published-total budget {target:,d} "
              f"({100 * gap:+.1f}%); BN counted per width feature incl. running stats: "
              f"{audit.legacy_non_fc_params:,d}")
        if args.verbose:
            for name, count in audit.layers:
                print(f"    {name:45s} {count:>8,d}")
    if args.out:
        root = Path(args.out)
        root.mkdir(parents=True, exist_ok=True)
        (root / "audit.json").write_text(json.dumps(rows, indent=2) + "\n")
    if failures:
        for f in failures:
            print(f"assertion failed: {f}", file=sys.stderr)
        return 1
    return 0


def cmd_plot(args) -> int:
    root = _run_root(args)
    for path in args.history:
        path = Path(path)
        history = read_history_csv(path)
        tag = args.tag or path.parent.name
        for out in write_plot_csvs(history, root / "plots", tag):
            print(out)
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [data]/[model]/[train] sections")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run root directory (default runs/<timestamp>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nfcsi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save a near-field CSI dataset")
    _common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_gen_data)

    archs = [a.value for a in Architecture]
    p = sub.add_parser("train", help="train an autoencoder")
    _common(p)
    p.add_argument("--data", help="dataset file (default <out>/data/dataset.nfcs)")
    p.add_argument("--cr", type=int)
    p.add_argument("--architecture", choices=archs)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", action="store_true", help="continue from last.nfck")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or compare reports")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--history", help="history CSV for plot data (default next to checkpoint)")
    p.add_argument("--cr", type=int)
    p.add_argument("--architecture", choices=archs)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--compare", nargs="+", metavar="REPORT", help="merge report JSONs into a table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="parameter counts per architecture and CR")
    p.add_argument("--cr", type=int, nargs="*", default=[16, 32, 64])
    p.add_argument("--architecture", choices=archs + ["all"], default="all")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("plot", help="export per-epoch metric CSVs from history files")
    p.add_argument("history", nargs="+")
    p.add_argument("--tag")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, CommandError) as exc:  # config, data-format and validation errors
        parser.exit(2, f"nfcsi {args.command}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
