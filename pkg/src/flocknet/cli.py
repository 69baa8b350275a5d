"""Command-line pipeline: build datasets, train members, fit and evaluate ensembles.

Subcommands: dataset-build, train, ensemble, eval, report. Every command is
deterministic given its --seed, writes its effective configuration into the
output directory, and returns exit code 0 only on full success (1 operational
error, 2 usage error, 3 training diverged).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from .blocks import KINDS, build_toy_model, load_checkpoint, model_checksum, save_checkpoint
from .data import (
    CorruptRecordError,
    SplitPlan,
    augment_flip,
    default_split_counts,
    ingest_directory,
    read_records,
    shuffle_split,
    synth_corpus,
    write_records,
)
from .ensemble import (
    EnsembleModel,
    WeightFitConfig,
    fit_weights,
    load_ensemble,
    report_weights,
    write_manifest,
)
from .metrics import evaluate, fmt_pct, write_report_json, write_report_text, write_roc_csv
from .optim import TrainConfig, TrainingDivergedError, train, write_history

ENV_OUT = "FLOCKNET_OUT"
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 3

# per-command {dest: converter} tables for config-file coercion
_CONVERTERS: dict[str, dict] = {}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_counts(text: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("counts must be three comma-separated ints")
    return tuple(int(p) for p in parts)


def _default_out(command: str) -> Path:
    return Path(os.environ.get(ENV_OUT, "runs")) / command


def _add(command: str, sub, *flags, **kwargs):
    action = sub.add_argument(*flags, **kwargs)
    conv = kwargs.get("type") or str
    if kwargs.get("action") in ("store_true", "store_false"):
        conv = _parse_bool
    _CONVERTERS.setdefault(command, {})[action.dest] = conv
    return action


def _load_config_file(path, command: str) -> dict:
    """key=value lines; '#' lines and blanks ignored; values typed per flag."""
    table = _CONVERTERS.get(command, {})
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in table:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = table[key](value.strip())
    return values


def _echo_config(outdir: Path, args: argparse.Namespace) -> None:
    skip = {"func", "config", "command"}
    lines = [f"command={args.command}"]
    for key in sorted(vars(args)):
        if key in skip:
            continue
        value = getattr(args, key)
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    (outdir / "config.txt").write_text("\n".join(lines) + "\n")


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_split(data_dir, split: str):
    path = Path(data_dir) / f"{split}.efrc"
    if not path.exists():
        raise FileNotFoundError(f"missing record file {path}")
    return read_records(path, split=split)


# ---------------------------------------------------------------------------
# commands

def cmd_dataset_build(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        corpus = synth_corpus(args.per_class, args.image_size, args.seed)
    else:
        if not (args.normal_dir and args.pneumonia_dir):
            raise ValueError("provide --normal-dir and --pneumonia-dir, or --synthetic")
        corpus = ingest_directory(args.normal_dir, args.pneumonia_dir,
                                  on_error="skip" if args.skip_bad else "abort")
    counts = args.counts if args.counts else default_split_counts(len(corpus))
    plan = SplitPlan(args.seed, counts)
    splits = shuffle_split(corpus, plan, image_size=args.image_size)

    manifest = {"version": 1, "seed": args.seed, "counts": list(plan.counts),
                "image_size": args.image_size, "files": {}}
    for ds in splits:
        path = outdir / f"{ds.split}.efrc"
        write_records(ds, path)
        manifest["files"][ds.split] = {
            "path": path.name, "records": len(ds),
            "checksum": ds.checksum, "file_sha256": _sha256_file(path),
        }
        print(f"{ds.split}: {len(ds)} records -> {path}")
    (outdir / "split_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _echo_config(outdir, args)
    return EXIT_OK


def cmd_train(args) -> int:
    outdir = Path(args.out)
    (outdir / "checkpoints").mkdir(parents=True, exist_ok=True)
    train_ds = _read_split(args.data, "train")
    val_ds = _read_split(args.data, "val")

    config = TrainConfig(
        batch_size=args.batch_size, initial_lr=args.lr, epochs=args.epochs,
        plateau_factor=args.plateau_factor, plateau_patience=args.plateau_patience,
        early_stop_patience=args.early_stop_patience if args.early_stop_patience > 0 else None,
        warmup_epochs=args.warmup_epochs, seed=args.seed)
    model = build_toy_model(args.arch, depth=args.depth, width=args.width,
                            num_classes=train_ds.labels.shape[1], seed=args.seed)
    augment = augment_flip if args.augment else None
    model, history = train(model, train_ds.arrays(), val_ds.arrays(), config,
                           augment=augment)

    ckpt = outdir / "checkpoints" / "best.ckpt"
    save_checkpoint(model, ckpt)
    write_history(history, outdir / "history.csv")
    _echo_config(outdir, args)
    last = history[-1]
    print(f"trained {args.arch} for {len(history)} epochs; "
          f"val_loss={last['val_loss']:.4f} val_acc={last['val_acc']:.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _member_names(models) -> list[str]:
    seen: dict[str, int] = {}
    names = []
    for m in models:
        arch = m.architecture
        seen[arch] = seen.get(arch, 0) + 1
        names.append(arch if seen[arch] == 1 else f"{arch}_{seen[arch]}")
    return names


def cmd_ensemble(args) -> int:
    if len(args.members) < 2:
        raise ValueError(f"ensemble requires >= 2 members, got {len(args.members)}")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    models = [load_checkpoint(p) for p in args.members]
    val_ds = _read_split(args.data, "val")

    ensemble = EnsembleModel(models)
    history = fit_weights(ensemble, val_ds.arrays(),
                          WeightFitConfig(steps=args.steps, lr=args.lr))

    rel_paths = [os.path.relpath(Path(p).resolve(), outdir.resolve())
                 for p in args.members]
    checksums = [model_checksum(m) for m in models]
    write_manifest(outdir / "manifest.json", rel_paths, ensemble.weights, checksums)
    table = report_weights(_member_names(models), ensemble.weights)
    (outdir / "report.txt").write_text(table)
    _echo_config(outdir, args)
    sys.stdout.write(table)
    print(f"validation loss {history[0]['loss']:.4f} -> {history[-1]['loss']:.4f} "
          f"over {len(history) - 1} steps")
    print(f"manifest: {outdir / 'manifest.json'}")
    return EXIT_OK


def _eval_lines(cm, report) -> list[str]:
    return [
        f"tn, fp, fn, tp: {cm.tn}, {cm.fp}, {cm.fn}, {cm.tp}",
        "accuracy, precision, recall, f1: "
        f"{fmt_pct(report.accuracy)}, {fmt_pct(report.precision)}, "
        f"{fmt_pct(report.recall)}, {fmt_pct(report.f1)}",
        f"auc: {report.auc:.4f}  loss: {report.loss:.4f}",
    ]


def cmd_eval(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    model = load_ensemble(args.manifest) if args.manifest else load_checkpoint(args.model)
    if args.records:
        dataset = read_records(args.records)
    else:
        dataset = _read_split(args.data, args.split)

    report, cm, curve = evaluate(model, dataset.arrays(), batch_size=args.batch_size)
    write_report_text(report, cm, outdir / "report.txt")
    write_report_json(report, cm, outdir / "report.json")
    write_roc_csv(curve, outdir / "roc.csv")
    _echo_config(outdir, args)
    for line in _eval_lines(cm, report):
        print(line)
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} does not exist")
    found = False
    for name in ("config.txt", "report.txt"):
        path = run / name
        if path.exists():
            found = True
            print(f"# {name}")
            sys.stdout.write(path.read_text())
            print()
    history_path = run / "history.csv"
    if history_path.exists():
        found = True
        lines = history_path.read_text().strip().splitlines()
        print("# history.csv (last epoch)")
        print(lines[0])
        print(lines[-1])
        print()
    manifest_path = run / "manifest.json"
    if manifest_path.exists():
        found = True
        doc = json.loads(manifest_path.read_text())
        print("# manifest.json")
        print(f"members: {len(doc['members'])}")
    if not found:
        raise FileNotFoundError(f"no run artifacts found under {run}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="flocknet",
        description="Small CNN classifier pipeline: data, training, ensembling, metrics.",
        epilog="exit codes: 0 success, 1 error, 2 usage, 3 training diverged")
    subs = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def new_command(name, handler, **kwargs):
        sub = subs.add_parser(name, **kwargs)
        sub.set_defaults(func=handler)
        _add(name, sub, "--config", type=str, default=None,
             help="key=value file; explicit flags win over file values")
        _add(name, sub, "--out", type=str, default=str(_default_out(name)),
             help=f"output directory (default from ${ENV_OUT} or ./runs)")
        registry[name] = sub
        return sub

    sub = new_command("dataset-build", cmd_dataset_build,
                      help="build train/val/test record files")
    _add("dataset-build", sub, "--synthetic", action="store_true",
         help="generate the synthetic two-class corpus")
    _add("dataset-build", sub, "--per-class", type=int, default=32)
    _add("dataset-build", sub, "--normal-dir", type=str, default=None)
    _add("dataset-build", sub, "--pneumonia-dir", type=str, default=None)
    _add("dataset-build", sub, "--skip-bad", action="store_true",
         help="skip undecodable images instead of aborting")
    _add("dataset-build", sub, "--image-size", type=int, default=224)
    _add("dataset-build", sub, "--counts", type=_parse_counts, default=None,
         help="train,val,test sizes (default 64/16/20 split)")
    _add("dataset-build", sub, "--seed", type=int, default=0)

    sub = new_command("train", cmd_train, help="train one architecture")
    _add("train", sub, "--data", type=str, required=True,
         help="directory holding train.efrc and val.efrc")
    _add("train", sub, "--arch", type=str, required=True, choices=KINDS)
    _add("train", sub, "--depth", type=int, default=3)
    _add("train", sub, "--width", type=int, default=8)
    _add("train", sub, "--seed", type=int, default=0)
    _add("train", sub, "--batch-size", type=int, default=128)
    _add("train", sub, "--lr", type=float, default=0.001)
    _add("train", sub, "--epochs", type=int, default=100)
    _add("train", sub, "--plateau-factor", type=float, default=0.3)
    _add("train", sub, "--plateau-patience", type=int, default=5)
    _add("train", sub, "--early-stop-patience", type=int, default=20,
         help="0 disables early stopping")
    _add("train", sub, "--warmup-epochs", type=int, default=0)
    _add("train", sub, "--no-augment", dest="augment", action="store_false",
         help="disable random horizontal flips")

    sub = new_command("ensemble", cmd_ensemble, help="fit ensemble weights")
    _add("ensemble", sub, "--members", type=str, nargs="+", required=True,
         help="two or more member checkpoints")
    _add("ensemble", sub, "--data", type=str, required=True,
         help="directory holding val.efrc")
    _add("ensemble", sub, "--steps", type=int, default=300)
    _add("ensemble", sub, "--lr", type=float, default=0.05)

    sub = new_command("eval", cmd_eval, help="score a checkpoint or ensemble")
    group = sub.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", type=str, default=None, help="member checkpoint")
    group.add_argument("--manifest", type=str, default=None, help="ensemble manifest")
    _CONVERTERS["eval"]["model"] = str
    _CONVERTERS["eval"]["manifest"] = str
    _add("eval", sub, "--data", type=str, default=None,
         help="record directory (used with --split)")
    _add("eval", sub, "--split", type=str, default="test",
         choices=("train", "val", "test"))
    _add("eval", sub, "--records", type=str, default=None,
         help="explicit record file (overrides --data)")
    _add("eval", sub, "--batch-size", type=int, default=128)

    sub = new_command("report", cmd_report, help="print a run directory's artifacts")
    _add("report", sub, "--run", type=str, required=True)

    return parser, registry


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            registry[args.command].set_defaults(**_load_config_file(args.config, args.command))
            args = parser.parse_args(argv)
        if args.command == "eval" and not (args.records or args.data):
            raise ValueError("eval needs --records or --data")
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError, CorruptRecordError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
