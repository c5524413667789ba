"""Command-line entry point: ``cdnet {train,eval,ablate,sweep,bench,synth}``.

Metrics go to stdout as one JSON object per line; tables are tab-separated.
Every command that writes under ``--out`` also renders a PNG next to its
table.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import plots
from .bench import bench, quadratic_scaling
from .config import VARIANTS, TrainConfig, apply_overrides, dump_config, load_config
from .data import (ConfigError, DataQualityError, SampleSet, SynthConfig, build_samples, load_cache,
                   parse_log, save_cache, synth_generate, temporal_split)
from .trainer import (SWEEP_AXES, CheckpointError, TrainingError, evaluate, load_checkpoint,
                      save_checkpoint, sweep, train)

log = logging.getLogger("cdnet")

ABLATION_VARIANTS = ("cdnet", "rcore", "rgid")
METRIC_COLUMNS = ("auc", "gauc", "logloss")


class UsageError(Exception):
    """Bad command-line input that argparse itself cannot catch."""


# -- argument parsing --------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data_required: bool = True):
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--data", type=Path, required=data_required,
                   help="behavior log (.csv) or sample cache (.cdns)")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--L", type=int, help="maximum behavior-sequence length")
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdnet", description="Core-behavior CTR model tools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model; writes checkpoint, trace and figure")
    _common(p)

    p = sub.add_parser("eval", help="score a checkpoint on cached samples")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="defaults to OUT/model.ckpt")
    p.add_argument("--split", choices=("train", "valid", "test", "all"), default="test")

    p = sub.add_parser("ablate", help="compare cdnet, rcore and rgid on identical data")
    _common(p)

    p = sub.add_parser("sweep", help="train one model per value of a hyperparameter")
    _common(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("bench", help="attention cost of selected tokens vs the full sequence")
    p.add_argument("--L", type=int, nargs="+", default=[600])
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--N_f", type=int, default=20)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs"))

    p = sub.add_parser("synth", help="write a planted-signal sample cache")
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--L", type=int, help="sequence length")
    p.add_argument("--out", type=Path, default=Path("synth.cdns"), help="cache file to write")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a generator setting (repeatable)")
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    flags = {"seed": args.seed, "variant": args.variant, "k": args.k, "n": args.n, "L_max": args.L,
             "epochs": args.epochs}
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return apply_overrides(cfg, overrides)


def load_samples(path: Path, cfg: TrainConfig) -> SampleSet:
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    if path.suffix.lower() == ".csv":
        return build_samples(parse_log(path), cfg.L_max, neg_ratio=cfg.neg_ratio, seed=cfg.seed)
    return load_cache(path)


def load_splits(args, cfg: TrainConfig):
    samples = load_samples(args.data, cfg)
    if samples.schema.max_len != cfg.L_max:
        log.info("L_max %d taken from data (config had %d)", samples.schema.max_len, cfg.L_max)
        cfg = cfg.replace(L_max=samples.schema.max_len)
    return cfg, samples, temporal_split(samples)


# -- output helpers ---------------------------------------------------------------

def emit(record: dict, stream=None):
    print(json.dumps(record, sort_keys=True), file=stream or sys.stdout, flush=True)


def write_table(rows: list[dict], columns, path: Path | None = None) -> str:
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join(_fmt(r.get(c, "")) for c in columns))
    text = "\n".join(lines) + "\n"
    if path is not None:
        path.write_text(text, encoding="utf-8")
    return text


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


# -- commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg, _, (tr, va, te) = load_splits(args, resolve_config(args))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    with open(args.out / "trace.jsonl", "w", encoding="utf-8") as fh:
        def record(rec):
            emit(rec)
            emit(rec, fh)
        result = train(cfg, tr, va, on_record=record)
        record({"epoch": result.best_epoch, "split": "test", **evaluate(result.model, te)})
    save_checkpoint(result.model, args.out / "model.ckpt", result.optimizer)
    plots.plot_trace(result.trace, args.out / "trace.png")
    return 0


def cmd_eval(args) -> int:
    ckpt = args.checkpoint or args.out / "model.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, _ = load_checkpoint(ckpt)
    _, samples, (tr, va, te) = load_splits(args, model.config)
    chosen = {"train": tr, "valid": va, "test": te, "all": samples}[args.split]
    emit({"split": args.split, **evaluate(model, chosen)})
    return 0


def cmd_ablate(args) -> int:
    base, _, (tr, va, te) = load_splits(args, resolve_config(args))
    rows = []
    for variant in ABLATION_VARIANTS:
        result = train(base.replace(variant=variant), tr, va)
        rows.append({"variant": variant, **evaluate(result.model, te)})
    args.out.mkdir(parents=True, exist_ok=True)
    sys.stdout.write(write_table(rows, ("variant",) + METRIC_COLUMNS, args.out / "ablation.tsv"))
    plots.plot_ablation(rows, args.out / "ablation.png")
    return 0


def cmd_sweep(args) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    cfg, _, (tr, va, te) = load_splits(args, resolve_config(args))
    rows = sweep(args.axis, values, cfg, tr, va, te)
    args.out.mkdir(parents=True, exist_ok=True)
    columns = ("axis", "value", "k") + METRIC_COLUMNS + ("error",)
    sys.stdout.write(write_table(rows, columns, args.out / "sweep.tsv"))
    plots.plot_sweep(rows, args.out / "sweep.png")
    return 0 if not any("error" in r for r in rows) else 1


def cmd_bench(args) -> int:
    if any(v < 1 for v in args.L) or min(args.k, args.d, args.heads, args.batch) < 1 or args.N_f < 0:
        raise UsageError("bench sizes must be positive")
    rows = [r.as_dict() for r in bench(args.L, args.k, args.N_f, args.d, args.heads, args.batch,
                                       seed=args.seed)]
    args.out.mkdir(parents=True, exist_ok=True)
    columns = ("L", "k", "N_f", "d", "tokens_cdnet", "tokens_full", "quad_macs_cdnet", "quad_macs_full",
               "total_macs_cdnet", "total_macs_full", "predicted_ratio", "measured_ratio",
               "seconds_cdnet", "seconds_full", "wall_ratio")
    sys.stdout.write(write_table(rows, columns, args.out / "bench.tsv"))
    plots.plot_bench(rows, args.out / "bench.png")
    scaling = quadratic_scaling(max(args.L), args.N_f, args.d, args.heads, seed=args.seed)
    emit({"quadratic_scaling": scaling})
    return 0


def cmd_synth(args) -> int:
    values = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        if key not in SynthConfig.__dataclass_fields__:
            raise ConfigError(f"{key}: unknown generator setting")
        ftype = type(getattr(SynthConfig(), key))
        values[key] = value.lower() in ("1", "true", "yes") if ftype is bool else ftype(value)
    if args.L is not None:
        values["seq_len"] = args.L
    samples = synth_generate(SynthConfig(**values), args.samples, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_cache(samples, args.out)
    emit({"wrote": str(args.out), "samples": len(samples), "positive_rate": float(samples.label.mean())})
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "sweep": cmd_sweep,
            "bench": cmd_bench, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        parser.print_usage(sys.stderr)
        print(f"cdnet: error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, DataQualityError, TrainingError, ValueError) as e:
        print(f"cdnet: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
