"""Command-line entry point: ``textrsir <command> [--config PATH] [--set KEY=VALUE ...]``.

Every invocation writes into a fresh run directory under ``--out`` holding the
effective config (``config.ini``) and the command's outputs.

Exit codes: 0 success, 1 usage/config/validation error, 2 runtime failure.
"""

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import datapipe, evalharness
from .config import load_config, parse_overrides
from .errors import (
    ArgumentError,
    ConfigurationError,
    DimensionError,
    ManifestError,
    PreparationError,
)
from .estimators import TextRSIRRegressor
from .trainer import read_loss_trace, save_checkpoint, write_loss_trace

log = logging.getLogger("textrsir")

COMMANDS = ("prepare", "train", "eval", "ablate", "caption-compare", "budget", "plot")
USER_ERRORS = (ArgumentError, ConfigurationError, DimensionError, ManifestError, PreparationError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="textrsir", description=__doc__.splitlines()[0])
    parser.add_argument("command", help=f"one of: {', '.join(COMMANDS)}")
    parser.add_argument("--config", metavar="PATH", help="INI config file")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override a config key (repeatable)")
    parser.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    parser.add_argument("--out", metavar="DIR", default="runs", help="parent of run directories")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def make_run_dir(parent, command):
    parent = Path(parent)
    parent.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for n in range(1000):
        candidate = parent / (f"{command}-{stamp}" + (f"-{n}" if n else ""))
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory under {parent}")


def _require(value, key):
    if not value:
        raise ConfigurationError(f"{key} must be set for this command")
    if not Path(value).exists():
        raise ConfigurationError(f"{key} = {value} does not exist")
    return value


# keys naming inputs that must already exist when a command starts
INPUT_PATHS = (
    ("data", "manifest"),
    ("data", "compare_dir"),
    ("data", "caption_cache"),
    ("eval", "checkpoint"),
    ("eval", "plot_trace"),
    ("eval", "plot_fractions"),
)


def check_paths(cfg, command):
    keys = list(INPUT_PATHS)
    if command != "prepare":
        keys.append(("data", "prepared_dir"))
    for section, key in keys:
        value = getattr(getattr(cfg, section), key)
        if value and not Path(value).exists():
            raise ConfigurationError(f"{section}.{key} = {value} does not exist")


def _estimator(cfg):
    mc = cfg.model_config()
    tc = cfg.train.validate()
    return TextRSIRRegressor(
        channels=mc.channels,
        num_sr_units=mc.num_sr_units,
        sr_unit_kind=mc.sr_unit_kind,
        alpha_init=mc.alpha_init,
        hierarchy=mc.hierarchy,
        use_sgm=mc.use_sgm,
        use_te=mc.use_te,
        learnable_alpha=mc.learnable_alpha,
        global_skip=mc.global_skip,
        clip_backend=cfg.model.clip_backend,
        epochs=tc.epochs,
        batch_size=tc.batch_size,
        base_lr=tc.base_lr,
        weight_decay=tc.weight_decay,
        crop_size=tc.crop_size,
        random_state=tc.seed,
        device=tc.device,
    )


def _provider(data, records):
    if data.caption_provider == "cached" and not data.caption_cache:
        return datapipe.CachedCaptionProvider.from_records(records)
    return datapipe.make_provider(
        data.caption_provider,
        text=data.caption_text,
        cache=data.caption_cache or None,
        endpoint=data.caption_endpoint,
        prompt=data.caption_prompt,
        timeout=data.caption_timeout,
        retries=data.caption_retries,
        max_in_flight=data.caption_max_in_flight,
    )


# ---------------------------------------------------------------- commands


def cmd_prepare(cfg, run_dir):
    data = cfg.data
    records = datapipe.load_manifest(_require(data.manifest, "data.manifest"))
    out_dir = Path(data.prepared_dir) if data.prepared_dir else run_dir / "prepared"
    result = datapipe.prepare(
        records, data.factor, data.quality, _provider(data, records), out_dir,
        caption_source=data.caption_source, workers=data.workers,
    )
    print(f"prepared {len(result.payloads)} of {len(records)} records into {out_dir}")
    if result.failures:
        (run_dir / "failures.json").write_text(json.dumps(result.failures, indent=2))
        for rid, msg in result.failures.items():
            print(f"  failed {rid}: {msg}", file=sys.stderr)
        if not result.payloads:
            return 2
    return 0


def _records_and_dir(cfg):
    records = datapipe.load_manifest(_require(cfg.data.manifest, "data.manifest"))
    prepared = _require(cfg.data.prepared_dir, "data.prepared_dir")
    return records, prepared


def cmd_train(cfg, run_dir):
    records, prepared = _records_and_dir(cfg)
    est = _estimator(cfg)
    evalharness.fit_on_records(est, records, prepared)
    save_checkpoint(run_dir / "checkpoint.pt", est.checkpoint_)
    write_loss_trace(run_dir / "loss_trace.csv", est.loss_trace_)
    first, last = est.loss_trace_[0][2], est.loss_trace_[-1][2]
    print(f"trained {len(est.loss_trace_)} steps, loss {first:.6f} -> {last:.6f}")
    print(f"checkpoint: {run_dir / 'checkpoint.pt'}")
    return 0


def cmd_eval(cfg, run_dir):
    records, prepared = _records_and_dir(cfg)
    test = datapipe.split_records(records, "test")
    ckpt = _require(cfg.eval.checkpoint, "eval.checkpoint")
    est = TextRSIRRegressor.load(ckpt)
    report = evalharness.evaluate(est, test, prepared, checkpoint_id=str(ckpt))
    report.write(run_dir, "report", cfg.eval.per_record_csv)
    baseline = evalharness.bicubic_baseline(test, prepared)
    baseline.write(run_dir, "bicubic", cfg.eval.per_record_csv)
    print(report.to_table())
    print("\nbicubic baseline")
    print(baseline.to_table())
    return 0


def cmd_ablate(cfg, run_dir):
    records, prepared = _records_and_dir(cfg)
    results = evalharness.ablate(records, prepared, _estimator(cfg))
    for i, (spec, report) in enumerate(results):
        report.write(run_dir, f"ablation-{i}-{spec.name}", cfg.eval.per_record_csv)
    table = evalharness.format_ablation(results)
    (run_dir / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_caption_compare(cfg, run_dir):
    records, prepared = _records_and_dir(cfg)
    other = _require(cfg.data.compare_dir, "data.compare_dir")
    est = TextRSIRRegressor.load(_require(cfg.eval.checkpoint, "eval.checkpoint"))
    paired = evalharness.caption_source_compare(
        est, datapipe.split_records(records, "test"), prepared, other
    )
    (run_dir / "caption_compare.json").write_text(paired.to_json() + "\n")
    for rid, delta in paired.psnr_deltas.items():
        print(f"{rid:<24}{delta:+.4f} dB")
    return 0


def cmd_budget(cfg, run_dir):
    prepared = _require(cfg.data.prepared_dir, "data.prepared_dir")
    rows = datapipe.budget_table(datapipe.read_payloads(prepared))
    (run_dir / "budget.json").write_text(json.dumps([asdict(r) for r in rows], indent=2) + "\n")
    table = datapipe.format_budget(rows)
    (run_dir / "budget.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_plot(cfg, run_dir):
    made = []
    if cfg.eval.plot_trace:
        trace = read_loss_trace(_require(cfg.eval.plot_trace, "eval.plot_trace"))
        evalharness.plot_loss_trace(trace, run_dir / "loss.png")
        made.append("loss.png")
    if cfg.eval.plot_fractions:
        with open(_require(cfg.eval.plot_fractions, "eval.plot_fractions"), newline="") as fh:
            points = [(float(r["fraction"]), float(r["psnr_db"])) for r in csv.DictReader(fh)]
        evalharness.plot_data_fraction(points, run_dir / "psnr_vs_fraction.png")
        made.append("psnr_vs_fraction.png")
    if not made:
        raise ConfigurationError("set eval.plot_trace and/or eval.plot_fractions to plot")
    print("wrote " + ", ".join(str(run_dir / m) for m in made))
    return 0


HANDLERS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "caption-compare": cmd_caption_compare,
    "budget": cmd_budget,
    "plot": cmd_plot,
}


def run(argv=None):
    """Parse ``argv``, execute the command, and return the exit code."""
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return 0 if exc.code in (0, None) else 1
        if args.command not in HANDLERS:
            raise UsageError(f"unknown command {args.command!r} (expected one of {', '.join(COMMANDS)})")
        overrides = parse_overrides(args.overrides)
        if args.seed is not None:
            overrides[("train", "seed")] = args.seed
        cfg = load_config(args.config, overrides)
        check_paths(cfg, args.command)
        if args.command in ("train", "ablate"):
            cfg.train.validate()
            cfg.model_config().validate()
    except (UsageError, *USER_ERRORS) as exc:
        print(f"textrsir: error: {exc}", file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_dir = make_run_dir(args.out, args.command)
        (run_dir / "config.ini").write_text(cfg.to_ini())
        return HANDLERS[args.command](cfg, run_dir)
    except USER_ERRORS as exc:
        print(f"textrsir: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"textrsir: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
