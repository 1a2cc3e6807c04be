"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 non-finite numerics,
4 audit mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import datagen as dg
from . import harness as H
from .config import ConfigError, RunConfig, load_config, parse_config, with_overrides
from .datagen import SpecError
from .numcore import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_AUDIT = 0, 2, 3, 4

log = logging.getLogger("attrdis")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    cfg = with_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg = with_overrides(cfg, [f"seed={args.seed}"])
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.output_dir
    if not out:
        raise ConfigError("output_dir: give --out or set output_dir in the config")
    return Path(out)


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    train, test = H.make_data(cfg)
    dg.save_dataset(train, out / "train.txt")
    dg.save_dataset(test, out / "test.txt")
    (out / "config.resolved").write_text(cfg.to_yaml())
    print(f"wrote {train.n} train and {test.n} test samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    record = H.train_run(cfg)
    H.write_run(record, out)
    te = record.metrics["test"]
    print(f"{cfg.train.mode} seed={cfg.seed} hash={record.config_hash} "
          f"test mA={te.mA:.4f} P={te.precision:.4f} R={te.recall:.4f} F1={te.f1:.4f} -> {out}")
    return EXIT_OK


def _write_comparison(cmp: H.Comparison, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for arm, recs in cmp.records.items():
        for r in recs:
            H.write_run(r, out / f"{arm}_seed{r.seed}")
    (out / "runs.csv").write_text(H.rows_csv(cmp.rows()))
    agg_rows = [{"arm": arm, **{f"{k}_{s}": v[i] for k, v in stats.items() for i, s in enumerate(("mean", "std"))}}
                for arm, stats in cmp.aggregate().items()]
    (out / "summary.csv").write_text(H.rows_csv(agg_rows))
    diffs = cmp.paired_diffs()
    if diffs:
        rows = [{"arm": arm, "seed": seed, "test_mA_minus_baseline": d}
                for arm, ds in diffs.items() for seed, d in zip(cmp.seeds, ds)]
        (out / "paired.csv").write_text(H.rows_csv(rows))
    for arm, stats in cmp.aggregate().items():
        m, s = stats["test_mA"]
        print(f"{arm:14s} test mA {m:.4f} +- {s:.4f}  recall {stats['test_recall'][0]:.4f}  f1 {stats['test_f1'][0]:.4f}")


def cmd_compare(args) -> int:
    cfg = _config(args)
    cmp = H.compare_modes(cfg, args.modes, args.seeds, args.workers)
    _write_comparison(cmp, _out_dir(args, cfg))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    try:
        cmp = H.ablate_ndsi(cfg, args.seeds, args.workers)
    except ValueError as err:
        raise ConfigError(f"data.norm_jitter: {err}") from None
    _write_comparison(cmp, _out_dir(args, cfg))
    return EXIT_OK


def cmd_analyze(args) -> int:
    files = H.analyze(args.run_dir)
    for name, text in files.items():
        if args.write:
            Path(args.run_dir, name).write_text(text)
        else:
            print(f"# {name}")
            sys.stdout.write(text)
    return EXIT_OK


def cmd_audit(args) -> int:
    status = EXIT_OK
    for run_dir in args.run_dirs:
        bad = H.audit(run_dir)
        print(f"{run_dir}: {'OK' if not bad else 'MISMATCH ' + ' '.join(bad)}")
        if bad:
            status = EXIT_AUDIT
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrdis", description="Attribute-disentangled multi-label experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run config (defaults are used for missing keys)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.mode=eq4")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        return sp

    with_config(sub.add_parser("generate", help="write the train/test datasets")).set_defaults(fn=cmd_generate)
    with_config(sub.add_parser("train", help="train one configuration")).set_defaults(fn=cmd_train)
    sp = with_config(sub.add_parser("compare", help="several modes over several seeds"))
    sp.add_argument("--modes", nargs="+", default=["baseline", "eq3", "eq4", "mixup_input"])
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=cmd_compare)
    sp = with_config(sub.add_parser("ablate-ndsi", help="eq3/eq4 with and without NDSI"))
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=cmd_ablate)
    sp = sub.add_parser("analyze", help="recompute metrics, anchors and MI from a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--write", action="store_true", help="overwrite the CSVs instead of printing them")
    sp.set_defaults(fn=cmd_analyze)
    sp = sub.add_parser("audit", help="recompute every CSV and diff against the saved files")
    sp.add_argument("run_dirs", nargs="+")
    sp.set_defaults(fn=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, SpecError) as err:
        print(f"config error:\n{err}", file=sys.stderr)
        return EXIT_CONFIG
    except (H.NumericFailure, NonFiniteError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
