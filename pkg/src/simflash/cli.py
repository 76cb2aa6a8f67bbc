"""Command line: ``simflash run | sweep | oracle``.

Exit codes: 0 success, 2 configuration error, 3 simulation failure (or a
failed oracle suite).
"""
import argparse
import json
import logging
import os
import sys

from simflash import experiment, oracles

log = logging.getLogger("simflash")

EXIT_OK, EXIT_CONFIG, EXIT_SIM = 0, 2, 3


def _cmd_run(args):
    cfg = experiment.load_config(args.config)
    changes = {}
    if args.mode:
        changes["mode"] = args.mode
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["output"] = args.out
    cfg = cfg.with_(**changes)
    cfg.workload_spec()  # validate before building the index
    try:
        rep = experiment.run_experiment(cfg)
    except experiment.ConfigError:
        raise
    except Exception as exc:
        log.error("simulation failed (mode=%s seed=%s): %s", cfg.mode, cfg.seed, exc)
        return EXIT_SIM
    sys.stdout.write(experiment.report_text(rep, "json"))
    return EXIT_OK


def _cmd_sweep(args):
    try:
        with open(args.grid) as f:
            grid = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise experiment.ConfigError("", f"cannot load grid {args.grid}: {exc}") from None
    try:
        header, rows = experiment.sweep(grid, jobs=args.jobs)
    except experiment.ConfigError:
        raise
    except Exception as exc:
        log.error("sweep failed: %s", exc)
        return EXIT_SIM
    out = args.out or "sweep.csv"
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    experiment.write_matrix(header, rows, out)
    print(f"{len(rows)} cells -> {out}")
    return EXIT_OK


def _cmd_oracle(args):
    names = list(oracles.SUITES) if args.check == "all" else [args.check]
    status = EXIT_OK
    for name in names:
        ok, detail = oracles.SUITES[name]()
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            status = EXIT_SIM
    return status


def build_parser():
    p = argparse.ArgumentParser(prog="simflash", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--mode", choices=("baseline", "sim"))
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="directory for report and log files")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="paired baseline/SiM runs over a grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", help="matrix CSV path (default sweep.csv)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=_cmd_sweep)

    o = sub.add_parser("oracle", help="run brute-force self-checks")
    o.add_argument("--check", required=True, choices=[*oracles.SUITES, "all"])
    o.set_defaults(func=_cmd_oracle)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except experiment.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
