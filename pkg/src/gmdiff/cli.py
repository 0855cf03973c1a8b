"""``gmdiff`` command line: rates, terminal, certify and sample."""

import argparse
import math
import sys

from .harness import (
    FAULTS, KERNELS, RATE_SLOPE_LIMIT, cmd_certify, cmd_rates, cmd_sample, cmd_terminal, dump_config,
    load_config,
)


def build_parser():
    p = argparse.ArgumentParser(prog="gmdiff", description=__doc__)
    p.add_argument("command", choices=("rates", "terminal", "certify", "sample"))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--rho", type=float)
    p.add_argument("--bigm", dest="M", type=float)
    p.add_argument("--horizon", dest="T", type=int)
    p.add_argument("--n-list", dest="n_list")
    p.add_argument("--kernel", choices=KERNELS)
    p.add_argument("--fault-inject", dest="fault_inject", choices=FAULTS)
    p.add_argument("--workers", type=int)
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "dump_config")}
    try:
        cfg = load_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        print(f"gmdiff: config error: {exc}", file=sys.stderr)
        return 2
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return 0

    if args.command == "rates":
        rows, slopes = cmd_rates(cfg)
        bad = [r for r in rows if r["violation"]]
        for r in bad:
            print(f"bound violation: n={r['n']} t={r['t']} d_kl={r['d_kl']!r} step_bound={r['step_bound']!r}",
                  file=sys.stderr)
        for t, s in slopes.items():
            flag = "" if math.isnan(s) or s <= RATE_SLOPE_LIMIT else f"  (above {RATE_SLOPE_LIMIT})"
            print(f"t={t} slope={s:.4f}{flag}")
        return 1 if bad else 0

    if args.command == "terminal":
        rows = cmd_terminal(cfg)
        for r in rows:
            print(f"T={r['T']} closed_form={r['closed_form']:.10g} mc={r['mc_estimate']:.10g} "
                  f"se={r['std_err']:.3g} agree={r['agree']}")
        return 0 if all(r["agree"] for r in rows) else 1

    if args.command == "certify":
        passed, report = cmd_certify(cfg)
        for k, v in report.items():
            if k.endswith(".pass"):
                print(f"{k[:-5]:<14} {'PASS' if v else 'FAIL'}")
        return 0 if passed else 1

    summary = cmd_sample(cfg)
    for k, v in summary.items():
        print(f"{k} = {v!r}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
