"""``geolora run | compare | check``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 failed check.
"""

import argparse
import json
import os
import sys

from ..errors import ConfigError, InvalidArgument
from .checks import SUITES, run_checks
from .config import load_config
from .runner import run_comparison, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4


def build_parser():
    p = argparse.ArgumentParser(prog="geolora", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("--config", required=True)

    cmp_ = sub.add_parser("compare", help="run several configs on one problem")
    cmp_.add_argument("--configs", nargs="+", required=True)

    chk = sub.add_parser("check", help="run a verification suite")
    chk.add_argument("--suite", required=True, help=", ".join(sorted(SUITES)))

    for sp in (run, cmp_, chk):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
    return p


def _load(path, args):
    cfg = load_config(path)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _report_failure(summary):
    f = summary.get("failure")
    if f:
        print(f"numeric failure: {f['message']}", file=sys.stderr)


def cmd_run(args):
    cfg = _load(args.config, args)
    res = run_experiment(cfg)
    print(json.dumps(res.summary, indent=2, sort_keys=True))
    if not res.ok:
        _report_failure(res.summary)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_compare(args):
    cfgs = []
    for path in args.configs:
        cfg = load_config(path)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        cfgs.append(cfg.replace(output_dir=None))
    results, text = run_comparison(cfgs, args.out)
    if args.out is None:
        sys.stdout.write(text)
    for r in results:
        s = r.summary
        print(f"{s['method']}: final_loss={s['final_loss']:.3e} ranks={s['final_ranks']} "
              f"grad_evals={s['grad_evals']} iters_to_threshold={s['iterations_to_threshold']}",
              file=sys.stderr)
        _report_failure(s)
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


def cmd_check(args):
    report = run_checks(args.suite, args.seed if args.seed is not None else 0)
    for line in report.lines():
        print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"check_{args.suite}.json"), "w") as fh:
            json.dump({"suite": report.suite, "passed": report.passed,
                       "results": [{"name": r.name, "passed": r.passed,
                                    "measured": r.measured} for r in report.results]},
                      fh, indent=2, default=str)
            fh.write("\n")
    return EXIT_OK if report.passed else EXIT_CHECK


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "compare": cmd_compare, "check": cmd_check}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
