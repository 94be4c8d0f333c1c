"""``mos`` command line: run, ablate, report, gradcheck.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .gradcheck import run_gradcheck
from .harness import (ConfigError, load_config, resolve_output_dir, run_ablation, run_experiment,
                      save_run)

log = logging.getLogger("mos")


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    out = resolve_output_dir(cfg)
    art = run_experiment(cfg)
    save_run(art, cfg, out)
    rep = art.report
    print(f"A_B = {rep.last_accuracy:.2f}  A_bar = {rep.average_accuracy:.2f}  -> {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = resolve_output_dir(cfg)
    reports = run_ablation(cfg, out)
    for name, rep in reports.items():
        print(f"{name:12s} A_B = {rep.last_accuracy:6.2f}  A_bar = {rep.average_accuracy:6.2f}")
    print(f"-> {out / 'ablation.csv'}")
    return 0


def cmd_report(args) -> int:
    root = Path(args.dir)
    paths = [root / "metrics.json"] if (root / "metrics.json").exists() else sorted(root.glob("*/metrics.json"))
    if not paths:
        raise ConfigError(f"no metrics.json under {root}")
    for p in paths:
        m = json.loads(p.read_text())
        accs = m["stage_accuracy"]
        consistent = sum(accs) / len(accs) == m["average_accuracy"]
        print(f"{m['variant']:12s} stages={m['num_stages']:3d}  A_B={m['last_accuracy']:6.2f}  "
              f"A_bar={m['average_accuracy']:6.2f}  retrieval={m['retrieval_accuracy'][-1]:.3f}"
              f"{'' if consistent else '  [A_bar mismatch]'}")
    return 0


def cmd_gradcheck(args) -> int:
    res = run_gradcheck(args.configs, args.seed or 0)
    print(f"checked={res.checked} skipped_at_kinks={res.skipped} failures={len(res.failures)} "
          f"max_rel_err={res.max_rel_err:.3e}")
    for f in res.failures[:10]:
        print("  FAIL", f)
    return 0 if res.ok else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mos", description="Class-incremental adapter engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("ablate", cmd_ablate)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("report")
    sp.add_argument("--dir", required=True)
    sp.set_defaults(func=cmd_report)
    sp = sub.add_parser("gradcheck")
    sp.add_argument("--configs", type=int, default=100)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
