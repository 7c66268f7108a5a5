"""Command-line entry point: ``gazedec <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import calibration as cal
from .simulate import (ExperimentConfig, crossover, default_threads, simulate, theorem1_check,
                       theorem2_check)

log = logging.getLogger("gazedec")

SEED_ENV = "GAZEDEC_SEED"


def _seed(value):
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def cmd_simulate(args) -> int:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    # --seed beats the config file, which beats the environment
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    elif os.environ.get(SEED_ENV) and "master_seed" not in _config_keys(args.config):
        cfg = replace(cfg, master_seed=_seed(None))
    log.info("config:\n%s", cfg.to_text())
    rows = simulate(cfg, args.out, args.threads)
    for ov in cfg.overlaps:
        print(f"overlap {ov:g}: nocal crossover at I_tr = {crossover(rows, ov):g}")
    print(f"wrote {Path(args.out) / 'results.csv'} and {Path(args.out) / 'summary.csv'}")
    return 0


def _config_keys(path) -> set:
    if not path:
        return set()
    keys = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0]
            if "=" in line:
                keys.add(line.split("=", 1)[0].strip())
    return keys


def cmd_theorem_check(args) -> int:
    seed = _seed(args.seed)
    if args.which == 1:
        cases = theorem1_check(args.seeds, seed)
        worst_k = max(c.k_rel for c in cases)
        worst_w = max(c.woodbury_rel for c in cases)
        worst_c = max(c.k_wc for c in cases)
        ok = worst_k < 1e-8 and worst_w < 1e-8 and worst_c < 1e-8
        print(f"estimator equality: {len(cases)} models, max |K_nocal-K_cal|/|K_cal| = {worst_k:.2e}, "
              f"max Woodbury rel err = {worst_w:.2e}, max |K W_c| = {worst_c:.2e}: "
              f"{'PASS' if ok else 'FAIL'}")
        return 0 if ok else 1
    cells = theorem2_check(seeds=range(seed, seed + args.seeds), j_tr=args.j_tr)
    bad = [c for c in cells if not c.holds]
    for c in cells:
        print(f"I_tr={c.i_tr:4d} seed={c.seed:3d} gap={c.gap:+.4f} sd={c.gap_sd:.4f} "
              f"trace={c.trace:.4f} population_gap={c.population_gap:.4f}")
    print(f"decomposition advantage: {len(cells) - len(bad)}/{len(cells)} cells satisfy the inequality: "
          f"{'PASS' if not bad else 'FAIL'}")
    return 0 if not bad else 1


def cmd_calibrate(args) -> int:
    records = cal.read_records_csv(args.records)
    params = cal.CalibParams(args.sigma0, args.sigmat)
    rng_root = np.random.SeedSequence(_seed(args.seed))
    subjects = records.subjects
    streams = rng_root.spawn(len(subjects))
    rows = []
    for subj, ss in zip(subjects, streams):
        rec = records.for_subject(subj)
        rng = np.random.default_rng(ss)
        bounds = cal.lower_bound_E(rec)
        errs = []
        for _ in range(args.trials):
            if args.protocol == "mgtc":
                cset = cal.sample_mgtc(rec, args.T, rng)
            else:
                cset = cal.sample_sgtc(rec, args.S, rng, args.tolerance, args.neighborhood)
            errs.append(cal.evaluate(rec, cset, params))
        rows.append((subj, len(rec), float(np.mean(errs)), float(np.std(errs)),
                     bounds.uncalibrated, bounds.lower))
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["subject_id", "n_records", "calibrated_error_deg", "calibrated_error_sd_deg",
                    "uncalibrated_error_deg", "lower_bound_deg"])
        for r in rows:
            w.writerow([r[0], r[1], *(repr(x) for x in r[2:])])
        mean = [float(np.mean([r[k] for r in rows])) for k in (2, 4, 5)]
        w.writerow(["ALL", sum(r[1] for r in rows), repr(mean[0]), "", repr(mean[1]), repr(mean[2])])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_region_sweep(args) -> int:
    records = cal.read_records_csv(args.records)
    params = cal.CalibParams(args.sigma0, args.sigmat)
    rng = np.random.default_rng(_seed(args.seed))
    sweep = cal.region_grid_sweep(records, args.S, params, rng, args.region_size, args.grid_n,
                                  args.grid_step, args.trials, args.tolerance, args.neighborhood)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["yaw_lo_deg", "pitch_lo_deg", "size_deg", "mean_error_deg", "evaluations",
                    "feasible_targets"])
        for r in sweep.regions:
            w.writerow([repr(r.yaw_lo), repr(r.pitch_lo), repr(r.size),
                        "" if math.isnan(r.mean_error) else repr(r.mean_error),
                        r.evaluations, r.feasible_targets])
    finally:
        if out is not sys.stdout:
            out.close()
    print(f"regions={sum(1 for r in sweep.regions if r.evaluations)} mean={sweep.mean:.4f} "
          f"sd={sweep.sd:.4f}", file=sys.stderr)
    return 0


def _add_calib_common(p):
    p.add_argument("--records", required=True, help="CSV of per-image truth and estimates")
    p.add_argument("--sigma0", type=float, required=True, help="prior SD of subject bias (deg)")
    p.add_argument("--sigmat", type=float, required=True, help="SD of estimate residuals (deg)")
    p.add_argument("--S", type=int, default=9, help="images per gaze target")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=cal.DEFAULT_TOLERANCE,
                   help="SGTC target neighborhood radius (deg)")
    p.add_argument("--neighborhood", choices=("angular", "box"), default="angular")
    p.add_argument("--out", default=None, help="output CSV (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazedec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="train/test sweep over overlap and I_tr")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", default=".", help="directory for results.csv and summary.csv")
    p.add_argument("--threads", type=int, default=default_threads())
    p.add_argument("--seed", type=int, default=None, help="overrides master_seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("theorem-check", help="numeric checks of the two estimator theorems")
    p.add_argument("--which", type=int, choices=(1, 2), required=True)
    p.add_argument("--seeds", type=int, default=None,
                   help="random models (--which 1, default 50) or seeds (--which 2, default 20)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--j-tr", type=int, default=10_000, help="samples per training subject (--which 2)")
    p.set_defaults(func=cmd_theorem_check)

    p = sub.add_parser("calibrate", help="per-subject calibration of CSV records")
    _add_calib_common(p)
    p.add_argument("--protocol", choices=("sgtc", "mgtc"), default="sgtc")
    p.add_argument("--T", type=int, default=9, help="gaze targets (MGTC)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("region-sweep", help="SGTC error per gaze region")
    _add_calib_common(p)
    p.set_defaults(trials=1)
    p.add_argument("--region-size", type=float, default=5.0)
    p.add_argument("--grid-n", type=int, default=10)
    p.add_argument("--grid-step", type=float, default=0.5)
    p.set_defaults(func=cmd_region_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "theorem-check" and args.seeds is None:
        args.seeds = 50 if args.which == 1 else 20
    try:
        return args.func(args)
    except (ValueError, OSError, cal.CalibrationError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
