"""Command-line entry point: ``hybrid-aid run`` and ``hybrid-aid verify``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import platform
import sys
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__
from .config import ConfigError, load, render
from .metrics import cohort_summary_csv, report, report_csv
from .personalization import FIT_PARAMS
from .pipeline import build_cohort, personalize_cohort, run_scenarios
from .scenarios import run_seed

log = logging.getLogger("hybrid_aid")

MANIFEST = "manifest.txt"
EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG = 0, 1, 2


def _trace_name(sid: str, subject: int) -> str:
    return f"{sid}_subject{subject:02d}.csv"


def _subjects_csv(subjects) -> str:
    plant_keys = ("BW", "k12", "EGP0_per_kg", "SI1", "SI2", "SI3", "tau_S", "tau_D", "k_e", "V_G_per_kg")
    head = (["subject"] + [f"plant_{k}" for k in plant_keys] + [f"fit_{k}" for k in FIT_PARAMS]
            + ["u_basal", "TDI_basal", "CR", "CF", "fit_rmse", "population_rmse", "fit_evals", "bound_active"])
    rows = [",".join(head)]
    for s in subjects:
        vals = [s.index] + [getattr(s.plant_params, k) for k in plant_keys]
        vals += [getattr(s.controller_params, k) for k in FIT_PARAMS]
        vals += [s.profile.u_basal, s.profile.TDI_basal, s.profile.CR, s.profile.CF]
        vals += [s.fit.rmse, s.fit.population_rmse, s.fit.iterations, int(s.fit.bound_active)]
        rows.append(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals))
    return "\n".join(rows) + "\n"


def _manifest(cfg, seeds: list[tuple[str, int, int]], degraded: int) -> str:
    lines = [
        "# hybrid-aid run manifest; reusable as --config",
        f"# config_hash = {cfg.hash}",
        f"# version = hybrid-aid {__version__}, python {platform.python_version()}, numpy {np.__version__}, "
        f"scipy {scipy.__version__}, numba {numba.__version__}",
        f"# degraded_steps = {degraded}",
    ]
    lines += [f"# seed {sid} subject {i:02d} = {seed}" for sid, i, seed in seeds]
    return "\n".join(lines) + "\n" + render(cfg.values)


def cmd_run(args) -> int:
    flags = {"run.scenarios": args.scenarios, "run.n": args.n, "run.seed": args.seed, "run.noise": args.noise,
             "run.out": args.out, "run.workers": args.workers}
    try:
        cfg = load(args.config, flags)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = cfg.out
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)

    subjects = build_cohort(cfg.cohort)
    log.info("personalizing %d subjects", len(subjects))
    subjects, train = personalize_cohort(subjects, cfg.cohort, cfg.workers)
    seeds = []
    for s, tr in zip(subjects, train):
        tr.to_csv(out / "traces" / _trace_name("TRAIN", s.index))
        seeds.append(("TRAIN", s.index, tr.seed))
    (out / "subjects.csv").write_text(_subjects_csv(subjects))

    log.info("running %s", ",".join(cfg.scenarios))
    traces = run_scenarios(subjects, cfg.scenarios, cfg.cohort, cfg.workers)
    rows = []
    degraded = 0
    bw = {s.index: s.plant_params.BW for s in subjects}
    for (idx, sid), tr in sorted(traces.items(), key=lambda kv: (cfg.scenarios.index(kv[0][1]), kv[0][0])):
        tr.to_csv(out / "traces" / _trace_name(sid, idx))
        rep = report(tr, bw[idx])
        (out / "reports" / _trace_name(sid, idx)).write_text(report_csv([(idx, sid, rep)]))
        rows.append((idx, sid, rep))
        seeds.append((sid, idx, run_seed(cfg.seed, idx, sid)))
        degraded += tr.degraded
    (out / "summary.csv").write_text(cohort_summary_csv(rows))
    (out / MANIFEST).write_text(_manifest(cfg, seeds, degraded))
    if degraded:
        log.warning("%d degraded controller steps (see manifest)", degraded)
    print(f"wrote {len(rows)} runs to {out}")
    return EXIT_OK


# --- verify ----------------------------------------------------------------

def _manifest_hash(path: Path) -> str | None:
    for line in path.read_text().splitlines():
        if line.startswith("# config_hash ="):
            return line.split("=", 1)[1].strip()
    return None


def _num(text: str) -> float | None:
    try:
        return float(text)
    except ValueError:
        return None


def compare_csv(a: Path, b: Path, tol: float) -> str | None:
    """First divergence between two CSV files, or None."""
    ra = list(csv.reader(a.read_text().splitlines()))
    rb = list(csv.reader(b.read_text().splitlines()))
    if len(ra) != len(rb):
        return f"{b}: {len(rb)} rows, expected {len(ra)}"
    header = None
    for r, (x, y) in enumerate(zip(ra, rb), 1):
        if x and x[0].startswith("#"):
            if x != y:
                return f"{b}: row {r}: header comment differs"
            continue
        if header is None:
            header = x
            if x != y:
                return f"{b}: row {r}: column names differ"
            continue
        if len(x) != len(y):
            return f"{b}: row {r}: {len(y)} cells, expected {len(x)}"
        for c, (u, v) in enumerate(zip(x, y)):
            nu, nv = _num(u), _num(v)
            if nu is not None and nv is not None:
                same = (math.isnan(nu) and math.isnan(nv)) or nu == nv or abs(nu - nv) <= tol
            else:
                same = u == v
            if not same:
                col = header[c] if c < len(header) else str(c)
                return f"{b}: row {r}, column {col}: {v} vs golden {u}"
    return None


def cmd_verify(args) -> int:
    golden, fresh = Path(args.golden), Path(args.fresh)
    for d in (golden, fresh):
        if not (d / MANIFEST).is_file():
            print(f"{d}: no {MANIFEST}", file=sys.stderr)
            return EXIT_CONFIG
    hg, hf = _manifest_hash(golden / MANIFEST), _manifest_hash(fresh / MANIFEST)
    if hg != hf:
        print(f"config hash differs: {hg} vs {hf}", file=sys.stderr)
        return EXIT_MISMATCH
    files_g = sorted(p.relative_to(golden) for p in golden.rglob("*.csv"))
    files_f = sorted(p.relative_to(fresh) for p in fresh.rglob("*.csv"))
    if files_g != files_f:
        missing = sorted(set(map(str, files_g)) ^ set(map(str, files_f)))
        print(f"file sets differ: {', '.join(missing[:5])}", file=sys.stderr)
        return EXIT_MISMATCH
    for rel in files_g:
        diff = compare_csv(golden / rel, fresh / rel, args.tol)
        if diff:
            print(f"mismatch: {diff}", file=sys.stderr)
            return EXIT_MISMATCH
    print(f"{len(files_g)} files match (tol {args.tol:g})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybrid-aid", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="personalize a cohort and run scenarios")
    run.add_argument("--scenarios", help="e.g. S0, S1..S9, all")
    run.add_argument("--n", type=int, help="cohort size")
    run.add_argument("--seed", type=int, help="cohort seed")
    run.add_argument("--noise", action="store_true", default=None, help="enable CGM noise")
    run.add_argument("--out", help="output directory")
    run.add_argument("--workers", type=int, help="parallel worker processes")
    run.add_argument("--config", help="config file or a previous manifest")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="compare a fresh output directory with a golden one")
    ver.add_argument("golden")
    ver.add_argument("fresh")
    ver.add_argument("--tol", type=float, default=1e-9, help="absolute tolerance per numeric cell")
    ver.set_defaults(func=cmd_verify)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
