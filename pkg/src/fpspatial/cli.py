"""Command-line entry point: ``fpspatial {generate-population,run,check}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from ._seeding import FROZEN, child
from .checks import run_checks
from .config import ConfigError, build_experiment, expand_grid, load_config, scenario_label
from .dgp import DgpConfig, draw_frozen
from .geometry import generate_uniform_population, write_population_csv
from .montecarlo import (
    run_experiment,
    summarize,
    write_replications_csv,
    write_summary_csv,
)

log = logging.getLogger("fpspatial")

OUT_ENV = "FPSPATIAL_OUT"
MANIFEST = "manifest.json"
REPLICATIONS = "replications.csv"
SUMMARY = "summary.csv"


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def cmd_generate_population(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pop = generate_uniform_population(args.m, args.cluster_size, args.seed, args.order)
    frozen = draw_frozen(pop, DgpConfig(p_u=args.p_u), child(args.seed, FROZEN))
    write_population_csv(pop, out / "population.csv")
    with (out / "frozen.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "beta", "cluster_effect", "eps", "u"])
        for i in range(pop.size):
            w.writerow([i] + [format(float(v), ".17g") for v in
                              (frozen.beta[i], frozen.c_unit[i], frozen.eps[i], frozen.u[i])])
    print(f"wrote {pop.size} units in {pop.num_clusters} clusters to {out}")
    return 0


def _load_run_config(path: Path):
    """Flat config dict from a TOML file or from a previous run's manifest."""
    if path.suffix == ".json":
        with path.open(encoding="utf-8") as fh:
            manifest = json.load(fh)
        if "config" not in manifest:
            raise ConfigError(f"{path} is not a run manifest (no 'config' entry)")
        return dict(manifest["config"])
    return load_config(path)


def _write_manifest(path: Path, manifest: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def cmd_run(args) -> int:
    cfg_path = Path(args.config)
    try:
        flat = _load_run_config(cfg_path)
        if args.seed is not None:
            flat["experiment.seed"] = args.seed
        scenarios = expand_grid(flat)
        swept = sorted(k for k in flat if len(scenarios) > 1 and
                       len({json.dumps(s[k]) for s in scenarios}) > 1)
        experiments = [(scenario_label(s, swept), build_experiment(s)) for s in scenarios]
    except (ConfigError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if args.dry_run:
        print(f"config OK: {len(experiments)} scenario(s)")
        for label, _ in experiments:
            print(f"  {label}")
        return 0

    out = Path(args.out or os.environ.get(OUT_ENV) or "results")
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "fpspatial",
        "version": __version__,
        "config_path": str(cfg_path),
        "config": flat,
        "master_seed": flat.get("experiment.seed", 0),
        "output_dir": str(out),
        "scenarios": [label for label, _ in experiments],
        "status": "running",
        "failures": [],
        "runtime_seconds": None,
    }
    mpath = out / MANIFEST
    _write_manifest(mpath, manifest)
    start = time.perf_counter()
    results = []
    for label, exp in experiments:
        log.info("scenario %s: %d replications", label, exp.replications)
        try:
            res = run_experiment(exp, threads=args.threads)
        except Exception as err:  # recorded in the manifest, run continues
            log.exception("scenario %s failed", label)
            manifest["failures"].append({"scenario": label, "error": f"{type(err).__name__}: {err}"})
            continue
        manifest.setdefault("truth", {})[label] = res.truth
        failed = sum(s != "ok" for s in res.status)
        if failed:
            manifest.setdefault("soft_failures", {})[label] = failed
        results.append((label, res))
    manifest["runtime_seconds"] = round(time.perf_counter() - start, 3)
    if manifest["failures"]:
        manifest["status"] = "failed"
        for name in (REPLICATIONS, SUMMARY):
            (out / name).unlink(missing_ok=True)
        _write_manifest(mpath, manifest)
        print(f"error: {len(manifest['failures'])} scenario(s) failed; see {mpath}",
              file=sys.stderr)
        return 1
    try:
        write_replications_csv(out / REPLICATIONS, results)
        write_summary_csv(out / SUMMARY, [(label, summarize(res)) for label, res in results])
    except OSError:
        for name in (REPLICATIONS, SUMMARY):
            (out / name).unlink(missing_ok=True)
        raise
    manifest["status"] = "complete"
    _write_manifest(mpath, manifest)
    print(f"wrote {len(results)} scenario(s) to {out}")
    return 0


def cmd_check(args) -> int:
    results = run_checks()
    for r in results:
        tag = "PASS" if r.passed else "FAIL"
        print(f"{tag}  {r.name}  (error={r.error:.3g}, tol={r.tolerance:.0e})")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpspatial", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-population", help="draw locations, clusters and frozen components")
    g.add_argument("--m", type=_positive_int, required=True, help="population size")
    g.add_argument("--cluster-size", type=_positive_int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--order", choices=("x", "draw"), default="x",
                   help="unit index order: by first coordinate or draw order")
    g.add_argument("--p-u", type=float, default=0.3, help="SAR parameter of the frozen errors")
    g.add_argument("--out", default=".", help="output directory")
    g.set_defaults(func=cmd_generate_population)

    r = sub.add_parser("run", help="run the experiment grid described by a config")
    r.add_argument("--config", required=True, help="TOML config or a previous manifest.json")
    r.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./results)")
    r.add_argument("--seed", type=int, default=None, help="override experiment.seed")
    r.add_argument("--threads", type=_positive_int, default=1)
    r.add_argument("--dry-run", action="store_true", help="validate and list scenarios only")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="run the built-in exactness self-tests")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
