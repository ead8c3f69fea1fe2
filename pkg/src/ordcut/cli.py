"""Command line front end: ``ordcut solve | verify | bench``.

Exit codes are fixed for scripting: 0 ok, 1 audit failure, 2 bad input,
3 solver failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchmarkCase, CaseError, case_names, get_case, load_case, run_case, solve_case
from .expr import ParseError
from .fnspaces import GridError, PiecewiseFn, SingularMask
from .hausdorff import IntervalFn
from .solver import SolverConfig, band_audit, truncation_allowance

EXIT_OK, EXIT_AUDIT, EXIT_INPUT, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3, 4
MAX_LEVELS = 30
MAX_RESOLUTION = 1025

log = logging.getLogger("ordcut")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    problem: str | None = None
    resolution: tuple[int, ...] | None = None
    eps0: float | None = None
    levels: int | None = None
    samples_per_axis: int = 5
    radius_cap: float | None = None
    retry_budget: int = 6
    allow_factor: float = 10.0
    out: str | None = None
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.resolution is not None:
            for r in self.resolution:
                if not 3 <= r <= MAX_RESOLUTION:
                    raise ConfigError(f"grid resolution {r} outside [3, {MAX_RESOLUTION}]")
        if self.eps0 is not None and not (math.isfinite(self.eps0) and self.eps0 > 0):
            raise ConfigError("eps0 must be positive")
        if self.levels is not None and not 1 <= self.levels <= MAX_LEVELS:
            raise ConfigError(f"levels must lie in [1, {MAX_LEVELS}]")
        if self.samples_per_axis < 1 or self.retry_budget < 1 or self.jobs < 1:
            raise ConfigError("samples, retry budget and jobs must be positive")
        if self.radius_cap is not None and not self.radius_cap > 0:
            raise ConfigError("radius cap must be positive")
        if not self.allow_factor > 0:
            raise ConfigError("truncation allowance factor must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def solver_config(self, case: BenchmarkCase) -> SolverConfig:
        return case.config(
            samples_per_axis=self.samples_per_axis,
            radius_cap=self.radius_cap,
            retry_budget=self.retry_budget,
            allow_factor=self.allow_factor,
            seed=self.seed,
        )


def _parse_resolution(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    parts = text.replace("x", ",").split(",")
    try:
        return tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise ConfigError(f"bad grid resolution {text!r}") from None


def load_problem(problem: str | None) -> BenchmarkCase:
    """A builtin case name or a path to a case file."""
    if problem is None:
        raise ConfigError("--problem is required")
    if problem in case_names():
        return get_case(problem)
    text = Path(problem).read_text()
    return load_case(text, Path(problem).stem)


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")


def plot_script(case_name: str, files: list[str], ndim: int) -> str:
    lines = [
        f"# gnuplot script for {case_name}; run from the output directory",
        'set datafile separator ","',
        'set datafile missing "NaN"',
        "set key autotitle columnhead",
    ]
    if ndim == 1:
        lines.append("set xlabel 'x0'")
        plots = [f"'{p}' using 1:2 with lines" for p in files]
        lines.append("plot " + ", \\\n     ".join(plots))
    else:
        lines.append("set xlabel 'x0'\nset ylabel 'x1'")
        for p in files:
            lines.append(f"splot '{p}' using 1:2:3 with points pointtype 7 pointsize 0.3")
            lines.append("pause -1")
    return "\n".join(lines) + "\n"


def cmd_solve(cfg: RunConfig) -> int:
    case = load_problem(cfg.problem)
    out = Path(cfg.out or "ordcut-out")
    report, cut = solve_case(case, cfg.resolution, cfg.eps0, cfg.levels, cfg.solver_config(case), doubling=False)
    report["meta"] = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), "version": __version__}
    try:
        (out / "levels").mkdir(parents=True, exist_ok=True)
        files = []
        if cut is not None:
            counts = {"sub": 0, "super": 0}
            for lv in cut.levels:
                k = counts[lv.side]
                counts[lv.side] += 1
                stem = f"{lv.side}_{k}"
                meta = dict(lv.fn.meta, level=k)
                fn = PiecewiseFn(lv.fn.grid, lv.fn.values, lv.fn.mask, lv.fn.smoothness, meta)
                (out / "levels" / f"{stem}.csv").write_text(fn.to_csv())
                _dump(out / "levels" / f"{stem}.json", fn.to_json())
                files.append(f"levels/{stem}.csv")
            data = cut.to_json()
            data.update(case=case.name, equation=report["equation"])
            _dump(out / "cut.json", data)
        _dump(out / "report.json", report)
        (out / "plot.gp").write_text(plot_script(case.name, files, case.op.dimension))
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    if cut is None or not cut.complete:
        print(f"solver failure: {report['error'] or '; '.join(report.get('failures', []))}", file=sys.stderr)
        return EXIT_SOLVER
    print(f"{case.name}: {len(cut.levels)} levels, image_defect={cut.image_defect:.6g}, written to {out}")
    return EXIT_OK


def load_candidate(data: dict) -> PiecewiseFn:
    """A PiecewiseFn document, or an IntervalFn whose degenerate nodes are audited."""
    if not isinstance(data, dict):
        raise ValueError("candidate must be a JSON object")
    if "cells" in data:
        f = IntervalFn.from_json(data)
        real = f.degenerate & np.isfinite(f.lo)
        return PiecewiseFn(f.grid, np.where(real, f.lo, np.nan), SingularMask(~real))
    return PiecewiseFn.from_json(data)


def cmd_verify(cfg: RunConfig, candidate: str, eps: float | None = None, side: str | None = None) -> int:
    case = load_problem(cfg.problem)
    try:
        data = json.loads(Path(candidate).read_text())
    except OSError as exc:
        print(f"error: cannot read candidate: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: candidate is not JSON: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        u = load_candidate(data)
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: candidate schema mismatch: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if u.grid.ndim != case.op.dimension:
        print(f"error: candidate is {u.grid.ndim}-dimensional, operator is {case.op.dimension}-dimensional",
              file=sys.stderr)
        return EXIT_INPUT
    if u.smoothness < case.op.order:
        # verification differences the samples; the declared smoothness is advisory
        log.warning("candidate declares smoothness %d below operator order %d; auditing its samples",
                    u.smoothness, case.op.order)
        u = PiecewiseFn(u.grid, u.values, u.mask, case.op.order, u.meta)
    eps = eps if eps is not None else u.meta.get("epsilon")
    if eps is None:
        eps = (cfg.eps0 or case.eps0) / 2 ** (cfg.levels or case.levels)
    side = side or u.meta.get("side", "both")
    allowance = truncation_allowance(u.grid, case.rhs, cfg.solver_config(case))
    audit = band_audit(case.op, case.rhs, u, eps, side, allowance)
    ok_dense, witness = u.mask.nowhere_dense()
    result = {
        "case": case.name,
        "epsilon": eps,
        "side": side,
        "allowance": allowance,
        **audit,
        "gamma": {"count": u.mask.count, "fraction": u.mask.fraction, "nowhere_dense": ok_dense, "witness": witness},
    }
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK if audit["pass_fraction"] == 1.0 else EXIT_AUDIT


def _bench_one(args) -> dict:
    name, cfg = args
    case = get_case(name)
    return run_case(case, cfg.resolution, cfg.eps0, cfg.levels, cfg.solver_config(case))


def bench_reports(names: list[str], cfg: RunConfig) -> list[dict]:
    """Reports in the order of ``names``, independent of ``jobs``."""
    work = [(n, cfg) for n in names]
    if cfg.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(work))) as pool:
            return list(pool.map(_bench_one, work))
    return [_bench_one(w) for w in work]


def cmd_bench(cfg: RunConfig, filters: list[str]) -> int:
    names = case_names()
    if filters:
        unknown = [f for f in filters if f not in names]
        if unknown:
            print(f"error: unknown case(s) {', '.join(unknown)}; available: {', '.join(names)}", file=sys.stderr)
            return EXIT_INPUT
        names = [n for n in names if n in filters]
    start = time.perf_counter()
    reports = bench_reports(names, cfg)
    elapsed = time.perf_counter() - start
    for r in reports:
        failed = [k for k, v in r["checks"].items() if not v]
        status = "PASS" if r["passed"] else "FAIL"
        extra = f" ({r['error']})" if r["error"] else (f" failed: {', '.join(failed)}" if failed else "")
        print(f"{status} {r['case']}{extra}")
    suite = {"cases": reports, "passed": all(r["passed"] for r in reports)}
    if cfg.out:
        try:
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            _dump(out / "bench.json", suite)
            _dump(out / "bench_meta.json", {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
                                            "elapsed_s": elapsed, "version": __version__})
        except OSError as exc:
            print(f"error: cannot write output: {exc}", file=sys.stderr)
            return EXIT_IO
    if suite["passed"]:
        return EXIT_OK
    return EXIT_SOLVER if any(r["status"] == "solver_error" for r in reports) else EXIT_AUDIT


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", help="builtin case name or case file")
    common.add_argument("--grid", help="resolution per axis, e.g. 257 or 129,129")
    common.add_argument("--eps0", type=float)
    common.add_argument("--levels", type=int, help="refinement levels K")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="audit sample jitter seed")
    common.add_argument("--allow", type=float, default=10.0, help="truncation allowance factor")
    common.add_argument("--samples", type=int, default=5, help="samples per axis in a patch check")
    common.add_argument("--radius-cap", type=float)
    common.add_argument("--retries", type=int, default=6, help="seed retry budget per node")
    common.add_argument("--jobs", type=int, default=None, help="parallel cases (default $ORDCUT_JOBS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="ordcut", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"ordcut {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve a problem and write the artifact bundle")
    v = sub.add_parser("verify", parents=[common], help="audit a candidate function against a problem")
    v.add_argument("--candidate", required=True)
    v.add_argument("--eps", type=float)
    v.add_argument("--side", choices=["sub", "super", "both"])
    b = sub.add_parser("bench", parents=[common], help="run the builtin benchmark suite")
    b.add_argument("cases", nargs="*", help="case names to run (default all)")
    return ap


def _run_config(ns) -> RunConfig:
    jobs = ns.jobs
    if jobs is None:
        env = os.environ.get("ORDCUT_JOBS")
        try:
            jobs = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"ORDCUT_JOBS={env!r} is not an integer") from None
    return RunConfig(
        problem=ns.problem,
        resolution=_parse_resolution(ns.grid),
        eps0=ns.eps0,
        levels=ns.levels,
        samples_per_axis=ns.samples,
        radius_cap=ns.radius_cap,
        retry_budget=ns.retries,
        allow_factor=ns.allow,
        out=ns.out,
        seed=ns.seed,
        jobs=jobs,
    )


def main(argv=None) -> int:
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _run_config(ns)
        if ns.command == "solve":
            return cmd_solve(cfg)
        if ns.command == "verify":
            return cmd_verify(cfg, ns.candidate, ns.eps, ns.side)
        filters = list(ns.cases) + ([ns.problem] if ns.problem else [])
        return cmd_bench(cfg, filters)
    except (ParseError, CaseError, ConfigError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
