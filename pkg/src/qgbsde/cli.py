"""Configuration-driven experiment runner.

Subcommands: ``grid`` (print a net and its step products), ``solve`` (one
run to a JSON report), ``sweep`` (convergence study over n to CSV),
``rate`` (log-log slope fit of a study CSV), ``check-assumptions``
(structural drift/diffusion checks), ``counterexample`` (degenerate-
diffusion curves to CSV).  Report-path outputs get a companion PNG figure
unless ``--no-figures`` is passed.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import figures
from .analysis import check_hx1, check_hx1_doubleprime
from .oracles import (
    bounded_z_2d,
    builtin_names,
    builtin_problem,
    problem_from_config,
    reference_for,
    zhang_gradient,
)
from .problem import ZBoundParams, select_scheme_parameters
from .scheme import (
    EngineSpec,
    SchemeConfig,
    calibrate_projection,
    discretization_error,
    solve,
)
from .timegrid import build_grid, build_reduced_grid, dump_times, lemma_product_singular, lemma_product_uniform, max_step

__all__ = ["main", "StudyConfig", "run_convergence_study", "fit_rate", "CSV_HEADER"]

CSV_HEADER = [
    "n", "N", "eps", "a", "b", "K",
    "e_total", "e_Y", "e_Z",
    "e1_q1", "e1_q2", "e2_q1", "e2_q2",
    "half_width", "seed", "runtime_s", "error",
]


class StudyError(RuntimeError):
    pass


@dataclass
class StudyConfig:
    """One convergence study: a problem, an n-sweep, and solver knobs."""

    problem: object
    n_list: list
    paths: int
    alpha: Optional[float] = None
    eta: float = 0.1
    subquadratic: bool = False
    variant: str = "full"
    tail_exponent: object = None  # float, or "auto" for c = 1 - a - 2b
    eval_paths: int = 20000
    seed: int = 0
    eval_seed: Optional[int] = None
    engine: dict = field(default_factory=dict)
    zbound: object = "auto"
    quad_order: int = 24
    pilot_paths: int = 20000

    @classmethod
    def from_json(cls, source) -> "StudyConfig":
        doc = json.loads(Path(source).read_text()) if Path(str(source)).exists() else json.loads(source)
        return cls(**doc)


def _resolve_problem(cfg_problem):
    if isinstance(cfg_problem, str):
        try:
            return builtin_problem(cfg_problem)
        except KeyError as exc:
            raise StudyError(str(exc))
    return problem_from_config(dict(cfg_problem))


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_rows(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(
                [row["error"] if col == "error" else _fmt(row.get(col, "")) for col in CSV_HEADER]
            )


def run_convergence_study(cfg: StudyConfig):
    """Solve/measure for each n; per-n failures become rows with an error
    column and the study continues.  Returns (rows, meta)."""
    if not cfg.n_list or sorted(cfg.n_list) != list(cfg.n_list):
        raise StudyError("n_list must be nonempty and strictly increasing")
    problem = _resolve_problem(cfg.problem)
    reference = reference_for(problem, quad_order=cfg.quad_order)
    if reference is None:
        raise StudyError(
            f"problem {problem.name or '<inline>'} provides no reference solution; "
            "a sweep needs one to measure the discretization error"
        )
    alpha = cfg.alpha if cfg.alpha is not None else problem.terminal.holder_exp
    if alpha is None:
        raise StudyError("config needs alpha (terminal regularity drives the exponents)")

    engine = EngineSpec.from_config(cfg.engine)
    # Pilot calibration of the projection envelope (once per study), then
    # the exponents from the envelope's singular coefficient.
    rates0 = select_scheme_parameters(alpha, problem.driver.quad_lipschitz_z, 0.0, cfg.eta, True)
    if cfg.zbound == "auto":
        pilot_cfg = SchemeConfig(
            n=8, paths=cfg.pilot_paths, seed=cfg.seed, a=rates0.a, b=rates0.b,
            engine=engine, pilot_paths=cfg.pilot_paths,
        )
        zp = calibrate_projection(problem, pilot_cfg)
    elif isinstance(cfg.zbound, ZBoundParams):
        zp = cfg.zbound
    else:
        zp = ZBoundParams(**cfg.zbound)
    rates = select_scheme_parameters(
        alpha, problem.driver.quad_lipschitz_z, zp.singular, cfg.eta, cfg.subquadratic
    )

    tail_c = cfg.tail_exponent
    if tail_c == "auto":
        tail_c = 1.0 - rates.a - 2.0 * rates.b
        if not (0.0 < tail_c <= 1.0):
            raise StudyError(f"derived tail exponent c={tail_c:.4f} is outside (0, 1]")

    eval_seed = cfg.eval_seed if cfg.eval_seed is not None else cfg.seed + 1000003
    rows = []
    for n in cfg.n_list:
        t0 = time.perf_counter()
        try:
            run_cfg = SchemeConfig(
                n=int(n), paths=cfg.paths, seed=cfg.seed,
                a=rates.a, b=rates.b,
                variant=cfg.variant, tail_exponent=tail_c,
                engine=engine, zbound=zp,
            )
            solution, _ = solve(problem, run_cfg)
            report = discretization_error(
                solution, reference, eval_paths=cfg.eval_paths, seed=eval_seed
            )
            report.meta["K"] = rates.K
            report.meta["runtime_s"] = time.perf_counter() - t0
            row = report.csv_row()
            row["error"] = ""
            row["diagnostics"] = solution.diagnostics
        except Exception as exc:  # per-n failure: record and continue
            row = {col: "" for col in CSV_HEADER}
            row.update({"n": int(n), "a": rates.a, "b": rates.b, "K": rates.K,
                        "seed": cfg.seed, "runtime_s": time.perf_counter() - t0,
                        "error": f"{type(exc).__name__}: {exc}"})
        rows.append(row)
    meta = {
        "alpha": alpha,
        "eta": cfg.eta,
        "a": rates.a,
        "b": rates.b,
        "K": rates.K,
        "theoretical_rate": rates.rate,
        "zbound": {"flat": zp.flat, "singular": zp.singular},
        "variant": cfg.variant,
        "tail_exponent": tail_c,
        "problem": problem.name,
    }
    return rows, meta


def fit_rate(csv_path):
    """Least-squares fit of log(e_total) against log(n): (slope, intercept, r2)."""
    rows = []
    with open(csv_path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row.get("error"):
                continue
            rows.append((float(row["n"]), float(row["e_total"])))
    if len(rows) < 3:
        raise StudyError(f"need at least 3 usable rows, got {len(rows)}")
    n = np.array([r[0] for r in rows])
    e = np.array([r[1] for r in rows])
    if np.any(e <= 0):
        raise StudyError("non-positive errors cannot be fit on a log scale")
    x, y = np.log(n), np.log(e)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_grid(args) -> int:
    if args.c is not None:
        grid = build_reduced_grid(args.T, args.eps, args.n, args.c, args.a)
    else:
        grid = build_grid(args.T, args.eps, args.n, args.a)
    sys.stdout.write(dump_times(grid))
    print(f"max_step = {max_step(grid)!r}")
    print(f"product_uniform(M={args.M}) = {lemma_product_uniform(grid, args.M)!r}")
    print(
        f"product_singular(M1={args.M1}, M2={args.M2}) = "
        f"{lemma_product_singular(grid, args.M1, args.M2)!r}"
    )
    return 0


def _cmd_solve(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    problem = _resolve_problem(doc.pop("problem"))
    eval_paths = doc.pop("eval_paths", 0)
    quad_order = doc.pop("quad_order", 24)
    engine = EngineSpec.from_config(doc.pop("engine", {}))
    zbound = doc.pop("zbound", "auto")
    if isinstance(zbound, dict):
        zbound = ZBoundParams(**zbound)
    t0 = time.perf_counter()
    cfg = SchemeConfig(engine=engine, zbound=zbound, **doc)
    solution, _ = solve(problem, cfg)
    report = {
        "problem": problem.name,
        "n": cfg.n,
        "eps": solution.meta["eps"],
        "N": solution.meta["lip"],
        "seed": cfg.seed,
        "y0": solution.y0(),
        "diagnostics": {k: np.asarray(v).tolist() for k, v in solution.diagnostics.items()},
    }
    reference = reference_for(problem, quad_order=quad_order)
    if eval_paths and reference is not None:
        err = discretization_error(solution, reference, eval_paths=eval_paths,
                                   seed=cfg.seed + 1000003)
        report["error"] = {"e_total": err.e_total, "e_Y": err.e_y, "e_Z": err.e_z,
                           "e1": err.e1, "e2": err.e2, "half_width": err.half_width}
    report["runtime_s"] = time.perf_counter() - t0
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_sweep(args) -> int:
    cfg = StudyConfig.from_json(args.config)
    rows, meta = run_convergence_study(cfg)
    write_rows(rows, args.out)
    meta_path = Path(args.out).with_suffix(".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    if not args.no_figures:
        fig_path = Path(args.out).with_suffix(".png")
        figures.render_sweep_figure(
            rows, fig_path, theoretical_rate=meta["theoretical_rate"],
            title=f"{meta['problem']} (predicted rate {meta['theoretical_rate']:.3f})",
        )
    failures = [r for r in rows if r.get("error")]
    print(f"wrote {args.out} ({len(rows)} rows, {len(failures)} failures)")
    return 0


def _cmd_rate(args) -> int:
    slope, intercept, r2 = fit_rate(args.csv)
    print(json.dumps({"slope": slope, "intercept": intercept, "r2": r2}, indent=2))
    return 0


def _cmd_check(args) -> int:
    problem = _resolve_problem(args.problem)
    nabla_b = problem.extras.get("nabla_b")
    if nabla_b is None:
        print(f"problem {problem.name!r} declares no drift Jacobian", file=sys.stderr)
        return 2
    rng = np.random.default_rng(args.seed)
    tmax = min(problem.horizon, 0.99 * problem.horizon)
    pts = [
        (float(t), problem.model.x0 + rng.normal(size=problem.model.dim))
        for t in np.linspace(0.0, tmax * 0.995, args.samples)
    ]
    out = {"kernel_inclusion": check_hx1(problem.model, nabla_b, pts).to_json()}
    if "factor_A" in problem.extras:
        out["drift_factorization"] = check_hx1_doubleprime(
            problem.model, problem.extras["factor_A"], problem.extras["factor_B"], pts
        ).to_json()
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_counterexample(args) -> int:
    ts = [float(v) for v in args.t.split(",")]
    rows = []
    if args.kind == "zhang":
        header = ["t", "gradient"]
        for t in ts:
            rows.append({"t": t, "gradient": zhang_gradient(t)})
    else:
        from .oracles import _bounded2d_gtilde, _bounded2d_h

        header = ["t", "du_dx1", "du_dx2"]
        for t in ts:
            d1, d2 = bounded_z_2d(t, np.zeros(2), _bounded2d_h, _bounded2d_gtilde)
            rows.append({"t": t, "du_dx1": d1, "du_dx2": d2})
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) for h in header])
    if not args.no_figures:
        figures.render_counterexample_figure(
            args.kind, rows, Path(args.out).with_suffix(".png")
        )
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qgbsde",
        description="Solver and experiment harness for quadratic-growth backward SDEs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grid", help="print a time net and its step products")
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--c", type=float, default=None, help="reduced-variant tail exponent")
    p.add_argument("--a", type=float, default=None, help="record eps = T*n**-a metadata")
    p.add_argument("--M", type=float, default=1.0)
    p.add_argument("--M1", type=float, default=0.0)
    p.add_argument("--M2", type=float, default=1.0)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("solve", help="one solve from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("sweep", help="convergence study over n")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("rate", help="fit log e_total against log n")
    p.add_argument("--csv", required=True)
    p.set_defaults(func=_cmd_rate)

    p = sub.add_parser("check-assumptions", help="structural drift/diffusion checks")
    p.add_argument("--problem", required=True)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("counterexample", help="degenerate-diffusion curves")
    p.add_argument("kind", choices=["zhang", "bounded2d"])
    p.add_argument("--t", required=True, help="comma-separated times in [0, 1)")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_counterexample)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (StudyError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
