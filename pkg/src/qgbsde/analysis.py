"""Computable surrogates of the theoretical objects around the solver:
time-dependent Z-envelope checks, an empirical BMO-type norm, the path
regularity statistic, and the structural drift/diffusion assumption
checker with its kernel-inclusion criteria.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .condexp import RegressionBasis, fit_conditional_expectation
from .scheme import PathEnsemble, simulate_euler
from .timegrid import TimeGrid

__all__ = [
    "ViolationReport",
    "AssumptionReport",
    "RegularityStat",
    "check_time_dependent_bound",
    "estimate_bmo_norm",
    "path_regularity_statistic",
    "check_hx1",
    "check_hx1_doubleprime",
]

_GL3_NODES = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
_GL3_WEIGHTS = np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])


@dataclass
class ViolationReport:
    """Sample points violating |Z| <= C + C'/sqrt(T - t)."""

    violations: np.ndarray  # rows (t, |Z|, bound)
    checked: int

    @property
    def holds(self) -> bool:
        return self.violations.shape[0] == 0

    def to_csv(self) -> str:
        lines = ["t,abs_z,bound"]
        for t, az, bd in self.violations:
            lines.append(f"{t!r},{az!r},{bd!r}")
        return "\n".join(lines) + "\n"


def check_time_dependent_bound(z_samples, horizon: float, c0: float, c_singular: float) -> ViolationReport:
    """List the samples (t, |Z|) with |Z| > C + C'/sqrt(T - t); all t < T."""
    arr = np.atleast_2d(np.asarray(z_samples, dtype=float))
    t, az = arr[:, 0], arr[:, 1]
    if np.any(t >= horizon):
        raise ValueError("samples must satisfy t < T")
    bound = c0 + c_singular / np.sqrt(horizon - t)
    mask = az > bound
    return ViolationReport(
        violations=np.column_stack([t[mask], az[mask], bound[mask]]),
        checked=len(t),
    )


def estimate_bmo_norm(solution, grid: TimeGrid, ensemble: PathEnsemble, basis=None) -> float:
    """Empirical BMO-type norm of the solution's Z field.

    max over grid times of the 99th percentile of the regression estimate
    of E[sum_{j>=k} |Z_j|^2 h_j | X_k], square-rooted.  The stopping-time
    supremum is restricted to deterministic grid times and the percentile
    replaces the (noise-dominated) max.
    """
    basis = basis or RegressionBasis()
    steps = grid.steps
    K = len(steps)
    paths = ensemble.paths
    contrib = np.empty((paths, K))
    for k in range(K):
        z = solution.z_at(k, ensemble.states[:, k, :])
        contrib[:, k] = (z * z).sum(axis=1) * steps[k]
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1]
    worst = 0.0
    for k in range(K):
        fitted = fit_conditional_expectation(ensemble.states[:, k, :], suffix[:, k], basis)
        est = np.quantile(fitted(ensemble.states[:, k, :]), 0.99)
        worst = max(worst, float(est))
    return math.sqrt(max(worst, 0.0))


@dataclass
class RegularityStat:
    """S = sum_i E int |Z_t - Zbar_i|^2 dt with Zbar the interval regression."""

    value: float
    max_step: float
    per_interval: np.ndarray

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "max_step": self.max_step,
            "per_interval": self.per_interval.tolist(),
        }


def path_regularity_statistic(
    z_ref: Callable,
    grid: TimeGrid,
    model,
    paths: int,
    seed: int,
    basis=None,
) -> RegularityStat:
    """Monte Carlo estimate of the L2 time-regularity of a Z field.

    Zbar_i is the regression of the per-path interval time-average of
    z_ref onto the state at t_i; the inner time integrals use 3-point
    Gauss-Legendre with linearly interpolated paths.
    """
    basis = basis or RegressionBasis()
    ens = simulate_euler(model, grid, paths, seed)
    times, steps = grid.times, grid.steps
    K = len(steps)
    d = model.dim
    per_interval = np.zeros(K)
    for k in range(K):
        h = float(steps[k])
        x_k = ens.states[:, k, :]
        x_next = ens.states[:, k + 1, :]
        z_nodes = []
        for node in _GL3_NODES:
            frac = 0.5 * (node + 1.0)
            tau = times[k] + frac * h
            z_nodes.append(np.atleast_2d(z_ref(tau, x_k + frac * (x_next - x_k))))
        z_nodes = np.stack(z_nodes)  # (3, paths, d)
        avg = (z_nodes * (_GL3_WEIGHTS / 2.0)[:, None, None]).sum(axis=0)
        zbar = np.empty_like(avg)
        for j in range(d):
            fitted = fit_conditional_expectation(x_k, avg[:, j], basis)
            zbar[:, j] = fitted(x_k)
        gap = ((z_nodes - zbar[None]) ** 2).sum(axis=2)
        per_interval[k] = float(
            ((gap * (_GL3_WEIGHTS / 2.0)[:, None]).sum(axis=0) * h).mean()
        )
    return RegularityStat(
        value=float(per_interval.sum()),
        max_step=float(steps.max()),
        per_interval=per_interval,
    )


@dataclass
class AssumptionReport:
    """Outcome of a structural drift/diffusion check."""

    holds: bool
    failing: list = field(default_factory=list)
    lam: Optional[float] = None
    criterion: str = ""

    def to_json(self) -> dict:
        return {
            "holds": self.holds,
            "criterion": self.criterion,
            "lambda": self.lam,
            "failing_count": len(self.failing),
            "failing_sample": [

                {"t": float(t), "x": np.asarray(x, dtype=float).tolist()}
                for t, x in self.failing[:10]
            ],
        }


def check_hx1(
    model,
    nabla_b: Callable,
    sample_points: Sequence,
    tol: float = 1e-9,
    eta_count: int = 500,
    seed: int = 0,
) -> AssumptionReport:
    """Kernel-inclusion check ker(sigma^T) in ker(sigma^T nabla_b^T).

    With a declared bounded inverse diffusion the check holds structurally
    with lambda = M_inv*(M_sigma*K_b + K_sigma).  Otherwise every null
    vector of sigma(t)^T (singular values below tol * largest) must be
    annihilated by sigma^T nabla_b^T at each sample point; the quadratic
    criterion sup |eta^T sigma sigma^T nabla_b^T eta| / |eta^T sigma|^2 is
    estimated on random unit vectors and reported as an empirical lambda.
    """
    if model.inv_diffusion_bound is not None:
        lam = model.inv_diffusion_bound * (
            model.diffusion_bound * model.drift_lipschitz + model.diffusion_lipschitz
        )
        return AssumptionReport(holds=True, failing=[], lam=lam, criterion="invertible")

    rng = np.random.default_rng(seed)
    d = model.dim
    failing = []
    lam_emp = 0.0
    for t, x in sample_points:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        sig = np.atleast_2d(model.diffusion(t))
        nb = np.atleast_2d(nabla_b(t, x))
        mat = sig.T @ nb.T
        u, svals, vt = np.linalg.svd(sig.T)
        smax = svals[0] if len(svals) else 0.0
        thresh = tol * max(smax, 1.0)
        null_vecs = vt[svals < thresh] if len(svals) else vt
        scale = max(np.abs(mat).max(), 1.0)
        ok = True
        for v in null_vecs:
            if np.linalg.norm(mat @ v) > tol * scale * 10:
                ok = False
                break
        if not ok:
            failing.append((t, x))
        # criterion (v): empirical quadratic-form ratio on the unit sphere
        eta = rng.normal(size=(eta_count, d))
        eta /= np.linalg.norm(eta, axis=1, keepdims=True)
        es = eta @ sig
        denom = (es * es).sum(axis=1)
        keep = denom > max(thresh, tol) ** 2
        if keep.any():
            numer = np.abs(np.einsum("ij,ij->i", es[keep] @ nb.T, eta[keep]))
            lam_emp = max(lam_emp, float((numer / denom[keep]).max()))
    return AssumptionReport(
        holds=not failing,
        failing=failing,
        lam=lam_emp,
        criterion="kernel-inclusion",
    )


def check_hx1_doubleprime(
    model,
    factor_A: Callable,
    factor_B: Callable,
    sample_points: Sequence,
    tol: float = 1e-8,
) -> AssumptionReport:
    """Factorization check b(s, sigma x) = sigma A(s, x) + B(s).

    The diffusion must be time-independent; the candidates A (state
    dependent, vector valued) and B (time only) are verified pointwise at
    the samples.  Always satisfiable in dimension one with invertible
    sigma (A = b(s, sigma x)/sigma, B = 0).
    """
    sig = np.atleast_2d(model.diffusion(0.0))
    failing = []
    worst = 0.0
    for t, x in sample_points:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lhs = np.atleast_2d(model.drift(t, (sig @ x)[None, :]))[0]
        a_val = np.atleast_2d(factor_A(t, x[None, :]))[0]
        b_val = np.atleast_1d(np.asarray(factor_B(t), dtype=float))
        resid = float(np.linalg.norm(lhs - sig @ a_val - b_val))
        worst = max(worst, resid)
        if resid > tol * max(1.0, float(np.linalg.norm(lhs))):
            failing.append((t, x))
    return AssumptionReport(
        holds=not failing,
        failing=failing,
        lam=worst,
        criterion="drift-factorization",
    )
