"""Problem definitions: forward SDE, quadratic driver, terminal condition.

Each piece bundles its callables with the declared growth/Lipschitz
constants the solver relies on.  Callables are vectorized over a leading
sample axis: drift maps (t, x[m,d]) -> [m,d], diffusion maps t -> [d,d],
the driver maps (t, x[m,d], y[m], z[m,d]) -> [m], terminals map
x[m,d] -> [m].  All types are immutable after construction and safe for
concurrent read-only use.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "SdeModel",
    "QuadraticDriver",
    "TruncatedDriver",
    "TerminalCondition",
    "ZBoundParams",
    "SchemeRates",
    "ProblemSpec",
    "truncate_driver",
    "projection_radius",
    "project_z",
    "mollify_terminal",
    "MollifiedTerminal",
    "uniform_z_bound",
    "select_scheme_parameters",
    "load_problem",
    "check_declared_constants",
]


@dataclass(frozen=True)
class SdeModel:
    """Forward SDE dX = b(t, X) dt + sigma(t) dW with declared constants."""

    dim: int
    drift: Callable
    diffusion: Callable
    x0: np.ndarray
    drift_growth: float        # |b(t,x)| <= drift_growth * (1 + |x|)
    drift_lipschitz: float
    diffusion_bound: float     # |sigma(t)| <= diffusion_bound
    diffusion_lipschitz: float
    inv_diffusion_bound: Optional[float] = None
    drift_bounded: bool = False

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", x0)
        x0.setflags(write=False)
        if x0.shape != (self.dim,):
            raise ValueError(f"x0 shape {x0.shape} does not match dim={self.dim}")


@dataclass(frozen=True)
class QuadraticDriver:
    """Driver |f| <= growth*(1+|y|+|z|^2), locally Lipschitz in z.

    The z-increment bound is (lipschitz_z + quad_lipschitz_z*(|z|+|z'|))*|z-z'|.
    ``time_holder`` is the optional 1/2-Hoelder-in-time constant;
    ``subquadratic_exp`` marks drivers whose z-increment uses |z|**beta.
    """

    f: Callable
    growth: float
    lipschitz_x: float
    lipschitz_y: float
    lipschitz_z: float
    quad_lipschitz_z: float
    time_holder: Optional[float] = None
    subquadratic_exp: Optional[float] = None


@dataclass(frozen=True)
class TruncatedDriver(QuadraticDriver):
    """Driver with the z argument dropped after the switch time T - eps.

    Keeps the same declared constants as the driver it wraps.
    """

    horizon: float = 0.0
    switch_eps: float = 0.0

    @property
    def switch_time(self) -> float:
        return self.horizon - self.switch_eps


@dataclass(frozen=True)
class TerminalCondition:
    """Bounded terminal payoff with a declared regularity tag.

    kind is one of "lipschitz" (with ``lipschitz``), "holder" (with
    ``holder_exp``) or "semicontinuous".  ``kinks`` lists the non-smooth
    points of g (1d), used by quadrature oracles to split panels.
    """

    g: Callable
    bound: float
    kind: str = "lipschitz"
    lipschitz: Optional[float] = None
    holder_exp: Optional[float] = None
    kinks: tuple = ()

    def __post_init__(self):
        if self.kind not in ("lipschitz", "holder", "semicontinuous"):
            raise ValueError(f"unknown terminal kind {self.kind!r}")
        if self.kind == "lipschitz" and self.lipschitz is None:
            raise ValueError("lipschitz terminal needs its constant")
        if self.kind == "holder" and not (self.holder_exp and 0 < self.holder_exp <= 1):
            raise ValueError("holder terminal needs holder_exp in (0, 1]")


@dataclass(frozen=True)
class ZBoundParams:
    """Constants of the time-dependent Z envelope.

    The projection ball at time s has radius flat + singular/sqrt(T - s);
    the backward sweep additionally caps |Z| at cap_scale*(N+1) when
    ``cap_scale`` is set, or at the uniform bound computed from the
    mollified terminal's Lipschitz constant otherwise.
    """

    flat: float
    singular: float
    cap_scale: Optional[float] = None

    def __post_init__(self):
        for name in ("flat", "singular"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.cap_scale is not None and not (np.isfinite(self.cap_scale) and self.cap_scale >= 0):
            raise ValueError("cap_scale must be finite and nonnegative")


class SchemeRates(NamedTuple):
    """Exponent choices (a, b) with the rate constant K and the predicted rate."""

    a: float
    b: float
    K: float
    rate: float


@dataclass(frozen=True)
class ProblemSpec:
    """A complete solvable problem: forward model, driver, terminal, horizon."""

    model: SdeModel
    driver: QuadraticDriver
    terminal: TerminalCondition
    horizon: float
    name: str = ""
    extras: dict = field(default_factory=dict)


def truncate_driver(driver: QuadraticDriver, horizon: float, eps: float) -> TruncatedDriver:
    """Return the driver with z forced to 0 for times s > T - eps.

    Values for s <= T - eps are the original driver's, bit for bit; the
    declared constants carry over unchanged.
    """
    if not (0.0 < eps < horizon):
        raise ValueError(f"need 0 < eps < T, got eps={eps}, T={horizon}")
    switch = horizon - eps
    base_f = driver.f

    def f_eps(t, x, y, z):
        if t <= switch:
            return base_f(t, x, y, z)
        return base_f(t, x, y, np.zeros_like(z))

    return TruncatedDriver(
        f=f_eps,
        growth=driver.growth,
        lipschitz_x=driver.lipschitz_x,
        lipschitz_y=driver.lipschitz_y,
        lipschitz_z=driver.lipschitz_z,
        quad_lipschitz_z=driver.quad_lipschitz_z,
        time_holder=driver.time_holder,
        subquadratic_exp=driver.subquadratic_exp,
        horizon=horizon,
        switch_eps=eps,
    )


def projection_radius(s: float, horizon: float, zp: ZBoundParams) -> float:
    """Radius flat + singular/sqrt(T - s) of the projection ball; +inf at s = T."""
    if not (0.0 <= s <= horizon):
        raise ValueError(f"need 0 <= s <= T, got s={s}, T={horizon}")
    if s == horizon:
        return math.inf
    return zp.flat + zp.singular / math.sqrt(horizon - s)


def project_z(z: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of row vectors onto the ball of the given radius.

    Idempotent and 1-Lipschitz; the identity when radius is +inf.
    """
    if radius < 0:
        raise ValueError(f"need radius >= 0, got {radius}")
    z = np.asarray(z, dtype=float)
    if not np.isfinite(radius):
        return z.copy()
    single = z.ndim == 1
    zz = np.atleast_2d(z)
    norms = np.sqrt(np.sum(zz * zz, axis=1))
    scale = np.ones_like(norms)
    mask = norms > radius
    if mask.any():
        scale[mask] = radius / norms[mask]
    out = zz * scale[:, None]
    return out[0] if single else out


def uniform_z_bound(
    model: SdeModel, driver: QuadraticDriver, terminal_lipschitz: float, horizon: float
) -> float:
    """Uniform |Z| bound for a Lipschitz terminal:
    exp((2*K_b + K_fy)*T) * M_sigma * (K_g + T*K_fx)."""
    if terminal_lipschitz < 0:
        raise ValueError("terminal Lipschitz constant must be nonnegative")
    rate = 2.0 * model.drift_lipschitz + driver.lipschitz_y
    return math.exp(rate * horizon) * model.diffusion_bound * (
        terminal_lipschitz + horizon * driver.lipschitz_x
    )


def select_scheme_parameters(
    alpha: float,
    quad_lipschitz_z: float,
    z_singular: float,
    eta: float,
    subquadratic: bool = False,
) -> SchemeRates:
    """Exponents (a, b) and predicted rate for an alpha-Hoelder terminal.

    K = 4*(1+eta)*L_fz^2*M_z2^2 unless ``subquadratic`` forces the K -> 0
    limit (admissible for drivers of strictly sub-quadratic growth, where
    the predicted rate becomes alpha itself).
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"need alpha in (0, 1), got {alpha}")
    if eta <= 0:
        raise ValueError(f"need eta > 0, got {eta}")
    K = 0.0 if subquadratic else 4.0 * (1.0 + eta) * quad_lipschitz_z**2 * z_singular**2
    denom = (2.0 - alpha) * (2.0 + K) - 2.0 + 2.0 * alpha
    b = (1.0 - alpha) / denom
    a = (1.0 + 2.0 * b) / (2.0 + K)
    rate = 2.0 * alpha / denom
    return SchemeRates(a=a, b=b, K=K, rate=rate)


# ---------------------------------------------------------------------------
# Terminal mollification
# ---------------------------------------------------------------------------


class MollifiedTerminal:
    """Lipschitz lower envelope g_N(x) = inf_u { g(u) + N|x - u| }.

    Evaluated by multi-scale grid minimization restricted to the ball
    |u - x| <= 2*bound/N (a minimizer of the envelope always lies there for
    |g| <= bound), intersected with the declared domain box.  When g is
    declared K_g-Lipschitz with K_g <= N the envelope equals g and the
    search is skipped.
    """

    def __init__(self, terminal, lip, lo, hi, resolution, refine_rounds, passthrough):
        self.base = terminal
        self.lip = float(lip)
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        self.resolution = int(resolution)
        self.refine_rounds = int(refine_rounds)
        self.passthrough = bool(passthrough)
        self.boundary_hits = 0
        self.bound = terminal.bound
        self.kinks = terminal.kinks

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if self.passthrough:
            return self.base.g(x)
        if x.shape[1] == 1:
            return self._eval_1d(x[:, 0])
        return self._eval_nd(x)

    def _eval_1d(self, x: np.ndarray) -> np.ndarray:
        g = lambda u: self.base.g(u[:, None])
        lo, hi = self.lo[0], self.hi[0]
        ball = 2.0 * self.bound / self.lip
        wlo = np.clip(x - ball, lo, hi)
        whi = np.clip(x + ball, lo, hi)
        best_u = np.clip(x, lo, hi)
        best_v = g(best_u) + self.lip * np.abs(x - best_u)
        frac = np.linspace(0.0, 1.0, self.resolution)
        rows = np.arange(x.size)
        spacing = np.zeros_like(x)
        for _ in range(self.refine_rounds):
            u = wlo[:, None] + (whi - wlo)[:, None] * frac[None, :]
            v = g(u.ravel()).reshape(u.shape) + self.lip * np.abs(x[:, None] - u)
            j = np.argmin(v, axis=1)
            uj, vj = u[rows, j], v[rows, j]
            better = vj < best_v
            best_u = np.where(better, uj, best_u)
            best_v = np.where(better, vj, best_v)
            spacing = (whi - wlo) / (self.resolution - 1)
            wlo = np.clip(best_u - 2.0 * spacing, lo, hi)
            whi = np.clip(best_u + 2.0 * spacing, lo, hi)
        tol = np.maximum(spacing, 1e-15)
        at_lo = (np.abs(best_u - lo) <= tol) & (x - ball < lo)
        at_hi = (np.abs(best_u - hi) <= tol) & (x + ball > hi)
        hits = int(np.count_nonzero(at_lo | at_hi))
        if hits:
            self.boundary_hits += hits
            warnings.warn(
                f"mollified terminal: minimizer hit the domain boundary for {hits} "
                f"of {x.size} queries; enlarge the domain box",
                stacklevel=3,
            )
        return best_v

    def _eval_nd(self, x: np.ndarray) -> np.ndarray:
        # Brute-force grid over the box; adequate at desk scale (d <= 2).
        axes = [np.linspace(l, h, self.resolution) for l, h in zip(self.lo, self.hi)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, x.shape[1])
        gu = self.base.g(mesh)
        out = np.empty(x.shape[0])
        chunk = max(1, int(2e7) // mesh.shape[0])
        for start in range(0, x.shape[0], chunk):
            xs = x[start : start + chunk]
            dist = np.sqrt(((xs[:, None, :] - mesh[None, :, :]) ** 2).sum(axis=2))
            out[start : start + chunk] = (gu[None, :] + self.lip * dist).min(axis=1)
        return out


def mollify_terminal(
    terminal: TerminalCondition,
    lip: float,
    domain,
    resolution: int = 41,
    refine_rounds: int = 6,
) -> MollifiedTerminal:
    """Largest ``lip``-Lipschitz function below g, evaluated on demand.

    ``domain`` is a (lo, hi) pair (scalars or per-axis arrays).  The result
    is lip-Lipschitz and <= g pointwise; a warning is emitted when the
    minimizing u lands on the domain boundary (box too small).
    """
    if lip <= 0:
        raise ValueError(f"need N > 0, got {lip}")
    if resolution < 2:
        raise ValueError(f"need resolution >= 2, got {resolution}")
    lo, hi = domain
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("domain box is empty")
    passthrough = terminal.kind == "lipschitz" and terminal.lipschitz <= lip
    return MollifiedTerminal(terminal, lip, lo, hi, resolution, refine_rounds, passthrough)


# ---------------------------------------------------------------------------
# JSON loading and sampled constant checks
# ---------------------------------------------------------------------------


def load_problem(source) -> ProblemSpec:
    """Build a ProblemSpec from a JSON document (path, JSON string, or dict).

    The document either names a built-in problem ({"name": ..., possibly
    overrides}) or spells out model/driver/terminal blocks; see the README
    for the schema.
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        doc = json.loads(text)
    from .oracles import problem_from_config

    return problem_from_config(doc)


def check_declared_constants(
    spec: ProblemSpec, box, samples: int = 256, seed: int = 0, slack: float = 1.0 + 1e-9
) -> dict:
    """Sampled verification of the declared growth/Lipschitz constants.

    Draws points in the box (and matching y/z ranges) and checks each
    declared inequality with multiplicative ``slack``.  Callables are
    opaque, so this is evidence, not proof.
    """
    rng = np.random.default_rng(seed)
    lo, hi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in box)
    d = spec.model.dim
    x = lo + (hi - lo) * rng.random((samples, d))
    t = spec.horizon * rng.random(samples)
    y = (2.0 * rng.random(samples) - 1.0) * (spec.terminal.bound + 1.0)
    z = rng.normal(size=(samples, d)) * 3.0

    report: dict = {}
    bvals = np.stack([spec.model.drift(ti, x) for ti in t[:8]])
    report["drift_growth"] = bool(
        np.all(
            np.sqrt((bvals**2).sum(axis=-1))
            <= slack * spec.model.drift_growth * (1.0 + np.sqrt((x**2).sum(axis=1)))
        )
    )
    svals = np.stack([spec.model.diffusion(ti) for ti in t[:32]])
    report["diffusion_bound"] = bool(
        np.all(np.linalg.norm(svals, ord=2, axis=(1, 2)) <= slack * spec.model.diffusion_bound)
    )
    if spec.model.inv_diffusion_bound is not None:
        inv_norms = [np.linalg.norm(np.linalg.inv(s), ord=2) for s in svals]
        report["inv_diffusion_bound"] = bool(
            np.all(np.asarray(inv_norms) <= slack * spec.model.inv_diffusion_bound)
        )
    fv = spec.driver.f(float(t[0]), x, y, z)
    zn = np.sqrt((z**2).sum(axis=1))
    report["driver_growth"] = bool(
        np.all(np.abs(fv) <= slack * spec.driver.growth * (1.0 + np.abs(y) + zn**2))
    )
    z2 = rng.normal(size=(samples, d)) * 3.0
    f2 = spec.driver.f(float(t[0]), x, y, z2)
    dz = np.sqrt(((z - z2) ** 2).sum(axis=1))
    lipz = spec.driver.lipschitz_z + spec.driver.quad_lipschitz_z * (
        zn + np.sqrt((z2**2).sum(axis=1))
    )
    report["driver_z_lipschitz"] = bool(np.all(np.abs(fv - f2) <= slack * lipz * dz + 1e-12))
    report["terminal_bound"] = bool(
        np.all(np.abs(spec.terminal.g(x)) <= slack * spec.terminal.bound)
    )
    report["all"] = all(v for v in report.values())
    return report
