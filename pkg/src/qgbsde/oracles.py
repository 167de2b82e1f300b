"""Closed-form and quadrature-exact reference solutions.

The exponential-transform family (driver (gamma/2)|z|^2, drift-free forward
process, constant diffusion) admits Y(t,x) = (1/gamma) * log E[exp(gamma *
g(x + sigma*W_{T-t}))], evaluated here by Gaussian quadrature; it serves as
ground truth for error measurement.  The drift-free f = 0 case is the same
construction without the exponential transform.  Two hand-built examples
with degenerate diffusion probe the limits of the time-dependent Z
envelope: a 1d model whose gradient blows up before the horizon, and a 2d
model whose Z stays bounded while another partial derivative explodes.

Terminal payoffs may declare their non-smooth points (``kinks``); the
quadrature then splits the integration range there and maps each panel
through a quintic smoothstep so that Hoelder kinks at panel ends do not
degrade the Gauss-Legendre rate.  Smooth payoffs use plain Gauss-Hermite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad
from scipy.special import logsumexp

from .problem import (
    ProblemSpec,
    QuadraticDriver,
    SdeModel,
    TerminalCondition,
)

__all__ = [
    "ReferenceSolution",
    "cole_hopf_reference",
    "linear_reference",
    "zhang_gradient",
    "zhang_value_at_zero",
    "bounded_z_2d",
    "builtin_problem",
    "builtin_names",
    "problem_from_config",
    "reference_for",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ReferenceSolution:
    """Evaluators Y(t, x) and Z(t, x) with a validity note and method tag."""

    y: Callable
    z: Optional[Callable]
    domain: str = "t < T"
    method: str = "quadrature"


# ---------------------------------------------------------------------------
# Panel quadrature against a Gaussian kernel
# ---------------------------------------------------------------------------


def _gauss_legendre01(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def _smoothstep(u):
    # Quintic map [0,1]->[0,1] with vanishing first/second derivative at the
    # ends; panel-end Hoelder kinks become smooth in the mapped variable.
    val = u**3 * (10.0 - 15.0 * u + 6.0 * u**2)
    der = 30.0 * u**2 * (1.0 - u) ** 2
    return val, der


def _panel_layout(x, s, kinks, order, with_log=False):
    """Nodes/weights for integrating F(y) * N(y; x, s^2) dy, row per x.

    With ``with_log`` also returns log-weights assembled from the cheap
    per-panel and per-node factors (for log-domain summation).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m = x.size
    s = np.broadcast_to(np.asarray(s, dtype=float), x.shape)
    offs = np.array([-8.0, -4.0, -2.0, 0.0, 2.0, 4.0, 8.0])
    base = x[:, None] + s[:, None] * offs[None, :]
    if kinks is not None and len(kinks):
        kk = np.asarray(kinks, dtype=float)
        if kk.ndim == 1:
            kk = np.broadcast_to(kk[None, :], (m, kk.size))
        kk = np.clip(kk, base[:, :1], base[:, -1:])
        edges = np.sort(np.concatenate([base, kk], axis=1), axis=1)
    else:
        edges = base
    u, wu = _gauss_legendre01(order)
    sg, dsg = _smoothstep(u)
    width = np.diff(edges, axis=1)
    y = edges[:, :-1, None] + width[:, :, None] * sg[None, None, :]
    w = width[:, :, None] * dsg[None, None, :] * wu[None, None, :]
    q = y.shape[1] * y.shape[2]
    if not with_log:
        return y.reshape(m, q), w.reshape(m, q)
    with np.errstate(divide="ignore"):
        logw = np.log(width)[:, :, None] + np.log(dsg * wu)[None, None, :]
    return y.reshape(m, q), w.reshape(m, q), logw.reshape(m, q)


def _hermegauss(order: int):
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / w.sum()


def _log_gauss_density(y, x, s):
    return -0.5 * ((y - x[:, None]) / s) ** 2 - math.log(s) - _LOG_SQRT_2PI


def _terminal_callable(g):
    """Accept a TerminalCondition or a bare (m,)-vectorized callable."""
    if isinstance(g, TerminalCondition):
        return (lambda u: g.g(u[:, None])), tuple(g.kinks)
    return g, ()


# ---------------------------------------------------------------------------
# Reference solutions
# ---------------------------------------------------------------------------


def cole_hopf_reference(gamma, g, sigma, horizon, quad_order=24, fd_step=1e-4) -> ReferenceSolution:
    """Exact solution of the (gamma/2)|z|^2-driver problem with b = 0.

    Y(t,x) = (1/gamma) log E[exp(gamma*g(x + sigma*W_{T-t}))], computed in
    log-sum-exp form; Z = sigma * dY/dx by central differences with a step
    tied to the quadrature accuracy.
    """
    if gamma == 0.0:
        raise ValueError("gamma = 0 has no exponential transform; use linear_reference")
    if quad_order < 16:
        raise ValueError("need quad_order >= 16")
    g1, kinks = _terminal_callable(g)

    def y_flat(t, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        tau = horizon - t
        if tau <= 0:
            return g1(x)
        s = abs(sigma) * math.sqrt(tau)
        if kinks:
            y, _, logw = _panel_layout(x, s, kinks, quad_order, with_log=True)
            gy = g1(y.ravel()).reshape(y.shape)
            logterm = gamma * gy + _log_gauss_density(y, x, s) + logw
        else:
            xi, wh = _hermegauss(quad_order)
            y = x[:, None] + s * xi[None, :]
            gy = g1(y.ravel()).reshape(y.shape)
            logterm = gamma * gy + np.log(wh)[None, :]
        # log-sum-exp with a single row shift (overflow guard)
        peak = logterm.max(axis=1, keepdims=True)
        val = np.exp(logterm - peak).sum(axis=1)
        return (peak[:, 0] + np.log(val)) / gamma

    return _reference_from_flat(y_flat, sigma, horizon, fd_step, "closed-form")


def linear_reference(g, sigma, horizon, quad_order=24, fd_step=1e-4) -> ReferenceSolution:
    """Heat-kernel reference for the f = 0, b = 0 problem: Gaussian convolution."""
    if quad_order < 16:
        raise ValueError("need quad_order >= 16")
    g1, kinks = _terminal_callable(g)

    def y_flat(t, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        tau = horizon - t
        if tau <= 0:
            return g1(x)
        s = abs(sigma) * math.sqrt(tau)
        if kinks:
            y, w = _panel_layout(x, s, kinks, quad_order)
            gy = g1(y.ravel()).reshape(y.shape)
            dens = np.exp(_log_gauss_density(y, x, s))
            return (gy * dens * w).sum(axis=1)
        xi, wh = _hermegauss(quad_order)
        y = x[:, None] + s * xi[None, :]
        gy = g1(y.ravel()).reshape(y.shape)
        return gy @ wh

    return _reference_from_flat(y_flat, sigma, horizon, fd_step, "quadrature")


def _reference_from_flat(y_flat, sigma, horizon, fd_step, method):
    def y_eval(t, x):
        x = np.asarray(x, dtype=float)
        flat = x[:, 0] if x.ndim == 2 else x
        return y_flat(t, flat)

    def z_eval(t, x):
        x = np.asarray(x, dtype=float)
        flat = x[:, 0] if x.ndim == 2 else np.atleast_1d(x)
        tau = max(horizon - t, 0.0)
        s = abs(sigma) * math.sqrt(tau)
        step = max(1e-9, min(fd_step, s / 16.0)) if s > 0 else fd_step
        both = y_flat(t, np.concatenate([flat + step, flat - step]))
        dy = (both[: flat.size] - both[flat.size :]) / (2.0 * step)
        return (sigma * dy)[:, None]

    return ReferenceSolution(y=y_eval, z=z_eval, domain="t < T", method=method)


# ---------------------------------------------------------------------------
# Degenerate-diffusion examples
# ---------------------------------------------------------------------------


def _arctan_power(u, power):
    # odd, bounded; value at 0 set to 0 (removable by symmetry)
    u = np.asarray(u, dtype=float)
    return np.arctan(np.sign(u) * np.abs(u) ** power)


def zhang_value_at_zero(t: float) -> float:
    """u(t, 0) for the 1d blow-up model; zero by oddness (quadrature check)."""
    if t >= 1.0:
        raise ValueError("need t < 1")
    sig_t = math.sqrt((1.0 - t) ** 3 / 3.0)
    val, _ = quad(
        lambda z: _arctan_power(sig_t * z, 0.25) * math.exp(-0.5 * z * z),
        -np.inf,
        np.inf,
    )
    return val / math.sqrt(2.0 * math.pi)


def zhang_gradient(t: float) -> float:
    """grad u(t, 0) * sigma(t) for the model T=2, b=0, sigma(t)=(1-t)^+,
    g(x) = arctan(x / |x|^{3/4}).

    The noise dies at time 1, so for t < 1 the value function is a Gaussian
    smoothing with scale sigma_t^2 = (1-t)^3/3 and the gradient grows like
    (1-t)^{-1/8} as t -> 1.
    """
    if t >= 1.0:
        raise ValueError("need t < 1 (for t >= 1 the gradient is 0: no noise left)")
    sig_t = math.sqrt((1.0 - t) ** 3 / 3.0)
    integrand = lambda z: _arctan_power(sig_t * z, 0.25) * z * math.exp(-0.5 * z * z)
    val, _ = quad(integrand, 0.0, np.inf, limit=200)
    grad_u = 2.0 * val / (math.sqrt(2.0 * math.pi) * sig_t)
    return (1.0 - t) * grad_u


def bounded_z_2d(t, x, h, g_tilde, g_kinks=(0.0,), quad_order=32):
    """Partial derivatives (du/dx1, du/dx2) for the 2d model
    b(t,x) = (0, h(t)x^1), sigma = diag(1, 0), g(x) = g_tilde(x^2).

    Uses the 1d Gaussian representation with a_t = H(1) - H(t) (H a
    primitive of h, computed by quadrature) and
    sigma_t^2 = a_t^2 * t + int_t^1 (H(1)-H(s))^2 ds.
    The model's Z component is du/dx1, bounded via |a_t| against sigma_t;
    du/dx2 may still blow up as t -> 1.
    """
    if t >= 1.0:
        raise ValueError("need t < 1")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xx = np.atleast_2d(x)
    ss = np.linspace(t, 1.0, 4001)
    hv = np.asarray(h(ss), dtype=float)
    cum = cumulative_trapezoid(hv, ss, initial=0.0)
    a_s = cum[-1] - cum  # = H(1) - H(s) on [t, 1]
    a_t = float(a_s[0])
    var_tail = float(np.trapz(a_s**2, ss))
    sig2 = a_t**2 * t + var_tail
    sig_t = math.sqrt(sig2)
    mean = xx[:, 1] + a_t * xx[:, 0]
    kz = (np.asarray(g_kinks, dtype=float)[None, :] - mean[:, None]) / sig_t
    znodes, zw = _panel_layout(np.zeros(len(mean)), 1.0, kz, quad_order)
    gy = np.asarray(g_tilde((sig_t * znodes + mean[:, None]).ravel()), dtype=float)
    gy = gy.reshape(znodes.shape)
    phi = np.exp(-0.5 * znodes**2) / math.sqrt(2.0 * math.pi)
    d_mean = (gy * znodes * phi * zw).sum(axis=1) / sig_t
    du1 = a_t * d_mean
    du2 = d_mean
    if single:
        return float(du1[0]), float(du2[0])
    return du1, du2


# ---------------------------------------------------------------------------
# Built-in problems
# ---------------------------------------------------------------------------


def _const_diffusion(sigma, dim=1):
    mat = np.eye(dim) * sigma
    mat.setflags(write=False)
    return lambda t: mat


def _zero_drift(t, x):
    return np.zeros_like(x)


def _quadratic_driver(gamma):
    half = 0.5 * gamma

    def f(t, x, y, z):
        z = np.atleast_2d(z)
        return half * (z * z).sum(axis=1)

    return QuadraticDriver(
        f=f,
        growth=abs(half),
        lipschitz_x=0.0,
        lipschitz_y=0.0,
        lipschitz_z=0.0,
        quad_lipschitz_z=abs(half),
        time_holder=0.0,
    )


def _zero_driver():
    return QuadraticDriver(
        f=lambda t, x, y, z: np.zeros(np.atleast_2d(x).shape[0]),
        growth=0.0,
        lipschitz_x=0.0,
        lipschitz_y=0.0,
        lipschitz_z=0.0,
        quad_lipschitz_z=0.0,
        time_holder=0.0,
    )


def _terminal_sqrt_capped(cap=1.0):
    g = lambda x: np.minimum(np.sqrt(np.abs(np.atleast_2d(x)[:, 0])), cap)
    return TerminalCondition(
        g=g, bound=cap, kind="holder", holder_exp=0.5, kinks=(-(cap**2), 0.0, cap**2)
    )


def _terminal_abs_power(alpha, box_half=2.0):
    g = lambda x: np.abs(np.atleast_2d(x)[:, 0]) ** alpha
    return TerminalCondition(
        g=g, bound=box_half**alpha, kind="holder", holder_exp=alpha, kinks=(0.0,)
    )


def _terminal_tanh(scale=1.0):
    g = lambda x: np.tanh(scale * np.atleast_2d(x)[:, 0])
    return TerminalCondition(g=g, bound=1.0, kind="lipschitz", lipschitz=scale)


def _terminal_linear(box_bound=100.0):
    g = lambda x: np.atleast_2d(x)[:, 0].copy()
    return TerminalCondition(g=g, bound=box_bound, kind="lipschitz", lipschitz=1.0)

def _terminal_indicator():
    g = lambda x: (np.atleast_2d(x)[:, 0] > 0).astype(float)
    return TerminalCondition(g=g, bound=1.0, kind="semicontinuous", kinks=(0.0,))


def _terminal_const(value=0.0):
    g = lambda x: np.full(np.atleast_2d(x).shape[0], float(value))
    return TerminalCondition(g=g, bound=max(abs(value), 1e-12), kind="lipschitz", lipschitz=0.0)


_TERMINALS = {
    "sqrt_capped": _terminal_sqrt_capped,
    "abs_power": _terminal_abs_power,
    "tanh": _terminal_tanh,
    "linear": _terminal_linear,
    "indicator": _terminal_indicator,
    "const": _terminal_const,
}


def _brownian_model(sigma=1.0, x0=0.0):
    return SdeModel(
        dim=1,
        drift=_zero_drift,
        diffusion=_const_diffusion(sigma),
        x0=np.atleast_1d(x0),
        drift_growth=1e-12,
        drift_lipschitz=0.0,
        diffusion_bound=abs(sigma),
        diffusion_lipschitz=0.0,
        inv_diffusion_bound=1.0 / abs(sigma) if sigma else None,
        drift_bounded=True,
    )


def _ou_model(rate=1.0, sigma=1.0, x0=1.0):
    drift = lambda t, x: -rate * np.atleast_2d(x)
    return SdeModel(
        dim=1,
        drift=drift,
        diffusion=_const_diffusion(sigma),
        x0=np.atleast_1d(x0),
        drift_growth=rate,
        drift_lipschitz=rate,
        diffusion_bound=abs(sigma),
        diffusion_lipschitz=0.0,
        inv_diffusion_bound=1.0 / abs(sigma) if sigma else None,
        drift_bounded=False,
    )


def _zhang_model():
    def diffusion(t):
        mat = np.array([[max(1.0 - t, 0.0) if t < 1.0 else 0.0]])
        return mat

    return SdeModel(
        dim=1,
        drift=_zero_drift,
        diffusion=diffusion,
        x0=np.zeros(1),
        drift_growth=1e-12,
        drift_lipschitz=0.0,
        diffusion_bound=1.0,
        diffusion_lipschitz=1.0,
        inv_diffusion_bound=None,
        drift_bounded=True,
    )


def _bounded2d_h(s):
    s = np.asarray(s, dtype=float)
    return np.where(s < 1.0, 1.0 - s, 0.0)


def _bounded2d_gtilde(u):
    return _arctan_power(u, 0.5)


def _bounded2d_model():
    def drift(t, x):
        x = np.atleast_2d(x)
        out = np.zeros_like(x)
        out[:, 1] = float(_bounded2d_h(t)) * x[:, 0]
        return out

    sig = np.array([[1.0, 0.0], [0.0, 0.0]])

    def diffusion(t):
        return sig

    return SdeModel(
        dim=2,
        drift=drift,
        diffusion=diffusion,
        x0=np.zeros(2),
        drift_growth=1.0,
        drift_lipschitz=1.0,
        diffusion_bound=1.0,
        diffusion_lipschitz=0.0,
        inv_diffusion_bound=None,
        drift_bounded=False,
    )


def _build_cole_hopf(gamma=1.0, sigma=1.0, horizon=1.0, x0=0.0, terminal=None, name=""):
    terminal = terminal or _terminal_sqrt_capped()
    spec = ProblemSpec(
        model=_brownian_model(sigma, x0),
        driver=_quadratic_driver(gamma),
        terminal=terminal,
        horizon=horizon,
        name=name,
        extras={
            "reference": lambda quad_order=24: cole_hopf_reference(
                gamma, terminal, sigma, horizon, quad_order
            ),
            "nabla_b": lambda t, x: np.zeros((1, 1)),
        },
    )
    return spec


def _build_linear_brownian(sigma=1.0, horizon=1.0, x0=0.0, name="linear-brownian"):
    terminal = _terminal_linear()
    exact = ReferenceSolution(
        y=lambda t, x: np.atleast_2d(x)[:, 0].copy(),
        z=lambda t, x: np.full((np.atleast_2d(x).shape[0], 1), float(sigma)),
        domain="all t",
        method="closed-form",
    )
    return ProblemSpec(
        model=_brownian_model(sigma, x0),
        driver=_zero_driver(),
        terminal=terminal,
        horizon=horizon,
        name=name,
        extras={"reference": lambda quad_order=24: exact,
                "nabla_b": lambda t, x: np.zeros((1, 1))},
    )


def _build_ou(horizon=1.0, name="ou-tanh"):
    return ProblemSpec(
        model=_ou_model(),
        driver=_zero_driver(),
        terminal=_terminal_tanh(),
        horizon=horizon,
        name=name,
        extras={"nabla_b": lambda t, x: np.array([[-1.0]])},
    )


def _build_zhang(name="zhang"):
    g = lambda x: _arctan_power(np.atleast_2d(x)[:, 0], 0.25)
    terminal = TerminalCondition(
        g=g, bound=math.pi / 2, kind="holder", holder_exp=0.25, kinks=(0.0,)
    )
    return ProblemSpec(
        model=_zhang_model(),
        driver=_zero_driver(),
        terminal=terminal,
        horizon=2.0,
        name=name,
        extras={"counterexample": "zhang", "nabla_b": lambda t, x: np.zeros((1, 1))},
    )


def _build_bounded2d(name="bounded-2d"):
    g = lambda x: _bounded2d_gtilde(np.atleast_2d(x)[:, 1])
    terminal = TerminalCondition(
        g=g, bound=math.pi / 2, kind="semicontinuous", kinks=(0.0,)
    )

    def nabla_b(t, x):
        return np.array([[0.0, 0.0], [float(_bounded2d_h(t)), 0.0]])

    return ProblemSpec(
        model=_bounded2d_model(),
        driver=_zero_driver(),
        terminal=terminal,
        horizon=2.0,
        name=name,
        extras={
            "counterexample": "bounded2d",
            "h": _bounded2d_h,
            "g_tilde": _bounded2d_gtilde,
            "nabla_b": nabla_b,
            "factor_A": lambda t, x: np.zeros_like(np.atleast_2d(x)),
            "factor_B": lambda t: np.zeros(2),
        },
    )


_BUILTINS = {
    "cole-hopf-sqrt": lambda **kw: _build_cole_hopf(name="cole-hopf-sqrt", **kw),
    "cole-hopf-tanh": lambda **kw: _build_cole_hopf(
        terminal=_terminal_tanh(), name="cole-hopf-tanh", **kw
    ),
    "linear-brownian": lambda **kw: _build_linear_brownian(**kw),
    "ou-tanh": lambda **kw: _build_ou(**kw),
    "zhang": lambda **kw: _build_zhang(**kw),
    "bounded-2d": lambda **kw: _build_bounded2d(**kw),
}


def builtin_names():
    return sorted(_BUILTINS)


def builtin_problem(name: str, **overrides) -> ProblemSpec:
    if name not in _BUILTINS:
        raise KeyError(f"unknown problem {name!r}; built-ins: {', '.join(builtin_names())}")
    return _BUILTINS[name](**overrides)


def reference_for(spec: ProblemSpec, quad_order: int = 24) -> Optional[ReferenceSolution]:
    factory = spec.extras.get("reference")
    return factory(quad_order=quad_order) if factory else None


def problem_from_config(doc: dict) -> ProblemSpec:
    """Build a ProblemSpec from a parsed JSON document.

    Either {"name": <built-in>, ...numeric overrides...} or an inline
    document with "T", "model", "driver" and "terminal" blocks (see README).
    """
    if "name" in doc:
        over = {k: v for k, v in doc.items() if k != "name"}
        if "terminal" in over:
            over["terminal"] = _terminal_from_config(over["terminal"])
        if "T" in over:
            over["horizon"] = over.pop("T")
        return builtin_problem(doc["name"], **over)
    horizon = float(doc["T"])
    mcfg = doc.get("model", {"kind": "brownian"})
    kind = mcfg.get("kind", "brownian")
    margs = {k: v for k, v in mcfg.items() if k != "kind"}
    if kind == "brownian":
        model = _brownian_model(**margs)
    elif kind == "ou":
        model = _ou_model(**margs)
    else:
        raise KeyError(f"unknown model kind {kind!r}")
    dcfg = doc.get("driver", {"kind": "zero"})
    if dcfg.get("kind") == "quadratic":
        driver = _quadratic_driver(float(dcfg.get("gamma", 1.0)))
    elif dcfg.get("kind") == "zero":
        driver = _zero_driver()
    else:
        raise KeyError(f"unknown driver kind {dcfg.get('kind')!r}")
    terminal = _terminal_from_config(doc.get("terminal", {"kind": "tanh"}))
    name = doc.get("label", "inline")
    extras = {}
    if dcfg.get("kind") == "quadratic" and kind == "brownian":
        gamma = float(dcfg.get("gamma", 1.0))
        sigma = float(margs.get("sigma", 1.0))
        extras["reference"] = lambda quad_order=24: cole_hopf_reference(
            gamma, terminal, sigma, horizon, quad_order
        )
    if dcfg.get("kind") == "zero" and kind == "brownian":
        sigma = float(margs.get("sigma", 1.0))
        extras["reference"] = lambda quad_order=24: linear_reference(
            terminal, sigma, horizon, quad_order
        )
    return ProblemSpec(model=model, driver=driver, terminal=terminal,
                       horizon=horizon, name=name, extras=extras)


def _terminal_from_config(cfg) -> TerminalCondition:
    if isinstance(cfg, TerminalCondition):
        return cfg
    kind = cfg.get("kind")
    if kind not in _TERMINALS:
        raise KeyError(f"unknown terminal kind {kind!r}; known: {', '.join(sorted(_TERMINALS))}")
    args = {k: v for k, v in cfg.items() if k != "kind"}
    return _TERMINALS[kind](**args)
