"""Conditional-expectation engines for the backward recursion.

Two interchangeable engines drive the dynamic-programming sweep:

* ``LsmcEngine`` -- least-squares Monte Carlo on a path ensemble.  At each
  step the value field is projected onto a finite basis; conditional
  expectations of the projected field under the one-step Euler transition
  are then evaluated in closed form in dimension one (Gaussian cell
  probabilities and partial moments for the local basis, Gaussian raw
  moments for polynomials).  This removes the sampled-product noise of the
  textbook estimator while keeping the projection itself a least-squares
  fit on the ensemble.  In dimension >= 2 the sampled-product estimator is
  used instead.
* ``QuadratureEngine`` -- dynamic programming on a fixed spatial grid with
  Gauss-Hermite transition quadrature and linear interpolation; the
  small-instance oracle used to validate the regression engine.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.special import ndtr

__all__ = [
    "RegressionError",
    "RegressionBasis",
    "fit_conditional_expectation",
    "QuadratureChain",
    "build_quadrature_chain",
    "QuadratureEngine",
    "LsmcEngine",
]

_NORM_C = 1.0 / math.sqrt(2.0 * math.pi)


def _npdf(z):
    return _NORM_C * np.exp(-0.5 * z * z)


def _hermegauss_norm(order: int):
    """Probabilists' Gauss-Hermite nodes with weights normalized to sum 1."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / w.sum()


class RegressionError(RuntimeError):
    """Regression could not produce a usable conditional-expectation fit."""


@dataclass(frozen=True)
class RegressionBasis:
    """Basis specification for least-squares fits.

    family "local": piecewise constants on a hypercube partition with
    ``cells_per_axis`` cells (default ceil(paths**(1/(d+2)))).
    family "poly": global polynomials of total degree ``degree`` with
    inputs normalized to [-1, 1] on the state box.
    ``box`` fixes the state box; by default it is taken from the samples.
    """

    family: str = "local"
    degree: int = 3
    cells_per_axis: Optional[int] = None
    box: Optional[tuple] = None

    def __post_init__(self):
        if self.family not in ("local", "poly"):
            raise ValueError(f"unknown basis family {self.family!r}")


def _resolve_box(basis: RegressionBasis, x: np.ndarray):
    if basis.box is not None:
        lo = np.atleast_1d(np.asarray(basis.box[0], dtype=float))
        hi = np.atleast_1d(np.asarray(basis.box[1], dtype=float))
    else:
        lo, hi = x.min(axis=0), x.max(axis=0)
    width = hi - lo
    pad = np.where(width > 0, 0.0, 1e-8)
    return lo - pad, hi + pad


class _FittedLocal:
    """Piecewise-constant field: one value per cell, nearest cell off the box."""

    def __init__(self, inner_edges, values, global_mean, cells):
        self.inner_edges = inner_edges  # list of per-axis arrays, len cells_i - 1
        self.values = values            # flat, C-order over axes
        self.global_mean = global_mean
        self.cells = cells              # tuple of per-axis counts

    @property
    def n_funcs(self):
        return int(np.prod(self.cells))

    def cell_index(self, x):
        idx = 0
        for ax, edges in enumerate(self.inner_edges):
            k = np.searchsorted(edges, x[:, ax], side="right")
            idx = idx * self.cells[ax] + k
        return idx

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.values[self.cell_index(x)]

    def to_json(self):
        return {
            "family": "local",
            "cells": list(self.cells),
            "inner_edges": [e.tolist() for e in self.inner_edges],
            "values": self.values.tolist(),
            "global_mean": self.global_mean,
        }


class _FittedPoly:
    """Total-degree polynomial on box-normalized inputs; extends off the box."""

    def __init__(self, powers, center, halfwidth, coeffs):
        self.powers = powers        # (n_funcs, d) integer exponents
        self.center = center
        self.halfwidth = halfwidth
        self.coeffs = coeffs

    @property
    def n_funcs(self):
        return self.powers.shape[0]

    def design(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = (x - self.center) / self.halfwidth
        cols = [np.prod(t**p, axis=1) for p in self.powers]
        return np.column_stack(cols)

    def __call__(self, x):
        return self.design(x) @ self.coeffs

    def to_json(self):
        return {
            "family": "poly",
            "powers": self.powers.tolist(),
            "center": self.center.tolist(),
            "halfwidth": self.halfwidth.tolist(),
            "coeffs": self.coeffs.tolist(),
        }


def _total_degree_powers(d, degree):
    if d == 1:
        return np.arange(degree + 1)[:, None]
    powers = []
    def rec(prefix, remaining, axes_left):
        if axes_left == 1:
            for p in range(remaining + 1):
                powers.append(prefix + [p])
            return
        for p in range(remaining + 1):
            rec(prefix + [p], remaining - p, axes_left - 1)
    rec([], degree, d)
    keep = [p for p in powers if sum(p) <= degree]
    return np.asarray(keep, dtype=int)


def _fit_local(x, v, basis: RegressionBasis):
    m, d = x.shape
    cells = basis.cells_per_axis or max(1, int(np.ceil(m ** (1.0 / (d + 2)))))
    lo, hi = _resolve_box(basis, x)
    inner = [np.linspace(lo[i], hi[i], cells + 1)[1:-1] for i in range(d)]
    fitted = _FittedLocal(inner, None, None, (cells,) * d)
    idx = fitted.cell_index(x)
    n_cells = fitted.n_funcs
    counts = np.bincount(idx, minlength=n_cells)
    sums = np.bincount(idx, weights=v, minlength=n_cells)
    global_mean = float(v.mean())
    with np.errstate(invalid="ignore"):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)
    fitted.values = values
    fitted.global_mean = global_mean
    return fitted


def _fit_poly(x, v, basis: RegressionBasis):
    m, d = x.shape
    lo, hi = _resolve_box(basis, x)
    center = 0.5 * (lo + hi)
    halfwidth = np.maximum(0.5 * (hi - lo), 1e-12)
    powers = _total_degree_powers(d, basis.degree)
    fitted = _FittedPoly(powers, center, halfwidth, None)
    phi = fitted.design(x)
    gram = phi.T @ phi
    rhs = phi.T @ v
    if not (np.isfinite(gram).all() and np.isfinite(rhs).all()):
        raise RegressionError("non-finite values in the normal equations")
    try:
        coeffs = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), rhs)
    except scipy.linalg.LinAlgError:
        # Ridge floor, trace-scaled: keeps degenerate designs solvable.
        ridge = 1e-10 * np.trace(gram) / len(rhs)
        try:
            coeffs = scipy.linalg.cho_solve(
                scipy.linalg.cho_factor(gram + ridge * np.eye(len(rhs))), rhs
            )
        except scipy.linalg.LinAlgError as exc:
            raise RegressionError(f"singular normal equations after ridge floor: {exc}")
    if not np.isfinite(coeffs).all():
        raise RegressionError("non-finite regression coefficients")
    fitted.coeffs = coeffs
    return fitted


def fit_conditional_expectation(x_samples, v_samples, basis: RegressionBasis):
    """Least-squares projection of v onto the basis span at the samples.

    Returns an evaluator defined on all of R^d (polynomial extension, or
    nearest cell for the local family).  Deterministic given inputs.
    """
    x = np.asarray(x_samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    v = np.asarray(v_samples, dtype=float)
    if v.shape != (x.shape[0],):
        raise RegressionError(f"shape mismatch: {x.shape[0]} samples vs {v.shape}")
    if not np.isfinite(x).all() or not np.isfinite(v).all():
        raise RegressionError("non-finite samples")
    if basis.family == "local":
        fitted = _fit_local(x, v, basis)
    else:
        fitted = _fit_poly(x, v, basis)
    if x.shape[0] < 2 * fitted.n_funcs:
        raise RegressionError(
            f"need at least 2 x basis size samples: {x.shape[0]} < 2*{fitted.n_funcs}"
        )
    return fitted


# ---------------------------------------------------------------------------
# Quadrature chain (small-instance oracle)
# ---------------------------------------------------------------------------


@dataclass
class QuadratureChain:
    """Spatial grid with Gauss-Hermite transition nodes per time step."""

    axes: list            # per-axis grid arrays
    points: np.ndarray    # (p, d) mesh points, C-order over axes
    times: np.ndarray
    y_nodes: list         # per step: (p, q, d) transition samples
    dw_nodes: list        # per step: (q, d) Brownian increments at the nodes
    weights: np.ndarray   # (q,), positive, sums to 1


class _GridField:
    """Values on the chain's grid with linear interpolation/extrapolation."""

    def __init__(self, axes, values):
        self.axes = axes
        self.values = np.asarray(values, dtype=float)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if len(self.axes) == 1:
            return _interp1_extrap(x[:, 0], self.axes[0], self.values)
        from scipy.interpolate import RegularGridInterpolator

        shape = tuple(len(a) for a in self.axes)
        itp = RegularGridInterpolator(
            self.axes, self.values.reshape(shape), bounds_error=False, fill_value=None
        )
        return itp(x)

    def to_json(self):
        return {"family": "grid", "axes": [a.tolist() for a in self.axes],
                "values": self.values.tolist()}


def _interp1_extrap(xq, xs, ys):
    idx = np.clip(np.searchsorted(xs, xq) - 1, 0, len(xs) - 2)
    x0, x1 = xs[idx], xs[idx + 1]
    y0, y1 = ys[idx], ys[idx + 1]
    return y0 + (y1 - y0) * (xq - x0) / (x1 - x0)


def build_quadrature_chain(model, grid, space_box, nodes_per_axis: int, gh_order: int) -> QuadratureChain:
    """Markov-chain quadrature for the Euler transition, d <= 2 only.

    Rejects state boxes that fail a 6-standard-deviation coverage check
    around x0 (total diffusion scale over the horizon).
    """
    d = model.dim
    if d > 2:
        raise ValueError(f"quadrature chain is an oracle for d <= 2, got d={d}")
    lo = np.atleast_1d(np.asarray(space_box[0], dtype=float))
    hi = np.atleast_1d(np.asarray(space_box[1], dtype=float))
    sig_rows = np.stack([model.diffusion(t) for t in grid.times[:-1]])
    sig_scale = np.sqrt((sig_rows**2).sum(axis=2)).max(axis=0)  # per-axis row norms
    need = 6.0 * sig_scale * math.sqrt(grid.horizon)
    if np.any(model.x0 - need < lo) or np.any(model.x0 + need > hi):
        raise ValueError(
            "space box fails the 6-standard-deviation coverage heuristic around x0"
        )
    axes = [np.linspace(lo[i], hi[i], nodes_per_axis) for i in range(d)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    xi1, w1 = _hermegauss_norm(gh_order)
    if d == 1:
        xi = xi1[:, None]
        w = w1
    else:
        a, b = np.meshgrid(xi1, xi1, indexing="ij")
        xi = np.column_stack([a.ravel(), b.ravel()])
        w = np.outer(w1, w1).ravel()
        w = w / w.sum()
    y_nodes, dw_nodes = [], []
    for k, h in enumerate(np.diff(grid.times)):
        t = grid.times[k]
        sig = model.diffusion(t)
        dw = math.sqrt(h) * xi
        drift = model.drift(t, mesh)
        y = mesh[:, None, :] + h * drift[:, None, :] + dw @ sig.T
        y_nodes.append(y)
        dw_nodes.append(dw)
    return QuadratureChain(axes, mesh, grid.times, y_nodes, dw_nodes, w)


class QuadratureEngine:
    """Backward-sweep engine doing exact DP on the quadrature chain."""

    def __init__(self, chain: QuadratureChain):
        self.chain = chain
        self.model = None
        self.grid = None

    def bind(self, model, grid, ensemble=None):
        if len(grid.times) != len(self.chain.times) or not np.allclose(
            grid.times, self.chain.times
        ):
            raise ValueError("chain was built on a different time net")
        self.model = model
        self.grid = grid
        return self

    def states(self, k):
        return self.chain.points

    def terminal(self, g, clip=None):
        vals = np.asarray(g(self.chain.points), dtype=float)
        return _GridField(self.chain.axes, _clipv(vals, clip))

    def project(self, k, vals, clip=None):
        return _GridField(self.chain.axes, _clipv(vals, clip))

    def expectation(self, k, rep, clip=None):
        y = self.chain.y_nodes[k]
        p, q, d = y.shape
        vy = rep(y.reshape(p * q, d)).reshape(p, q)
        vals = vy @ self.chain.weights
        fn = self._transition_fn(k, rep, None)
        return vals, fn

    def increment(self, k, rep, clip=None):
        y = self.chain.y_nodes[k]
        dw = self.chain.dw_nodes[k]
        p, q, d = y.shape
        vy = rep(y.reshape(p * q, d)).reshape(p, q)
        vals = (vy[:, :, None] * (self.chain.weights[None, :, None] * dw[None, :, :])).sum(axis=1)
        fn = self._transition_fn(k, rep, dw)
        return vals, fn

    def step_moments(self, k, rep, clip=None):
        """Fused expectation and increment moment on the chain's grid."""
        y = self.chain.y_nodes[k]
        dw = self.chain.dw_nodes[k]
        p, q, d = y.shape
        vy = rep(y.reshape(p * q, d)).reshape(p, q)
        ey = vy @ self.chain.weights
        em = (vy[:, :, None] * (self.chain.weights[None, :, None] * dw[None, :, :])).sum(axis=1)
        return ey, em, self._transition_fn(k, rep, dw)

    def driver(self, k, rep, z_vals, f, t, clip=None):
        y = self.chain.y_nodes[k]
        dw = self.chain.dw_nodes[k]
        p, q, d = y.shape
        vy = rep(y.reshape(p * q, d)).reshape(p, q)
        x_rep = np.repeat(self.chain.points, q, axis=0)
        z_rep = np.repeat(np.atleast_2d(z_vals), q, axis=0)
        fv = f(t, x_rep, vy.ravel(), z_rep).reshape(p, q)
        return fv @ self.chain.weights

    def _transition_fn(self, k, rep, dw):
        model, grid, w = self.model, self.grid, self.chain.weights
        t = grid.times[k]
        h = grid.steps[k]
        sig = model.diffusion(t)
        xi_dw = self.chain.dw_nodes[k]

        def fn(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            m, d = x.shape
            y = x[:, None, :] + h * model.drift(t, x)[:, None, :] + xi_dw @ sig.T
            vy = rep(y.reshape(-1, d)).reshape(m, len(w))
            if dw is None:
                return vy @ w
            return (vy[:, :, None] * (w[None, :, None] * dw[None, :, :])).sum(axis=1)

        return fn


def _clipv(vals, clip):
    if clip is None or not np.isfinite(clip):
        return vals
    return np.clip(vals, -clip, clip)


# ---------------------------------------------------------------------------
# Least-squares Monte Carlo engine
# ---------------------------------------------------------------------------


class LsmcEngine:
    """Backward-sweep engine backed by least-squares projections on paths.

    In dimension one the Euler transition is Gaussian with state-dependent
    mean and known scale, so conditional expectations of a fitted basis
    field (and its Brownian-increment moment) have closed forms and the
    only statistical error left is the per-step projection itself.
    """

    def __init__(self, basis: RegressionBasis | None = None, gh_order: int = 16):
        self.basis = basis or RegressionBasis()
        self.gh_order = gh_order
        self.model = None
        self.grid = None
        self.ensemble = None

    def bind(self, model, grid, ensemble):
        self.model = model
        self.grid = grid
        self.ensemble = ensemble
        self._kernel = model.dim == 1
        return self

    def states(self, k):
        return self.ensemble.states[:, k, :]

    def terminal(self, g, clip=None):
        k_last = len(self.grid.steps)
        vals = np.asarray(g(self.states(k_last)), dtype=float)
        return self.project(k_last, vals, clip)

    def project(self, k, vals, clip=None):
        try:
            fitted = fit_conditional_expectation(self.states(k), np.asarray(vals, float), self.basis)
        except RegressionError as exc:
            raise RegressionError(f"step {k}: {exc}") from exc
        return fitted

    # -- step geometry ------------------------------------------------------

    def _step(self, k):
        t = self.grid.times[k]
        h = float(self.grid.steps[k])
        sig = float(np.atleast_2d(self.model.diffusion(t))[0, 0])
        return t, h, sig

    def _mu(self, k, x):
        t, h, _ = self._step(k)
        x2 = np.atleast_2d(x)
        return (x2 + h * self.model.drift(t, x2))[:, 0]

    # -- conditional moments -------------------------------------------------

    def expectation(self, k, rep, clip=None):
        if not self._kernel:
            return self._sampled_expectation(k, rep, clip)
        fn = self._mean_fn(k, rep, clip)
        return fn(self.states(k)), fn

    def increment(self, k, rep, clip=None):
        if not self._kernel:
            return self._sampled_increment(k, rep, clip)
        fn = self._incr_fn(k, rep, clip)
        return fn(self.states(k)), fn

    def step_moments(self, k, rep, clip=None):
        """Fused E[rep(X')] and E[rep(X') dW] at the step's own states.

        Shares the standardized-edge transform between the two moments;
        equivalent to calling ``expectation`` and ``increment`` separately.
        """
        if not (self._kernel and isinstance(rep, _FittedLocal)):
            ey, _ = self.expectation(k, rep, clip)
            em, em_fn = self.increment(k, rep, clip)
            return ey, em, em_fn
        _, h, sig = self._step(k)
        s = abs(sig) * math.sqrt(h)
        em_fn = self._incr_fn(k, rep, clip)
        x = self.states(k)
        mu = self._mu(k, x)
        if s == 0.0:
            return _clipv(rep(mu[:, None]), clip), np.zeros((len(mu), 1)), em_fn
        vals = _clipv(rep.values, clip)
        dv = vals[1:] - vals[:-1]
        edges = rep.inner_edges[0]
        zeta = (edges[None, :] - mu[:, None]) / s
        ey = vals[-1] + ndtr(zeta) @ (-dv)
        np.multiply(zeta, zeta, out=zeta)
        zeta *= -0.5
        np.exp(zeta, out=zeta)
        em = (math.copysign(math.sqrt(h), sig) * _NORM_C) * (zeta @ dv)
        return ey, em[:, None], em_fn

    def driver(self, k, rep, z_vals, f, t, clip=None):
        if not self._kernel:
            v_next = _clipv(rep(self.states(k + 1)), clip)
            vals = f(t, self.states(k), v_next, np.atleast_2d(z_vals))
            fitted = self.project(k, vals)
            return fitted(self.states(k))
        _, h, sig = self._step(k)
        x = self.states(k)
        mu = self._mu(k, x)
        s = abs(sig) * math.sqrt(h)
        if s == 0.0:
            y_next = _clipv(rep(mu[:, None]), clip)
            return np.asarray(f(t, x, y_next, np.atleast_2d(z_vals)), dtype=float)
        xi, w = _hermegauss_norm(self.gh_order)
        y = mu[:, None] + s * xi[None, :]
        m, q = y.shape
        vy = _clipv(rep(y.reshape(-1, 1)), clip)
        x_rep = np.repeat(x, q, axis=0)
        z_rep = np.repeat(np.atleast_2d(z_vals), q, axis=0)
        fv = np.asarray(f(t, x_rep, vy, z_rep), dtype=float).reshape(m, q)
        return fv @ w

    # -- closed-form one-step moments (d = 1) --------------------------------

    def _mean_fn(self, k, rep, clip):
        _, h, sig = self._step(k)
        s = abs(sig) * math.sqrt(h)

        def fn(x):
            mu = self._mu(k, x)
            if s == 0.0:
                return _clipv(rep(mu[:, None]), clip)
            if isinstance(rep, _FittedLocal):
                vals = _clipv(rep.values, clip)
                edges = rep.inner_edges[0]
                cdf = ndtr((edges[None, :] - mu[:, None]) / s)
                probs = np.diff(cdf, axis=1, prepend=0.0, append=1.0)
                return probs @ vals
            if isinstance(rep, _FittedPoly):
                mom = _poly_moments(rep, mu, s)
                return mom @ rep.coeffs
            # generic field: Gauss-Hermite fallback
            xi, w = _hermegauss_norm(self.gh_order)
            y = mu[:, None] + s * xi[None, :]
            return _clipv(rep(y.reshape(-1, 1)), clip).reshape(len(mu), -1) @ w

        return fn

    def _incr_fn(self, k, rep, clip):
        _, h, sig = self._step(k)
        s = abs(sig) * math.sqrt(h)

        def fn(x):
            mu = self._mu(k, x)
            m = len(mu)
            if s == 0.0:
                return np.zeros((m, 1))
            if isinstance(rep, _FittedLocal):
                vals = _clipv(rep.values, clip)
                edges = rep.inner_edges[0]
                pdf = _npdf((edges[None, :] - mu[:, None]) / s)
                zero = np.zeros((m, 1))
                pdf_pad = np.concatenate([zero, pdf, zero], axis=1)
                # E[1_cell * dW] = sign(sigma)*sqrt(h)*(phi(left) - phi(right))
                coef = math.copysign(math.sqrt(h), sig)
                out = coef * ((pdf_pad[:, :-1] - pdf_pad[:, 1:]) @ vals)
                return out[:, None]
            if isinstance(rep, _FittedPoly):
                mom = _poly_moments(rep, mu, s)
                deg = rep.powers.shape[0] - 1
                scale = rep.halfwidth[0]
                coef = rep.coeffs
                out = np.zeros(m)
                for p in range(1, deg + 1):
                    out += coef[p] * p * mom[:, p - 1]
                return (sig * h / scale * out)[:, None]
            xi, w = _hermegauss_norm(self.gh_order)
            y = mu[:, None] + s * xi[None, :]
            vy = _clipv(rep(y.reshape(-1, 1)), clip).reshape(m, -1)
            dw = math.copysign(1.0, sig) * math.sqrt(h) * xi
            return (vy @ (w * dw))[:, None]

        return fn

    # -- sampled-product fallback (d >= 2) ------------------------------------

    def _sampled_expectation(self, k, rep, clip):
        v_next = _clipv(rep(self.states(k + 1)), clip)
        fitted = self.project(k, v_next)
        return fitted(self.states(k)), fitted

    def _sampled_increment(self, k, rep, clip):
        v_next = _clipv(rep(self.states(k + 1)), clip)
        dw = self.ensemble.increments[:, k, :]
        fits = [self.project(k, v_next * dw[:, j]) for j in range(dw.shape[1])]
        vals = np.column_stack([f(self.states(k)) for f in fits])

        def fn(x):
            return np.column_stack([f(x) for f in fits])

        return vals, fn


def _poly_moments(rep: _FittedPoly, mu, s):
    """E[t(X')**p] for X' ~ N(mu, s^2), t the box-normalized coordinate."""
    deg = rep.powers.shape[0] - 1
    m0 = (mu - rep.center[0]) / rep.halfwidth[0]
    s1 = s / rep.halfwidth[0]
    mom = np.empty((len(mu), deg + 1))
    mom[:, 0] = 1.0
    if deg >= 1:
        mom[:, 1] = m0
    for p in range(2, deg + 1):
        mom[:, p] = m0 * mom[:, p - 1] + (p - 1) * s1**2 * mom[:, p - 2]
    return mom
