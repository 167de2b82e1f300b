"""Non-uniform time nets for the backward solver.

A net on [0, T] is geometric on [0, T - eps] (the distances to T form a
geometric sequence, so steps shrink toward the switch time) and uniform on
[T - eps, T].  The full variant uses 2n+1 points; the reduced variant keeps
the geometric part and places only ceil(n**c) uniform steps on the tail.

Step-size products over these nets stay bounded (uniform weights) or grow
polynomially (weights with a (T - t)^-1 singularity); both products are
exposed here as numeric oracles for the convergence harness.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "GridError",
    "TimeGrid",
    "build_grid",
    "build_reduced_grid",
    "uniform_grid",
    "max_step",
    "lemma_product_uniform",
    "lemma_product_singular",
    "dump_times",
]


class GridError(ValueError):
    """Invalid time-net parameters."""


@dataclass(frozen=True)
class TimeGrid:
    """Immutable time net; safe to share between consumers.

    ``switch_eps`` and ``n`` are stored as given.  ``eps_exponent`` is
    optional metadata recording ``a`` when the caller built the net from
    ``eps = T * n**-a``; nothing is recomputed from it.
    """

    horizon: float
    switch_eps: Optional[float]
    n: int
    times: np.ndarray
    variant: str = "full"  # "full" | "reduced" | "uniform"
    tail_exponent: Optional[float] = None
    eps_exponent: Optional[float] = None

    def __post_init__(self):
        self.times.setflags(write=False)

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    def __len__(self) -> int:
        return len(self.times)


def _check_base(horizon: float, eps: float, n: int) -> None:
    if n < 1:
        raise GridError(f"need n >= 1, got n={n}")
    if not horizon > 0:
        raise GridError(f"need T > 0, got T={horizon}")
    if not (0.0 < eps < horizon):
        raise GridError(f"need 0 < eps < T, got eps={eps}, T={horizon}")


def _geometric_part(horizon: float, eps: float, n: int) -> np.ndarray:
    # t_k = T * (1 - (eps/T)**(k/n)) for k = 0..n; the k = n value is the
    # switch time up to round-off and is snapped exactly because downstream
    # code branches on t <= T - eps.
    k = np.arange(n + 1, dtype=float)
    t = horizon * (1.0 - (eps / horizon) ** (k / n))
    t[0] = 0.0
    switch = horizon - eps
    if abs(t[n] - switch) > 4.0 * np.spacing(horizon):
        raise GridError("geometric part does not close at T - eps")
    t[n] = switch
    return t


def build_grid(horizon: float, eps: float, n: int, eps_exponent: float | None = None) -> TimeGrid:
    """Full-variant net: n geometric steps on [0, T-eps], n uniform on [T-eps, T]."""
    _check_base(horizon, eps, n)
    geo = _geometric_part(horizon, eps, n)
    tail = np.linspace(horizon - eps, horizon, n + 1)
    tail[-1] = horizon
    times = np.concatenate([geo, tail[1:]])
    if not np.all(np.diff(times) > 0):
        raise GridError("constructed times are not strictly increasing")
    return TimeGrid(horizon, eps, n, times, "full", None, eps_exponent)


def build_reduced_grid(
    horizon: float, eps: float, n: int, tail_exponent: float, eps_exponent: float | None = None
) -> TimeGrid:
    """Reduced-variant net: geometric part unchanged, ceil(n**c) uniform tail steps."""
    _check_base(horizon, eps, n)
    if not (0.0 < tail_exponent <= 1.0):
        raise GridError(f"need 0 < c <= 1, got c={tail_exponent}")
    geo = _geometric_part(horizon, eps, n)
    m = int(np.ceil(n**tail_exponent))
    tail = np.linspace(horizon - eps, horizon, m + 1)
    tail[-1] = horizon
    times = np.concatenate([geo, tail[1:]])
    if not np.all(np.diff(times) > 0):
        raise GridError("constructed times are not strictly increasing")
    return TimeGrid(horizon, eps, n, times, "reduced", tail_exponent, eps_exponent)


def uniform_grid(horizon: float, n: int) -> TimeGrid:
    """Equidistant net with n steps; convenience for regularity statistics."""
    if n < 1:
        raise GridError(f"need n >= 1, got n={n}")
    times = np.linspace(0.0, horizon, n + 1)
    times[-1] = horizon
    return TimeGrid(horizon, None, n, times, "uniform")


def max_step(grid: TimeGrid) -> float:
    """Largest step of the net.

    For the full variant with eps = T * n**-a this is the first geometric
    step h_0 = T * (1 - n**(-a/n)) once n is moderately large.
    """
    return float(grid.steps.max())


def lemma_product_uniform(grid: TimeGrid, growth: float) -> float:
    """prod_i (1 + M * h_i) over every step of the net; bounded in n for fixed M."""
    if growth < 0:
        raise GridError(f"need M >= 0, got {growth}")
    return float(np.prod(1.0 + growth * grid.steps))


def lemma_product_singular(grid: TimeGrid, growth: float, singular: float) -> float:
    """prod_{i<n} (1 + M1*h_i + M2*h_i/(T - t_{i+1})) over the geometric part.

    On the geometric part h_i / (T - t_{i+1}) = (T/eps)**(1/n) - 1 for every
    i, which makes the M1 = 0 product exactly (1 + M2*((T/eps)**(1/n)-1))**n.
    """
    if growth < 0 or singular < 0:
        raise GridError("need M1, M2 >= 0")
    if grid.variant not in ("full", "reduced"):
        raise GridError("singular product needs the geometric part of a full/reduced net")
    n = grid.n
    h = grid.steps[:n]
    denom = grid.horizon - grid.times[1 : n + 1]
    return float(np.prod(1.0 + growth * h + singular * h / denom))


def dump_times(grid: TimeGrid) -> str:
    """One time per line, 17 significant digits (golden-file format)."""
    return "\n".join(f"{t:.17g}" for t in grid.times) + "\n"
