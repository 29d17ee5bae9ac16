"""Grids, scalar fields, high-order finite differences, residual norms, quadrature.

Conventions used throughout the package:

* grids are uniform with one spacing ``h`` shared by both axes; node (i, j)
  sits at ``(x0 + i*h, y0 + j*h)``,
* field values are stored as an ``(nx, ny)`` float64 array, first index along
  x, second along y,
* derivatives are 4th-order accurate: centered stencils in the interior,
  shifted windows near the boundary (2 nodes for orders 1-2, 3 nodes for
  order 3, where the 7-point centered stencil does not fit),
* residual norms are taken over the interior with a boundary strip of width
  ``INTERIOR_MARGIN`` excluded, so every reported node used a centered stencil.

Logarithmic derivatives are never computed via ``log``; callers use ratio
forms such as ``p_x/p`` so formulas stay valid for negative fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np

from .errors import GridMismatchError, InputError, NumericalError

MIN_NODES = 8          # smallest per-axis node count the stencils support
INTERIOR_MARGIN = 3    # boundary strip excluded from residual norms
# Checkers that nest derivative applications exclude a wider strip: each
# nesting level drags the one-sided band 2 nodes inward, so three levels
# contaminate nodes up to 5 from the edge.
NESTED_MARGIN = 6


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular grid in asymptotic coordinates (x, y)."""

    x0: float
    y0: float
    nx: int
    ny: int
    h: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise InputError(f"grid needs at least 2 nodes per axis, got {self.nx}x{self.ny}")
        if not (self.h > 0.0) or not np.isfinite(self.h):
            raise InputError(f"grid spacing must be positive, got h={self.h}")

    @property
    def xs(self) -> np.ndarray:
        return self.x0 + self.h * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.y0 + self.h * np.arange(self.ny)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xs, self.ys, indexing="ij")

    def node(self, i: int, j: int) -> tuple[float, float]:
        return (self.x0 + i * self.h, self.y0 + j * self.h)

    def refine(self) -> "GridSpec":
        """Same rectangle, spacing halved (node count 2n-1 per axis)."""
        return GridSpec(self.x0, self.y0, 2 * self.nx - 1, 2 * self.ny - 1, self.h / 2.0)


def make_grid(x0: float, y0: float, nx: int, ny: int, h: float) -> GridSpec:
    """Build a grid, rejecting sizes below the stencil width."""
    if nx < MIN_NODES or ny < MIN_NODES:
        raise InputError(f"grid must have at least {MIN_NODES} nodes per axis, got {nx}x{ny}")
    if not (h > 0.0):
        raise InputError(f"grid spacing must be positive, got h={h}")
    return GridSpec(float(x0), float(y0), int(nx), int(ny), float(h))


@dataclass(frozen=True)
class ScalarField:
    """Real values on grid nodes; immutable after construction."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.nx, self.grid.ny):
            raise InputError(
                f"values shape {v.shape} does not match grid {self.grid.nx}x{self.grid.ny}"
            )
        if not np.all(np.isfinite(v)):
            raise NumericalError("field contains non-finite values")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    # Pointwise algebra; operands must share the grid exactly.
    def _coerce(self, other):
        if isinstance(other, ScalarField):
            require_same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return ScalarField(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(self.grid, self.values / self._coerce(other))

    def __rtruediv__(self, other):
        return ScalarField(self.grid, self._coerce(other) / self.values)

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))


def require_same_grid(*fields: ScalarField) -> GridSpec:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise GridMismatchError(f"grids differ: {f.grid} vs {grid}")
    return grid


def constant_field(grid: GridSpec, value: float = 0.0) -> ScalarField:
    return ScalarField(grid, np.full((grid.nx, grid.ny), float(value)))


def sample(expr: Callable, grid: GridSpec) -> ScalarField:
    """Evaluate a pointwise callable of (x, y) on every node.

    Vectorized evaluation is attempted first; scalar callables fall back to a
    node loop. A non-finite value raises naming the offending node.
    """
    X, Y = grid.meshgrid()
    with np.errstate(all="ignore"):
        try:
            vals = np.asarray(expr(X, Y), dtype=np.float64)
            if vals.shape != X.shape:
                vals = np.broadcast_to(vals, X.shape).astype(np.float64)
        except (TypeError, ValueError):
            vals = np.empty_like(X)
            for i in range(grid.nx):
                for j in range(grid.ny):
                    vals[i, j] = float(expr(X[i, j], Y[i, j]))
    bad = ~np.isfinite(vals)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        x, y = grid.node(int(i), int(j))
        raise NumericalError(
            f"expression is not finite at node ({i}, {j}), (x, y) = ({x:g}, {y:g})"
        )
    return ScalarField(grid, vals)


# ---------------------------------------------------------------------------
# Finite-difference machinery


def fd_weights(z: float, nodes: np.ndarray, order: int) -> np.ndarray:
    """Weights of the ``order``-th derivative at ``z`` from samples at ``nodes``.

    Standard recursive computation; exact for polynomials of degree
    ``len(nodes) - 1``.
    """
    n = len(nodes)
    if order >= n:
        raise InputError(f"need more than {n} nodes for derivative order {order}")
    c = np.zeros((n, order + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = nodes[0] - z
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = nodes[i] - z
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


_CENTER_WIDTH = {1: 5, 2: 5, 3: 7}   # centered windows, 4th-order accurate
_SIDE_WIDTH = {1: 5, 2: 6, 3: 7}     # shifted windows keeping 4th order


@lru_cache(maxsize=64)
def _diff_matrix(n: int, order: int) -> np.ndarray:
    """Dense 1-D differentiation matrix on ``n`` unit-spaced nodes."""
    wc = _CENTER_WIDTH[order]
    ws = _SIDE_WIDTH[order]
    if n < max(wc, ws, MIN_NODES):
        raise InputError(f"axis needs at least {MIN_NODES} nodes for order-{order} stencils")
    r = wc // 2
    D = np.zeros((n, n))
    for i in range(n):
        if r <= i <= n - 1 - r:
            js = np.arange(i - r, i + r + 1)
        elif i < r:
            js = np.arange(0, ws)
        else:
            js = np.arange(n - ws, n)
        D[i, js] = fd_weights(float(i), js.astype(np.float64), order)
    D.setflags(write=False)
    return D


def lattice_derivative(vals: np.ndarray, h: float, order: int) -> np.ndarray:
    """1-D derivative of lattice samples with the same 4th-order windows as
    ``differentiate`` (banded application; no dense matrix)."""
    n = len(vals)
    wc = _CENTER_WIDTH[order]
    ws = _SIDE_WIDTH[order]
    if n < max(wc, ws, MIN_NODES):
        raise InputError(f"lattice needs at least {MIN_NODES} nodes for order-{order} stencils")
    r = wc // 2
    out = np.empty(n)
    wcen = fd_weights(float(r), np.arange(wc, dtype=np.float64), order)
    out[r:n - r] = np.correlate(vals, wcen, mode="valid")
    head = np.arange(0, ws, dtype=np.float64)
    for i in range(r):
        out[i] = fd_weights(float(i), head, order) @ vals[:ws]
        out[n - 1 - i] = fd_weights(float(ws - 1 - i), head, order) @ vals[n - ws:]
    return out / h ** order


def differentiate(f: ScalarField, kx: int, ky: int) -> ScalarField:
    """Mixed partial d^kx/dx^kx d^ky/dy^ky of a field, 4th-order accurate.

    Total order kx + ky is limited to 3. (0, 0) returns the field unchanged.
    """
    if kx < 0 or ky < 0:
        raise InputError("derivative orders must be non-negative")
    if kx + ky > 3:
        raise InputError(f"total derivative order {kx + ky} exceeds 3")
    v = f.values
    if kx:
        v = (_diff_matrix(f.grid.nx, kx) @ v) / f.grid.h ** kx
    if ky:
        v = (v @ _diff_matrix(f.grid.ny, ky).T) / f.grid.h ** ky
    return ScalarField(f.grid, np.array(v))


# ---------------------------------------------------------------------------
# Residual reports


@dataclass(frozen=True)
class ResidualNorms:
    sup: float
    l2: float


@dataclass(frozen=True)
class ResidualReport:
    """Per-equation sup and discrete L2 norms over the interior.

    The boundary strip of width ``margin`` is excluded so that only
    centered-stencil nodes contribute.
    """

    h: float
    margin: int
    norms: dict[str, ResidualNorms]

    def sup(self, key: str) -> float:
        return self.norms[key].sup

    def max_sup(self) -> float:
        return max(n.sup for n in self.norms.values())

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "interior_margin": self.margin,
            "norms": {k: {"sup": v.sup, "l2": v.l2} for k, v in self.norms.items()},
        }


def interior_norms(values: np.ndarray, h: float, margin: int = INTERIOR_MARGIN) -> ResidualNorms:
    nx, ny = values.shape[0], values.shape[1]
    if nx <= 2 * margin or ny <= 2 * margin:
        raise InputError(f"grid too small for interior margin {margin}")
    inner = values[margin:nx - margin, margin:ny - margin]
    sup = float(np.max(np.abs(inner)))
    l2 = float(np.sqrt(h * h * np.sum(inner * inner)))
    return ResidualNorms(sup=sup, l2=l2)


def residual_report(
    grid: GridSpec,
    residuals: Mapping[str, ScalarField],
    margin: int = INTERIOR_MARGIN,
) -> ResidualReport:
    return ResidualReport(
        h=grid.h,
        margin=margin,
        norms={k: interior_norms(r.values, grid.h, margin) for k, r in residuals.items()},
    )


def field_scale(*fields: ScalarField) -> float:
    """Sup of the fields entering a residual; used to scale tolerances."""
    return max(f.sup() for f in fields)


def default_tolerance(h: float, scale: float, factor: float = 50.0, floor: float = 1e-8) -> float:
    """Acceptance threshold tied to the proven 4th-order convergence."""
    return max(floor, factor * h ** 4 * scale)


# ---------------------------------------------------------------------------
# Residual operators


def residual_mvn(
    p: ScalarField, V: ScalarField, W: ScalarField, margin: int = INTERIOR_MARGIN
) -> ResidualReport:
    """Residuals of the stationary mVN system.

    r1: (p_xxx - 2 V p_x - p V_x) - (p_yyy - 2 W p_y - p W_y)
    r2: W_x - (3/2) (p^2)_y
    r3: V_y - (3/2) (p^2)_x
    """
    grid = require_same_grid(p, V, W)
    d = differentiate
    p2 = p * p
    r1 = (
        d(p, 3, 0) - 2.0 * V * d(p, 1, 0) - p * d(V, 1, 0)
        - d(p, 0, 3) + 2.0 * W * d(p, 0, 1) + p * d(W, 0, 1)
    )
    r2 = d(W, 1, 0) - 1.5 * d(p2, 0, 1)
    r3 = d(V, 0, 1) - 1.5 * d(p2, 1, 0)
    return residual_report(grid, {"r1": r1, "r2": r2, "r3": r3}, margin)


def residual_vn(
    u: ScalarField, v: ScalarField, w: ScalarField, margin: int = INTERIOR_MARGIN
) -> ResidualReport:
    """Residuals of the stationary VN system.

    r1: (u_xxx - 3 (v u)_x) - (u_yyy - 3 (w u)_y)
    r2: w_x - u_y
    r3: v_y - u_x
    """
    grid = require_same_grid(u, v, w)
    d = differentiate
    r1 = (
        d(u, 3, 0) - 3.0 * d(v * u, 1, 0)
        - d(u, 0, 3) + 3.0 * d(w * u, 0, 1)
    )
    r2 = d(w, 1, 0) - d(u, 0, 1)
    r3 = d(v, 0, 1) - d(u, 1, 0)
    return residual_report(grid, {"r1": r1, "r2": r2, "r3": r3}, margin)


def residual_gc(
    p: ScalarField, q: ScalarField, V: ScalarField, W: ScalarField,
    margin: int = INTERIOR_MARGIN,
) -> ResidualReport:
    """Residuals of the projective Gauss-Codazzi system for general (p, q).

    r1: (p_yyy - 2 p_y W - p W_y) - (q_xxx - 2 q_x V - q V_x)
    r2: W_x - (2 q p_y + p q_y)
    r3: V_y - (2 p q_x + q p_x)
    """
    grid = require_same_grid(p, q, V, W)
    d = differentiate
    r1 = (
        d(p, 0, 3) - 2.0 * d(p, 0, 1) * W - p * d(W, 0, 1)
        - d(q, 3, 0) + 2.0 * d(q, 1, 0) * V + q * d(V, 1, 0)
    )
    r2 = d(W, 1, 0) - 2.0 * q * d(p, 0, 1) - p * d(q, 0, 1)
    r3 = d(V, 0, 1) - 2.0 * p * d(q, 1, 0) - q * d(p, 1, 0)
    return residual_report(grid, {"r1": r1, "r2": r2, "r3": r3}, margin)


def _quadrature_weights(n: int, h: float) -> np.ndarray:
    """Composite Simpson weights; trapezoid fallback on the last strip when
    the node count is even."""
    if n < 3:
        raise InputError("quadrature needs at least 3 nodes per axis")
    m = n if n % 2 == 1 else n - 1  # Simpson covers an odd node count
    ws = np.full(m, 2.0)
    ws[1:-1:2] = 4.0
    ws[0] = 1.0
    ws[-1] = 1.0
    w = np.zeros(n)
    w[:m] = ws * (h / 3.0)
    if n % 2 == 0:
        w[n - 2] += h / 2.0
        w[n - 1] += h / 2.0
    return w


def area_functional(p: ScalarField, q: ScalarField) -> float:
    """Projective area integral of p*q over the grid rectangle."""
    grid = require_same_grid(p, q)
    wx = _quadrature_weights(grid.nx, grid.h)
    wy = _quadrature_weights(grid.ny, grid.h)
    return float(wx @ (p.values * q.values) @ wy)
