"""Backlund map from stationary mVN to stationary VN, duality, symmetries.

The map needs a positive scalar solution r0 of the homogeneous-coordinate
system. Two input forms are accepted:

* a ``StateField`` carrying (r0, r0_x, r0_y, r0_xy); second derivatives then
  come from the defining PDE (no stencils touch r0), which keeps the VN
  residual stencils at clean 4th order,
* a bare ``ScalarField``; everything is then built with ``differentiate``
  ratio forms. Exact for polynomial r0, noisier near the boundary strip for
  transcendental data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .connection import (
    ConnectionPair,
    StateField,
    integrate_connection,
    wilczynski_connection,
)
from .errors import ConsistencyError, InputError, SingularityError
from .fields import (
    GridSpec,
    ScalarField,
    default_tolerance,
    differentiate,
    field_scale,
    require_same_grid,
)
from .families import MvnSolution


@dataclass(frozen=True)
class VnSolution:
    """A (u, v, w) triple solving the stationary VN system."""

    u: ScalarField
    v: ScalarField
    w: ScalarField
    source_family: str = ""
    r0_kind: str = ""
    params: dict[str, float] = field(default_factory=dict)

    @property
    def grid(self) -> GridSpec:
        return self.u.grid


@dataclass(frozen=True)
class AffineFrame:
    """Coefficients (p, q, a, b) of the affine radius-vector system
    R_xx = p R_y + a R_x, R_yy = q R_x + b R_y; a_y = b_x must hold."""

    p: ScalarField
    q: ScalarField
    a: ScalarField
    b: ScalarField
    aux: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> GridSpec:
        return self.p.grid


def frame_defect(frame: AffineFrame) -> float:
    """sup |a_y - b_x| (the integrability obstruction of the frame)."""
    a_y = frame.aux.get("a_y")
    b_x = frame.aux.get("b_x")
    if a_y is None:
        a_y = differentiate(frame.a, 0, 1).values
    if b_x is None:
        b_x = differentiate(frame.b, 1, 0).values
    return float(np.max(np.abs(a_y - b_x)))


def _solution_aux(sol: MvnSolution) -> dict[str, np.ndarray]:
    aux = {}
    src = sol.aux
    if "p_y" in src:
        aux["p_y"] = src["p_y"]
        aux["q_x"] = src["p_x"]
        aux["p_yy"] = src["p_yy"]
        aux["q_xx"] = src["p_xx"]
    if "V_y" in src:
        aux["V_y"] = src["V_y"]
    if "W_x" in src:
        aux["W_x"] = src["W_x"]
    return aux


def wilczynski_for(sol: MvnSolution) -> ConnectionPair:
    """The 4x4 connection of a solution (q = p), using generator-exact
    coefficient derivatives when the solution carries them."""
    return wilczynski_connection(sol.p, sol.p, sol.V, sol.W, aux=_solution_aux(sol))


_LAT_KEYS = ("lat_p", "lat_p_s", "lat_p_ss", "lat_V", "lat_V_s")


def _diagonal_wilczynski(sol: MvnSolution):
    """Connection matrices on the fine diagonal lattice for travelling-wave
    solutions (p, V, W functions of x + y, W = V)."""
    if not all(k in sol.aux for k in _LAT_KEYS):
        return None
    p = sol.aux["lat_p"]
    ps = sol.aux["lat_p_s"]
    pss = sol.aux["lat_p_ss"]
    V = sol.aux["lat_V"]
    Vs = sol.aux["lat_V_s"]
    alpha = 0.5 * (V - ps)
    alpha_s = 0.5 * (Vs - pss)
    S = len(p)
    A = np.zeros((S, 4, 4))
    A[:, 0, 1] = 1.0
    A[:, 1, 0] = alpha
    A[:, 1, 2] = p
    A[:, 2, 3] = 1.0
    A[:, 3, 0] = alpha_s + p * alpha
    A[:, 3, 1] = p * p
    A[:, 3, 2] = alpha + ps
    B = np.zeros((S, 4, 4))
    B[:, 0, 2] = 1.0
    B[:, 1, 3] = 1.0
    B[:, 2, 0] = alpha
    B[:, 2, 1] = p
    B[:, 3, 0] = alpha_s + p * alpha
    B[:, 3, 1] = alpha + ps
    B[:, 3, 2] = p * p
    return A, B


def solve_wilczynski_state(
    sol: MvnSolution, initial_state: np.ndarray, mode: str = "xy"
) -> StateField:
    """Integrate the full state (r, r_x, r_y, r_xy) from the grid corner.

    Travelling-wave solutions carry their coefficients on the fine diagonal
    lattice, where stage values are exact; other solutions use the generic
    half-step interpolating integrator.
    """
    diag = _diagonal_wilczynski(sol)
    if diag is not None:
        from .connection import integrate_diagonal_connection
        from .families import ODE_SUBSTEPS

        return integrate_diagonal_connection(
            diag[0], diag[1], sol.grid, initial_state, mode=mode, sub=ODE_SUBSTEPS
        )
    return integrate_connection(wilczynski_for(sol), initial_state, mode=mode)


def solve_r0(sol: MvnSolution, initial_state: np.ndarray) -> ScalarField:
    """First component of the integrated state; must stay strictly positive.

    Positivity is required because the Backlund formulas divide by r0 and a
    sign change crosses a logarithmic singularity. On failure the zero
    crossing is reported; retry with a different initial state.
    """
    state = solve_wilczynski_state(sol, initial_state)
    r0 = state.values[..., 0]
    if np.min(r0) <= 0.0:
        i, j = np.unravel_index(int(np.argmin(r0)), r0.shape)
        x, y = sol.grid.node(int(i), int(j))
        raise SingularityError(
            f"r0 <= 0 at node ({i}, {j}), (x, y) = ({x:g}, {y:g}); "
            "retry with a different initial state"
        )
    return ScalarField(sol.grid, np.array(r0))


def _check_r0_solves(sol: MvnSolution, r0, rx, ry, tol: float | None) -> float:
    """Residual of the defining second-order system on (r0, r0_x, r0_y)."""
    grid = sol.grid
    p = sol.p.values
    p_y = sol.aux.get("p_y")
    p_x = sol.aux.get("p_x")
    if p_y is None:
        p_y = differentiate(sol.p, 0, 1).values
    if p_x is None:
        p_x = differentiate(sol.p, 1, 0).values
    alpha = 0.5 * (sol.V.values - p_y)
    beta = 0.5 * (sol.W.values - p_x)
    r0f = ScalarField(grid, r0)
    res_x = differentiate(r0f, 2, 0).values - p * ry - alpha * r0
    res_y = differentiate(r0f, 0, 2).values - p * rx - beta * r0
    m = 3
    defect = float(
        max(
            np.max(np.abs(res_x[m:-m, m:-m])),
            np.max(np.abs(res_y[m:-m, m:-m])),
        )
    )
    if tol is None:
        scale = float(np.max(np.abs(r0))) * (1.0 + field_scale(sol.V, sol.W))
        tol = max(1e-6, 500.0 * grid.h ** 4 * scale)
    if defect > tol:
        raise ConsistencyError(
            f"r0 does not solve the linear system: residual {defect:.3e} > {tol:.3e}"
        )
    return defect


def backlund_mvn_to_vn(
    sol: MvnSolution,
    r0: ScalarField | StateField,
    check_tol: float | None = None,
) -> VnSolution:
    """Map a verified mVN solution to a VN solution:

    u = p^2 - 2 (ln r0)_xy,  v = (2/3) V - 2 (ln r0)_xx,
    w = (2/3) W - 2 (ln r0)_yy,

    log-derivatives in ratio form. The difference between the two evaluation
    orders of (ln r0)_xy is reported in params["u_consistency_defect"].
    """
    grid = sol.grid
    if isinstance(r0, StateField):
        if r0.grid != grid:
            raise InputError("r0 state grid does not match the solution grid")
        st = r0.values
        if st.ndim != 3 or st.shape[2] != 4:
            raise InputError("r0 state must be a single 4-component state field")
        r, rx, ry, rxy = st[..., 0], st[..., 1], st[..., 2], st[..., 3]
        kind = "state"
    else:
        require_same_grid(sol.p, r0)
        r = r0.values
        rx = differentiate(r0, 1, 0).values
        ry = differentiate(r0, 0, 1).values
        rxy = None
        kind = "field"
    if np.min(r) <= 0.0:
        i, j = np.unravel_index(int(np.argmin(r)), r.shape)
        raise SingularityError(f"r0 must be positive; minimum at node ({i}, {j})")
    defect_r = _check_r0_solves(sol, r, rx, ry, check_tol)

    p = sol.p.values
    p_y = sol.aux.get("p_y")
    p_x = sol.aux.get("p_x")
    if p_y is None:
        p_y = differentiate(sol.p, 0, 1).values
    if p_x is None:
        p_x = differentiate(sol.p, 1, 0).values
    alpha = 0.5 * (sol.V.values - p_y)
    beta = 0.5 * (sol.W.values - p_x)
    if kind == "state":
        ln_xy = (rxy * r - rx * ry) / (r * r)
        rxx = p * ry + alpha * r
        ryy = p * rx + beta * r
        ln_xx = (rxx * r - rx * rx) / (r * r)
        ln_yy = (ryy * r - ry * ry) / (r * r)
        alt_xy = differentiate(ScalarField(grid, rx / r), 0, 1).values
    else:
        ratio_x = ScalarField(grid, rx / r)
        ratio_y = ScalarField(grid, ry / r)
        ln_xy = differentiate(ratio_x, 0, 1).values
        alt_xy = differentiate(ratio_y, 1, 0).values
        rf = ScalarField(grid, r)
        ln_xx = differentiate(rf, 2, 0).values / r - (rx / r) ** 2
        ln_yy = differentiate(rf, 0, 2).values / r - (ry / r) ** 2
    m = 3
    u_defect = float(np.max(np.abs((ln_xy - alt_xy)[m:-m, m:-m])))

    u = ScalarField(grid, p * p - 2.0 * ln_xy)
    v = ScalarField(grid, (2.0 / 3.0) * sol.V.values - 2.0 * ln_xx)
    w = ScalarField(grid, (2.0 / 3.0) * sol.W.values - 2.0 * ln_yy)
    return VnSolution(
        u=u, v=v, w=w,
        source_family=sol.family,
        r0_kind=kind,
        params={"u_consistency_defect": u_defect, "r0_system_residual": defect_r},
    )


def affine_to_projective(
    frame: AffineFrame, tol: float | None = None
) -> tuple[ScalarField, ScalarField]:
    """Affine invariants (p, q, a, b) to projective connections:
    V = p_y + b p + a^2/2 - a_x,  W = q_x + a q + b^2/2 - b_y."""
    grid = require_same_grid(frame.p, frame.q, frame.a, frame.b)
    defect = frame_defect(frame)
    if tol is None:
        tol = max(1e-6, 500.0 * grid.h ** 4 * (1.0 + field_scale(frame.a, frame.b)))
    if defect > tol:
        raise ConsistencyError(f"frame violates a_y = b_x: defect {defect:.3e} > {tol:.3e}")

    def get(key, fallback):
        v = frame.aux.get(key)
        return v if v is not None else fallback()

    p_y = get("p_y", lambda: differentiate(frame.p, 0, 1).values)
    q_x = get("q_x", lambda: differentiate(frame.q, 1, 0).values)
    a_x = get("a_x", lambda: differentiate(frame.a, 1, 0).values)
    b_y = get("b_y", lambda: differentiate(frame.b, 0, 1).values)
    av, bv = frame.a.values, frame.b.values
    V = ScalarField(grid, p_y + bv * frame.p.values + 0.5 * av * av - a_x)
    W = ScalarField(grid, q_x + av * frame.q.values + 0.5 * bv * bv - b_y)
    return V, W


def dual(sol: MvnSolution) -> MvnSolution:
    """The projective duality (p, V, W) -> (-p, V, W); an exact involution."""
    if sol.family.endswith("|dual"):
        family = sol.family[:-5]
    else:
        family = sol.family + "|dual"
    aux = dict(sol.aux)
    for key in ("p_x", "p_y", "p_xx", "p_yy"):
        if key in aux:
            aux[key] = -aux[key]
    return MvnSolution(
        p=ScalarField(sol.grid, -sol.p.values),
        V=sol.V,
        W=sol.W,
        family=family,
        params=dict(sol.params),
        aux=aux,
    )


@dataclass(frozen=True)
class AxisMap:
    """A monotone coordinate change along one axis with analytic derivatives
    up to third order (differencing a Schwarzian amplifies noise)."""

    f: Callable
    df: Callable
    d2f: Callable
    d3f: Callable

    @classmethod
    def affine(cls, scale: float, shift: float = 0.0) -> "AxisMap":
        if scale <= 0:
            raise InputError("affine axis map needs a positive scale")
        return cls(
            f=lambda t: scale * t + shift,
            df=lambda t: np.full_like(np.asarray(t, dtype=float), scale),
            d2f=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
            d3f=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        )

    def schwarzian(self, t: np.ndarray) -> np.ndarray:
        d1 = np.asarray(self.df(t), dtype=float)
        d2 = np.asarray(self.d2f(t), dtype=float)
        d3 = np.asarray(self.d3f(t), dtype=float)
        return d3 / d1 - 1.5 * (d2 / d1) ** 2


def reparametrize(
    p: ScalarField,
    q: ScalarField,
    V: ScalarField,
    W: ScalarField,
    xmap: AxisMap,
    ymap: AxisMap,
    target_grid: GridSpec,
) -> tuple[ScalarField, ScalarField, ScalarField, ScalarField]:
    """Push a Gauss-Codazzi quadruple through x* = f(x), y* = g(y):

    p* = p g'/(f')^2, q* = q f'/(g')^2, V* = (V + S(f))/(f')^2,
    W* = (W + S(g))/(g')^2,

    sampled on the image lattice and re-interpolated (tensor cubic splines)
    onto the uniform target grid.
    """
    grid = require_same_grid(p, q, V, W)
    xs, ys = grid.xs, grid.ys
    fx = np.asarray(xmap.f(xs), dtype=float)
    gy = np.asarray(ymap.f(ys), dtype=float)
    fpx = np.asarray(xmap.df(xs), dtype=float)
    gpy = np.asarray(ymap.df(ys), dtype=float)
    if np.any(fpx <= 0) or np.any(np.diff(fx) <= 0):
        raise InputError("x map must be strictly increasing on the grid")
    if np.any(gpy <= 0) or np.any(np.diff(gy) <= 0):
        raise InputError("y map must be strictly increasing on the grid")
    Sf = xmap.schwarzian(xs)
    Sg = ymap.schwarzian(ys)
    ps = p.values * gpy[None, :] / fpx[:, None] ** 2
    qs = q.values * fpx[:, None] / gpy[None, :] ** 2
    Vs = (V.values + Sf[:, None]) / fpx[:, None] ** 2
    Ws = (W.values + Sg[None, :]) / gpy[None, :] ** 2
    txs, tys = target_grid.xs, target_grid.ys
    eps = 1e-12 * max(1.0, float(np.max(np.abs(fx))))
    if txs[0] < fx[0] - eps or txs[-1] > fx[-1] + eps:
        raise InputError("target grid x-range leaves the image of the x map")
    if tys[0] < gy[0] - eps or tys[-1] > gy[-1] + eps:
        raise InputError("target grid y-range leaves the image of the y map")
    TX, TY = np.meshgrid(
        np.clip(txs, fx[0], fx[-1]), np.clip(tys, gy[0], gy[-1]), indexing="ij"
    )
    pts = np.stack([TX.ravel(), TY.ravel()], axis=-1)

    def interp(vals):
        rgi = RegularGridInterpolator((fx, gy), vals, method="cubic")
        return ScalarField(target_grid, rgi(pts).reshape(TX.shape))

    return interp(ps), interp(qs), interp(Vs), interp(Ws)


def frame_from_state(sol: MvnSolution, state: StateField) -> AffineFrame:
    """Affine frame (p, q, a, b) of a solution and an integrated positive r0
    state: a = -2 r0_x/r0, b = -2 r0_y/r0 (so a_y = b_x holds exactly)."""
    if state.grid != sol.grid:
        raise InputError("state grid does not match solution grid")
    st = state.values
    r, rx, ry, rxy = st[..., 0], st[..., 1], st[..., 2], st[..., 3]
    if np.min(r) <= 0.0:
        raise SingularityError("r0 state must be positive for the frame gauge")
    grid = sol.grid
    a = -2.0 * rx / r
    b = -2.0 * ry / r
    mixed = -2.0 * (rxy * r - rx * ry) / (r * r)
    aux = {"a_y": mixed, "b_x": mixed}
    if "p_y" in sol.aux:
        aux["p_y"] = sol.aux["p_y"]
        aux["q_x"] = sol.aux["p_x"]
    return AffineFrame(
        p=sol.p, q=sol.p,
        a=ScalarField(grid, a), b=ScalarField(grid, b),
        aux=aux,
    )
