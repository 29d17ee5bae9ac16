"""Surface reconstruction in asymptotic coordinates.

Two independent routes recover the same surface (up to projective/affine
freedom of the initial data):

* the homogeneous-coordinate route: integrate the 4x4 linear system with the
  canonical corner frame and divide by the first coordinate,
* the conormal route: integrate the 3x3 conormal system per Cartesian
  component and quadrate the cross-product one-form
  R_x = nu x nu_x, R_y = -nu x nu_y.

Meshes degrade gracefully where denominators vanish: offending vertices are
masked (coordinates zeroed) and faces touching them dropped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backlund import AffineFrame, frame_defect, wilczynski_for
from .connection import (
    ConnectionPair,
    StateField,
    _interp_midpoints,
    conormal_connection,
    integrate_connection,
)
from .errors import ConsistencyError, InputError, NumericalError, SingularityError
from .fields import (
    GridSpec,
    INTERIOR_MARGIN,
    ResidualNorms,
    ResidualReport,
    ScalarField,
    differentiate,
    require_same_grid,
)
from .families import MvnSolution


@dataclass(frozen=True)
class SurfaceMesh:
    """Grid-shaped 3-space points with a validity mask and optional
    per-vertex scalars. Faces are quads over cells whose four corners are
    all valid; vertex ids are 1-based in row-major node order (y fastest)."""

    grid: GridSpec
    points: np.ndarray
    valid: np.ndarray
    scalars: dict[str, np.ndarray] = field(default_factory=dict)
    info: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        shape = (self.grid.nx, self.grid.ny)
        if self.points.shape != shape + (3,):
            raise InputError(f"points must be (nx, ny, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise NumericalError("mesh points contain non-finite values")
        if self.valid.shape != shape:
            raise InputError("validity mask shape mismatch")

    def vertex_index(self, i: int, j: int) -> int:
        return i * self.grid.ny + j + 1

    def quad_faces(self) -> np.ndarray:
        nx, ny = self.grid.nx, self.grid.ny
        ok = self.valid
        cells = ok[:-1, :-1] & ok[:-1, 1:] & ok[1:, 1:] & ok[1:, :-1]
        ii, jj = np.nonzero(cells)
        base = ii * ny + jj + 1
        return np.stack([base, base + 1, base + ny + 1, base + ny], axis=1)

    def masked_fraction(self) -> float:
        return float(1.0 - np.mean(self.valid))


@dataclass(frozen=True)
class ConormalField:
    """Affine conormal and its first derivatives per node."""

    grid: GridSpec
    nu: np.ndarray
    nu_x: np.ndarray
    nu_y: np.ndarray

    def frame_determinant(self) -> np.ndarray:
        """det[nu, nu_x, nu_y] per node (rows are the three vectors)."""
        M = np.stack([self.nu, self.nu_x, self.nu_y], axis=-2)
        return np.linalg.det(M)


def reconstruct_projective(
    sol: MvnSolution,
    frame: np.ndarray | None = None,
    r0_rel_threshold: float = 1e-9,
    max_masked: float = 0.2,
) -> SurfaceMesh:
    """Integrate the canonical corner frame e1..e4 and normalize by r0.

    Nodes with |r0| below ``r0_rel_threshold * max|r0|`` are masked instead
    of aborting (singular loci carry geometry); more than ``max_masked`` of
    the nodes masked suggests a badly chosen initial frame and aborts.
    """
    init = np.eye(4) if frame is None else np.asarray(frame, dtype=np.float64)
    if init.shape != (4, 4):
        raise InputError("initial frame must be a 4x4 state matrix")
    state = integrate_connection(wilczynski_for(sol), init)
    r = state.values[..., 0, :]          # value components of the 4 solutions
    r0 = r[..., 0]
    cutoff = r0_rel_threshold * float(np.max(np.abs(r0)))
    valid = np.abs(r0) > cutoff
    frac = 1.0 - float(np.mean(valid))
    if frac > max_masked:
        raise SingularityError(
            f"r0 vanishes on {100 * frac:.1f}% of nodes; "
            "choose a different initial frame (projective freedom)"
        )
    points = np.zeros(r0.shape + (3,))
    np.divide(
        r[..., 1:], r0[..., None],
        out=points, where=valid[..., None],
    )
    return SurfaceMesh(
        grid=sol.grid,
        points=points,
        valid=valid,
        scalars={"r0": np.array(r0)},
        info={"masked_fraction": frac},
    )


def _cumline(vals: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Cumulative line integral of nodal samples: Simpson steps with the
    midpoint from sliding cubic interpolation (4th order)."""
    v = np.moveaxis(vals, axis, 0)
    mids = _interp_midpoints(v)
    steps = (h / 6.0) * (v[:-1] + 4.0 * mids + v[1:])
    out = np.zeros_like(v)
    np.cumsum(steps, axis=0, out=out[1:])
    return np.moveaxis(out, 0, axis)


def reconstruct_lelieuvre(
    frame: AffineFrame,
    nu0: np.ndarray,
    R0: np.ndarray,
    consistency_tol: float | None = None,
    closure_tol: float | None = None,
    det_rel_threshold: float = 1e-9,
) -> tuple[ConormalField, SurfaceMesh]:
    """Conormal route: integrate nu per Cartesian component, then quadrate
    R_x = nu x nu_x, R_y = -nu x nu_y from the base point.

    ``nu0`` holds one initial state (nu, nu_x, nu_y) per column; the columns
    must be independent. The closure defect (difference between the two
    integration path orders) is recorded in the mesh info and must stay
    below ``closure_tol``.
    """
    nu0 = np.asarray(nu0, dtype=np.float64)
    R0 = np.asarray(R0, dtype=np.float64)
    if nu0.shape != (3, 3):
        raise InputError("nu0 must be a 3x3 matrix of initial states (one column per component)")
    if abs(np.linalg.det(nu0)) < 1e-12 * max(1.0, float(np.max(np.abs(nu0))) ** 3):
        raise InputError("nu0 initial states must be linearly independent")
    if R0.shape != (3,):
        raise InputError("R0 must be a 3-vector")
    grid = frame.grid
    conn = conormal_connection(
        frame.p, frame.q, frame.a, frame.b, aux=frame.aux, tol=consistency_tol
    )
    state = integrate_connection(conn, nu0)
    nu = state.values[..., 0, :]
    nu_x = state.values[..., 1, :]
    nu_y = state.values[..., 2, :]
    conormal = ConormalField(grid=grid, nu=nu, nu_x=nu_x, nu_y=nu_y)

    det = conormal.frame_determinant()
    m = INTERIOR_MARGIN
    det_in = det[m:grid.nx - m, m:grid.ny - m]
    det_min = float(np.min(np.abs(det_in)))
    if det_min < det_rel_threshold * float(np.max(np.abs(det_in))):
        raise SingularityError(
            f"conormal frame degenerates: interior |det| minimum {det_min:.3e}"
        )

    Rx = np.cross(nu, nu_x)
    Ry = -np.cross(nu, nu_y)
    h = grid.h
    base_x = _cumline(Rx[:, 0, :], h, axis=0)          # along the bottom row
    R_a = R0 + base_x[:, None, :] + _cumline(Ry, h, axis=1)
    base_y = _cumline(Ry[0, :, :], h, axis=0)          # along the left column
    R_b = R0 + base_y[None, :, :] + _cumline(Rx, h, axis=0)
    defect = float(np.max(np.abs(R_a - R_b)))
    if closure_tol is None:
        scale = 1.0 + float(np.max(np.abs(Rx))) + float(np.max(np.abs(Ry)))
        closure_tol = max(1e-6, 500.0 * h ** 4 * scale)
    if defect > closure_tol:
        raise ConsistencyError(
            f"Lelieuvre closure defect {defect:.3e} exceeds {closure_tol:.3e}; "
            "the frame may violate a_y = b_x"
        )
    mesh = SurfaceMesh(
        grid=grid,
        points=R_a,
        valid=np.ones((grid.nx, grid.ny), dtype=bool),
        info={"closure_defect": defect, "min_conormal_det": det_min},
    )
    return conormal, mesh


@dataclass(frozen=True)
class ConormalFit:
    scale: float
    report: ResidualReport


def conormal_consistency(
    nu: ConormalField, r0: ScalarField, mesh: SurfaceMesh
) -> ConormalFit:
    """Residual of nu = lambda (r0)^2 (R_x x R_y) after fitting the single
    global scale lambda (nu is defined up to the choice of initial data)."""
    if nu.grid != mesh.grid or r0.grid != mesh.grid:
        raise InputError("conormal, r0 and mesh must share the grid")
    grid = mesh.grid
    Rx = np.stack(
        [differentiate(ScalarField(grid, mesh.points[..., k]), 1, 0).values for k in range(3)],
        axis=-1,
    )
    Ry = np.stack(
        [differentiate(ScalarField(grid, mesh.points[..., k]), 0, 1).values for k in range(3)],
        axis=-1,
    )
    target = (r0.values ** 2)[..., None] * np.cross(Rx, Ry)
    m = INTERIOR_MARGIN
    sl = (slice(m, grid.nx - m), slice(m, grid.ny - m))
    t_in = target[sl]
    n_in = nu.nu[sl]
    denom = float(np.sum(t_in * t_in))
    if denom == 0.0:
        raise NumericalError("degenerate target in conormal consistency fit")
    lam = float(np.sum(n_in * t_in) / denom)
    res = n_in - lam * t_in
    sup = float(np.max(np.abs(res)))
    l2 = float(np.sqrt(grid.h ** 2 * np.sum(res * res)))
    report = ResidualReport(
        h=grid.h, margin=m, norms={"conormal": ResidualNorms(sup=sup, l2=l2)}
    )
    return ConormalFit(scale=lam, report=report)


def sample_invariants(
    sol: MvnSolution,
    mesh: SurfaceMesh,
    q: ScalarField | None = None,
    p_rel_threshold: float = 1e-9,
) -> SurfaceMesh:
    """Attach per-vertex invariant samples: the metric coefficient 2 p q,
    the cubic-form coefficient p, and the isothermal residual
    ((ln(p/q))_xy in ratio form; identically zero when q = p)."""
    if sol.grid != mesh.grid:
        raise InputError("solution and mesh grids differ")
    p = sol.p
    qf = p if q is None else q
    require_same_grid(p, qf)
    cutoff_p = p_rel_threshold * max(float(np.max(np.abs(p.values))), 1e-300)
    cutoff_q = p_rel_threshold * max(float(np.max(np.abs(qf.values))), 1e-300)
    ok = (np.abs(p.values) > cutoff_p) & (np.abs(qf.values) > cutoff_q)
    grid = mesh.grid
    if q is None:
        iso = np.zeros((grid.nx, grid.ny))
    else:
        ratio = np.zeros((grid.nx, grid.ny))
        np.divide(
            differentiate(p, 1, 0).values, p.values, out=ratio, where=ok
        )
        ratio_q = np.zeros_like(ratio)
        np.divide(
            differentiate(qf, 1, 0).values, qf.values, out=ratio_q, where=ok
        )
        iso = differentiate(ScalarField(grid, ratio - ratio_q), 0, 1).values
        iso[~ok] = 0.0
    scalars = dict(mesh.scalars)
    scalars["p"] = np.array(p.values)
    scalars["metric"] = 2.0 * p.values * qf.values
    scalars["cubic"] = np.array(p.values)
    scalars["isothermal"] = iso
    return SurfaceMesh(
        grid=grid,
        points=mesh.points,
        valid=mesh.valid & ok,
        scalars=scalars,
        info=dict(mesh.info),
    )


def fit_affine(
    src: np.ndarray, dst: np.ndarray, valid: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares affine map L src + t ~ dst over valid nodes; returns
    (L, t, sup residual). Quotients out the affine freedom of initial data
    when comparing two reconstructions."""
    s = src.reshape(-1, 3)
    d = dst.reshape(-1, 3)
    if valid is not None:
        keep = valid.reshape(-1)
        s, d = s[keep], d[keep]
    X = np.hstack([s, np.ones((s.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(X, d, rcond=None)
    res = X @ coef - d
    return coef[:3].T, coef[3], float(np.max(np.abs(res)))


def export_obj(mesh: SurfaceMesh, path: str | Path) -> None:
    """Write a Wavefront OBJ (17 significant digits, quads over unmasked
    cells) plus a sidecar CSV ``vertex_index,p,metric,cubic``."""
    path = Path(path)
    lines = []
    pts = mesh.points
    for i in range(mesh.grid.nx):
        for j in range(mesh.grid.ny):
            x, y, z = pts[i, j]
            lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
    for quad in mesh.quad_faces():
        lines.append("f " + " ".join(str(int(v)) for v in quad))
    path.write_text("\n".join(lines) + "\n")

    sidecar = path.with_suffix(".csv")
    cols = ["p", "metric", "cubic"]
    with open(sidecar, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vertex_index"] + cols)
        idx = 1
        for i in range(mesh.grid.nx):
            for j in range(mesh.grid.ny):
                row = [str(idx)]
                for c in cols:
                    row.append(
                        f"{mesh.scalars[c][i, j]:.17g}" if c in mesh.scalars else ""
                    )
                writer.writerow(row)
                idx += 1
