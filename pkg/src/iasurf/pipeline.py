"""Batch pipeline: generate, verify, transform, reconstruct, export.

One ``run`` executes the stages requested by the config and writes every
artifact (IAF1 field dumps, OBJ meshes, report JSON) under the output
directory. Runs are deterministic: fixed stage order, no clocks, no seeds;
identical configs produce bit-identical dumps and reports.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import __version__
from .backlund import (
    AxisMap,
    backlund_mvn_to_vn,
    dual,
    frame_from_state,
    reparametrize,
    solve_wilczynski_state,
    wilczynski_for,
)
from .connection import curvature_residual, holonomy_defect
from .errors import IasurfError, InputError, NumericalError, ToleranceError
from .fieldio import read_field, write_field
from .fields import (
    GridSpec,
    INTERIOR_MARGIN,
    ResidualReport,
    ScalarField,
    default_tolerance,
    field_scale,
    make_grid,
    require_same_grid,
    residual_gc,
    residual_mvn,
    residual_vn,
)
from .families import (
    MvnSolution,
    PolyCoeffs,
    check_cubic_constraints,
    check_kummer_p,
    check_projective_metric,
    check_roman_system,
    check_tzitzeica,
    gen_affine_sphere,
    gen_kummer,
    gen_proj_applicable,
    gen_quadric,
    gen_rotation,
    gen_steiner,
)
from .schemas import (
    BacklundBlock,
    ConnectionBlock,
    GridConfig,
    NormsModel,
    ReconstructionBlock,
    ResidualBlock,
    RunConfig,
    RunReport,
    VerifyGroup,
    VerifyReport,
)
from .surfaces import (
    export_obj,
    conormal_consistency,
    reconstruct_lelieuvre,
    reconstruct_projective,
    sample_invariants,
)


def config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _float_param(params: dict, key: str, default=None) -> float:
    if key not in params:
        if default is None:
            raise InputError(f"family parameter '{key}' is required")
        return float(default)
    v = params[key]
    if not isinstance(v, (int, float)):
        raise InputError(f"family parameter '{key}' must be a number")
    return float(v)


def _list_param(params: dict, key: str, default=None) -> list[float]:
    if key not in params:
        if default is None:
            raise InputError(f"family parameter '{key}' is required")
        return list(default)
    v = params[key]
    if not isinstance(v, list):
        raise InputError(f"family parameter '{key}' must be a list of numbers")
    return [float(x) for x in v]


_KNOWN_PARAMS = {
    "quadric": {"v_coeffs", "w_coeffs"},
    "rotation": {"profile", "amplitude", "frequency", "phase", "coeffs", "c"},
    "steiner": {"a0", "a1", "a2", "f0", "g0"},
    "kummer": {"P", "f0", "g0"},
    "proj_applicable": {"P", "c", "A0", "B0", "F0", "f0", "g0"},
    "affine_sphere": {"c", "p0", "dp0"},
}


def build_family(name: str, params: dict, grid: GridSpec) -> MvnSolution:
    unknown = set(params) - _KNOWN_PARAMS[name]
    if unknown:
        raise InputError(f"unknown parameters for family '{name}': {sorted(unknown)}")
    if name == "quadric":
        vc = _list_param(params, "v_coeffs", [0.0])
        wc = _list_param(params, "w_coeffs", [0.0])
        return gen_quadric(
            lambda x: npoly.polyval(x, vc), lambda y: npoly.polyval(y, wc), grid
        )
    if name == "rotation":
        c = _float_param(params, "c", 0.0)
        kind = params.get("profile", "sin")
        if kind == "sin":
            amp = _float_param(params, "amplitude", 1.0)
            freq = _float_param(params, "frequency", 1.0)
            phase = _float_param(params, "phase", 0.0)
            return gen_rotation(lambda s: amp * np.sin(freq * s + phase), c, grid)
        if kind == "poly":
            coeffs = _list_param(params, "coeffs")
            return gen_rotation(lambda s: npoly.polyval(s, coeffs), c, grid)
        raise InputError(f"unknown rotation profile kind {kind!r}")
    if name == "steiner":
        return gen_steiner(
            _float_param(params, "a0"), _float_param(params, "a1"),
            _float_param(params, "a2"), _float_param(params, "f0"),
            _float_param(params, "g0"), grid,
        )
    if name == "kummer":
        P = PolyCoeffs(tuple(_list_param(params, "P")))
        return gen_kummer(P, _float_param(params, "f0"), _float_param(params, "g0"), grid)
    if name == "proj_applicable":
        P = PolyCoeffs(tuple(_list_param(params, "P")))
        return gen_proj_applicable(
            P, _float_param(params, "c"),
            _float_param(params, "A0"), _float_param(params, "B0"),
            _float_param(params, "F0"),
            _float_param(params, "f0"), _float_param(params, "g0"), grid,
        )
    if name == "affine_sphere":
        return gen_affine_sphere(
            _float_param(params, "c"), _float_param(params, "p0"),
            _float_param(params, "dp0"), grid,
        )
    raise InputError(f"unknown family {name!r}")


def _block(report: ResidualReport, scale: float, tol: float) -> ResidualBlock:
    return ResidualBlock(
        h=report.h,
        interior_margin=report.margin,
        norms={k: NormsModel(sup=v.sup, l2=v.l2) for k, v in report.norms.items()},
        scale=scale,
        tolerance=tol,
        ok=report.max_sup() <= tol,
    )


def run(config: RunConfig) -> RunReport:
    """Execute the configured stages; module errors land in the report with
    the diagnostic verbatim and a nonzero exit code (2 input, 3 numerical)."""
    report = RunReport(
        version=__version__,
        config_hash=config_hash(config),
        family=config.family.name,
        family_params={},
        grid=config.grid,
    )
    out_dir = Path(config.output_dir)
    try:
        _run_stages(config, report, out_dir)
    except IasurfError as exc:
        report.errors.append(f"{type(exc).__name__}: {exc}")
        report.ok = False
        report.exit_code = 2 if isinstance(exc, InputError) else 3
        _try_write_report(report, out_dir)
        return report
    report.ok = all(b.ok for b in report.residuals.values()) and (
        report.connection is None or report.connection.ok
    )
    report.exit_code = 0 if report.ok else 1
    _try_write_report(report, out_dir)
    return report


def _try_write_report(report: RunReport, out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "report.json"
        path.write_text(report.model_dump_json(indent=2) + "\n")
        if "report.json" not in report.outputs:
            report.outputs.append("report.json")
    except OSError:
        pass


def _tolerance(config: RunConfig, h: float, scale: float) -> float:
    t = config.tolerances
    if t.sup is not None:
        return t.sup
    return default_tolerance(h, scale, factor=t.factor, floor=t.floor)


def _run_stages(config: RunConfig, report: RunReport, out_dir: Path) -> None:
    grid = make_grid(
        config.grid.x0, config.grid.y0, config.grid.nx, config.grid.ny, config.grid.h
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    sol = build_family(config.family.name, dict(config.family.params), grid)
    report.family = sol.family
    report.family_params = {k: float(v) for k, v in sol.params.items()}

    def dump(name: str, f: ScalarField) -> None:
        write_field(f, out_dir / f"{name}.iaf")
        report.outputs.append(f"{name}.iaf")

    dump("p", sol.p)
    dump("V", sol.V)
    dump("W", sol.W)

    # verification stage
    scale = field_scale(sol.p, sol.V, sol.W)
    tol = _tolerance(config, grid.h, scale)
    report.residuals["mvn"] = _block(residual_mvn(sol.p, sol.V, sol.W), scale, tol)
    name = config.family.name
    if name == "steiner":
        report.residuals["roman"] = _block(check_roman_system(sol.p), scale, tol)
    elif name == "kummer":
        report.residuals["kummer_p"] = _block(check_kummer_p(sol.p), scale, tol)
        report.residuals["metric"] = _block(
            check_projective_metric(sol.p, 8.0 / 9.0), scale, tol
        )
    elif name == "proj_applicable":
        report.residuals["metric"] = _block(
            check_projective_metric(sol.p, sol.params["c"]), scale, tol
        )
    elif name == "affine_sphere":
        report.residuals["tzitzeica"] = _block(
            check_tzitzeica(sol.p, sol.params["c"]), scale, tol
        )

    conn = wilczynski_for(sol)
    curv = curvature_residual(conn)
    m = INTERIOR_MARGIN
    rect = (m, m, grid.nx - 1 - m, grid.ny - 1 - m)
    hol = holonomy_defect(conn, rect)
    conn_tol = _tolerance(config, grid.h, max(scale, 1.0) ** 2)
    report.connection = ConnectionBlock(
        curvature_sup=curv.max_sup(),
        curvature_l2=curv.norms["zero_curvature"].l2,
        holonomy_defect=hol,
        rectangle=list(rect),
        tolerance=conn_tol,
        ok=curv.max_sup() <= conn_tol and hol <= conn_tol,
    )

    flags = config.pipeline
    state = None
    if flags.backlund or flags.lelieuvre:
        if len(flags.r0_state) != 4:
            raise InputError("pipeline.r0_state must have 4 components")
        state = solve_wilczynski_state(sol, np.asarray(flags.r0_state, dtype=float))
        r0 = state.values[..., 0]
        if np.min(r0) <= 0.0:
            i, j = np.unravel_index(int(np.argmin(r0)), r0.shape)
            raise NumericalError(
                f"r0 <= 0 at node ({i}, {j}); choose a different pipeline.r0_state"
            )

    if flags.backlund:
        vn = backlund_mvn_to_vn(sol, state)
        for nm, f in (("u", vn.u), ("v", vn.v), ("w", vn.w)):
            dump(nm, f)
        vn_scale = field_scale(vn.u, vn.v, vn.w)
        vn_tol = _tolerance(config, grid.h, vn_scale)
        report.residuals["vn"] = _block(residual_vn(vn.u, vn.v, vn.w), vn_scale, vn_tol)
        r0v = state.values[..., 0]
        report.backlund = BacklundBlock(
            r0_min=float(np.min(r0v)),
            r0_max=float(np.max(r0v)),
            u_consistency_defect=vn.params["u_consistency_defect"],
            r0_system_residual=vn.params["r0_system_residual"],
        )

    if flags.dual:
        sd = dual(sol)
        dump("p_dual", sd.p)
        report.residuals["mvn_dual"] = _block(
            residual_mvn(sd.p, sd.V, sd.W), scale, tol
        )
        if config.family.name == "steiner":
            report.residuals["cubic_dual"] = _block(
                check_cubic_constraints(sd.p, sd.V, sd.W), scale, tol
            )

    if flags.reparam is not None:
        rp = flags.reparam
        xm = AxisMap.affine(rp.scale, rp.shift_x)
        ym = AxisMap.affine(rp.scale, rp.shift_y)
        tgrid = GridSpec(
            rp.scale * grid.x0 + rp.shift_x,
            rp.scale * grid.y0 + rp.shift_y,
            grid.nx, grid.ny, rp.scale * grid.h,
        )
        ps, qs, Vs, Ws = reparametrize(sol.p, sol.p, sol.V, sol.W, xm, ym, tgrid)
        for nm, f in (("p_star", ps), ("q_star", qs), ("V_star", Vs), ("W_star", Ws)):
            dump(nm, f)
        gc_scale = field_scale(ps, qs, Vs, Ws)
        gc_tol = _tolerance(config, tgrid.h, gc_scale)
        report.residuals["gc_reparam"] = _block(
            residual_gc(ps, qs, Vs, Ws), gc_scale, gc_tol
        )

    if flags.reconstruct or flags.lelieuvre:
        mesh = reconstruct_projective(sol)
        mesh = sample_invariants(sol, mesh)
        export_obj(mesh, out_dir / "projective.obj")
        report.outputs.extend(["projective.obj", "projective.csv"])
        rec = ReconstructionBlock(masked_fraction=mesh.masked_fraction())
        if flags.lelieuvre:
            frame = frame_from_state(sol, state)
            nu0 = np.eye(3)
            cono, meshL = reconstruct_lelieuvre(frame, nu0, np.zeros(3))
            meshL = sample_invariants(sol, meshL)
            export_obj(meshL, out_dir / "lelieuvre.obj")
            report.outputs.extend(["lelieuvre.obj", "lelieuvre.csv"])
            r0f = ScalarField(grid, state.values[..., 0])
            fit = conormal_consistency(cono, r0f, meshL)
            rec.closure_defect = meshL.info["closure_defect"]
            rec.min_conormal_det = meshL.info["min_conormal_det"]
            rec.conormal_scale = fit.scale
            rec.conormal_residual_sup = fit.report.max_sup()
        report.reconstruction = rec


_EQUATION_ARITY = {"mvn": 3, "vn": 3, "gc": 4, "roman": 1, "kummer": 1, "cubic": 3}


def _dispatch_equation(equation: str, fields: list[ScalarField], margin_scale: int = 1):
    if equation == "mvn":
        return residual_mvn(*fields, margin=INTERIOR_MARGIN * margin_scale)
    if equation == "vn":
        return residual_vn(*fields, margin=INTERIOR_MARGIN * margin_scale)
    if equation == "gc":
        return residual_gc(*fields, margin=INTERIOR_MARGIN * margin_scale)
    from .fields import NESTED_MARGIN

    if equation == "roman":
        return check_roman_system(fields[0], margin=NESTED_MARGIN * margin_scale)
    if equation == "kummer":
        return check_kummer_p(fields[0], margin=NESTED_MARGIN * margin_scale)
    if equation == "cubic":
        return check_cubic_constraints(*fields, margin=NESTED_MARGIN * margin_scale)
    raise InputError(f"unknown equation {equation!r}")


def verify_files(
    paths: list[str], equation: str, tolerance: float | None = None
) -> VerifyReport:
    """Residual-check dumped fields; with two resolution groups the observed
    convergence order is estimated (fine norms taken over the same physical
    interior as the coarse ones)."""
    if equation not in _EQUATION_ARITY:
        raise InputError(f"unknown equation {equation!r}")
    arity = _EQUATION_ARITY[equation]
    if len(paths) not in (arity, 2 * arity):
        raise InputError(
            f"equation '{equation}' needs {arity} (or 2x{arity}) field files, "
            f"got {len(paths)}"
        )
    fields = [read_field(p) for p in paths]
    groups = [fields[:arity]]
    if len(fields) == 2 * arity:
        groups.append(fields[arity:])
    for grp in groups:
        require_same_grid(*grp)
    if len(groups) == 2:
        hc, hf = groups[0][0].grid.h, groups[1][0].grid.h
        if hc < hf:
            groups.reverse()
            hc, hf = hf, hc
        if abs(hc / hf - 2.0) > 1e-9:
            raise InputError(
                f"convergence estimate needs spacing ratio 2, got {hc / hf:.6g}"
            )
    reports = [
        _dispatch_equation(equation, grp, margin_scale=1 + gi)
        for gi, grp in enumerate(groups)
    ]
    scale = max(field_scale(*grp) for grp in groups)
    h = groups[0][0].grid.h
    tol = tolerance if tolerance is not None else default_tolerance(h, scale)
    order = None
    if len(reports) == 2:
        order = {}
        for key in reports[0].norms:
            sc, sf = reports[0].norms[key].sup, reports[1].norms[key].sup
            if sf > 0 and sc > 0:
                order[key] = math.log2(sc / sf)
            else:
                order[key] = float("nan")
    ok = reports[0].max_sup() <= tol
    return VerifyReport(
        equation=equation,
        groups=[
            VerifyGroup(
                h=r.h,
                interior_margin=r.margin,
                norms={k: NormsModel(sup=v.sup, l2=v.l2) for k, v in r.norms.items()},
            )
            for r in reports
        ],
        scale=scale,
        tolerance=tol,
        convergence_order=order,
        ok=ok,
        exit_code=0 if ok else 1,
    )
