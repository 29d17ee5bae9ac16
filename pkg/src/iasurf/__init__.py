"""Numerical laboratory for isothermally asymptotic surfaces.

Builds exact solution families of the stationary modified Veselov-Novikov
system, maps them to stationary Veselov-Novikov solutions through the
Backlund transformation, reconstructs the corresponding surfaces in 3-space
by two independent routes, and verifies every governing identity with
high-order finite-difference residuals.
"""

__version__ = "0.1.0"

from .errors import (
    ConsistencyError,
    GridMismatchError,
    IasurfError,
    InputError,
    IntegrationOverflowError,
    NumericalError,
    SingularityError,
    ToleranceError,
)
from .fields import (
    GridSpec,
    ResidualReport,
    ScalarField,
    area_functional,
    default_tolerance,
    differentiate,
    field_scale,
    make_grid,
    residual_gc,
    residual_mvn,
    residual_vn,
    sample,
)
from .fieldio import read_field, read_field_csv, write_field, write_field_csv
from .families import (
    CubeRootFlow,
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
    solve_cube_root_flow,
)
from .connection import (
    ConnectionPair,
    StateField,
    conormal_connection,
    curvature_residual,
    holonomy_defect,
    integrate_connection,
    wilczynski_connection,
)
from .backlund import (
    AffineFrame,
    AxisMap,
    VnSolution,
    affine_to_projective,
    backlund_mvn_to_vn,
    dual,
    frame_from_state,
    reparametrize,
    solve_r0,
    solve_wilczynski_state,
)
from .surfaces import (
    ConormalField,
    SurfaceMesh,
    conormal_consistency,
    export_obj,
    fit_affine,
    reconstruct_lelieuvre,
    reconstruct_projective,
    sample_invariants,
)
from .schemas import RunConfig, RunReport, VerifyReport
from .pipeline import build_family, run, verify_files
