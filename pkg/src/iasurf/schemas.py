"""Pydantic request/response models shared by the service, the CLI and the
batch pipeline. RunConfig is the archivable run description; unknown keys are
rejected everywhere so stale configs fail loudly."""

from __future__ import annotations

from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

FamilyName = Literal[
    "quadric", "rotation", "steiner", "kummer", "proj_applicable", "affine_sphere"
]

ParamValue = Union[float, list[float], str]


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    x0: float = 0.0
    y0: float = 0.0
    nx: int = Field(ge=8)
    ny: int = Field(ge=8)
    h: float = Field(gt=0.0)


class FamilyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    name: FamilyName
    params: dict[str, ParamValue] = Field(default_factory=dict)


class ReparamConfig(BaseModel):
    """Affine reparametrization x* = s x + bx, y* = s y + by; one shared
    scale keeps the grid spacing shared between the axes."""

    model_config = ConfigDict(extra="forbid")
    scale: float = Field(gt=0.0)
    shift_x: float = 0.0
    shift_y: float = 0.0


class PipelineFlags(BaseModel):
    model_config = ConfigDict(extra="forbid")
    backlund: bool = False
    dual: bool = False
    reparam: Optional[ReparamConfig] = None
    reconstruct: bool = False
    lelieuvre: bool = False
    r0_state: list[float] = Field(default_factory=lambda: [1.0, 0.0, 0.0, 0.0])


class ToleranceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    sup: Optional[float] = Field(default=None, gt=0.0)
    factor: float = Field(default=50.0, gt=0.0)
    floor: float = Field(default=1e-8, gt=0.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    grid: GridConfig
    family: FamilyConfig
    pipeline: PipelineFlags = Field(default_factory=PipelineFlags)
    tolerances: ToleranceConfig = Field(default_factory=ToleranceConfig)
    output_dir: str = "."


class NormsModel(BaseModel):
    sup: float
    l2: float


class ResidualBlock(BaseModel):
    h: float
    interior_margin: int
    norms: dict[str, NormsModel]
    scale: float
    tolerance: float
    ok: bool


class ConnectionBlock(BaseModel):
    curvature_sup: float
    curvature_l2: float
    holonomy_defect: float
    rectangle: list[int]
    tolerance: float
    ok: bool


class BacklundBlock(BaseModel):
    r0_min: float
    r0_max: float
    u_consistency_defect: float
    r0_system_residual: float


class ReconstructionBlock(BaseModel):
    masked_fraction: float = 0.0
    closure_defect: Optional[float] = None
    conormal_scale: Optional[float] = None
    conormal_residual_sup: Optional[float] = None
    min_conormal_det: Optional[float] = None


class RunReport(BaseModel):
    version: str
    config_hash: str
    family: str
    family_params: dict[str, float]
    grid: GridConfig
    residuals: dict[str, ResidualBlock] = Field(default_factory=dict)
    connection: Optional[ConnectionBlock] = None
    backlund: Optional[BacklundBlock] = None
    reconstruction: Optional[ReconstructionBlock] = None
    outputs: list[str] = Field(default_factory=list)
    errors: list[str] = Field(default_factory=list)
    ok: bool = False
    exit_code: int = 1


class VerifyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    equation: Literal["mvn", "vn", "gc", "roman", "kummer", "cubic"]
    paths: list[str]
    tolerance: Optional[float] = Field(default=None, gt=0.0)


class VerifyGroup(BaseModel):
    h: float
    interior_margin: int
    norms: dict[str, NormsModel]


class VerifyReport(BaseModel):
    equation: str
    groups: list[VerifyGroup]
    scale: float
    tolerance: float
    convergence_order: Optional[dict[str, float]] = None
    ok: bool
    exit_code: int
