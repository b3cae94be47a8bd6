from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Any, Dict, List, Literal, Optional, Tuple
from datetime import datetime

ObjectiveMode = Literal["compliance", "displacement", "bulk_only"]
EdgeName = Literal["left", "right", "top", "bottom", "node"]
Component = Literal["x", "y"]


# Material and network configuration
class MaterialSpec(BaseModel):
    youngs_modulus: float = Field(1.0, gt=0)
    poisson_ratio: float = Field(0.3, gt=-1.0, lt=0.5)


class NetworkConfig(BaseModel):
    local_kernels_per_dim: int = Field(10, ge=1)
    global_kernels_per_dim: int = Field(6, ge=1)
    local_range: Tuple[float, float] = (-0.4, 0.4)
    global_range: Tuple[float, float] = (-0.6, 0.6)
    weight_init: float = 0.1
    weight_noise: float = Field(0.0, ge=0)


# Loss weights and per-epoch report
class LossWeights(BaseModel):
    alpha: float = Field(1.0, ge=0)
    alpha_max: float = Field(50.0, ge=0)
    alpha_ramp_fraction: float = Field(0.5, gt=0, le=1)
    bc_scale: float = Field(0.1, ge=0)
    l2_weight: float = Field(1e-5, ge=0)
    l1_base_weight: float = Field(0.0, ge=0)
    bulk_multiplier: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def check_alpha(self):
        if self.alpha > self.alpha_max:
            raise ValueError(f"alpha ({self.alpha}) must not exceed alpha_max ({self.alpha_max})")
        return self


class LossReport(BaseModel):
    epoch: int = 0
    total: float
    structural: float = 0.0
    bulk: float = 0.0
    volume: float = 0.0
    boundary: float = 0.0
    base_cell: float = 0.0
    regularization: float = 0.0
    per_cell_volume: List[float] = []
    rmse: Optional[float] = None
    alpha: float = 0.0


class TrainConfig(BaseModel):
    epochs: int = Field(300, ge=1)
    # 0 is accepted so a run can replay a checkpoint without moving it
    learning_rate: float = Field(0.001, ge=0)
    upsample: int = Field(1, ge=1)
    seed: int = 0
    mode: Optional[ObjectiveMode] = None
    penal: float = Field(3.0, ge=1)
    c0: float = Field(1e-9, gt=0, lt=1)
    weights: LossWeights = LossWeights()
    network: NetworkConfig = NetworkConfig()


# Problem presets
class BoundaryCondition(BaseModel):
    kind: Literal["fixed", "load", "prescribed"]
    edge: EdgeName
    node: Optional[Tuple[int, int]] = None
    # fraction of the edge covered, by coordinate
    span: Tuple[float, float] = (0.0, 1.0)
    dofs: List[Component] = ["x", "y"]
    value: float = 0.0

    @model_validator(mode="after")
    def check_node(self):
        if self.edge == "node" and self.node is None:
            raise ValueError("edge 'node' requires node=(i, j)")
        if not 0.0 <= self.span[0] <= self.span[1] <= 1.0:
            raise ValueError(f"span must satisfy 0 <= start <= end <= 1, got {self.span}")
        if not self.dofs:
            raise ValueError("dofs must name at least one component")
        return self


class TargetSpec(BaseModel):
    kind: Literal["profile", "material", "base_cell"]
    # profile: raised-cosine bump along one edge
    edge: Literal["left", "right", "top", "bottom"] = "top"
    component: Component = "y"
    amplitude: float = 1.0
    center: float = Field(0.5, ge=0, le=1)
    half_width: float = Field(0.25, gt=0)
    # material: homogeneous solve with a hypothetical material
    material: MaterialSpec = MaterialSpec()
    mask: Literal["edge", "free", "band"] = "edge"


class BaseCellSpec(BaseModel):
    kind: Literal["frame_cross", "solid"] = "frame_cross"
    bar_width: float = Field(0.2, gt=0, le=0.5)


class ProblemPreset(BaseModel):
    name: str
    description: str = ""
    mode: ObjectiveMode
    macro_dims: Tuple[int, int]
    micro_dims: Tuple[int, int]
    material: MaterialSpec = MaterialSpec()
    boundary_conditions: List[BoundaryCondition]
    target: Optional[TargetSpec] = None
    volume_fraction: float = Field(0.5, gt=0, le=1)
    # linear per-column volume targets from left to right, overrides volume_fraction
    volume_ramp: Optional[Tuple[float, float]] = None
    passive_void: List[Tuple[int, int]] = []
    passive_solid: List[Tuple[int, int]] = []
    band: Literal["none", "outer_ring"] = "none"
    base_cell: Optional[BaseCellSpec] = None
    train: TrainConfig = TrainConfig()

    @field_validator("macro_dims", "micro_dims")
    @classmethod
    def positive_dims(cls, v):
        if v[0] < 1 or v[1] < 1:
            raise ValueError(f"dimensions must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def check_consistency(self):
        nx, ny = self.macro_dims
        if min(self.micro_dims) < 2:
            raise ValueError("micro_dims must be at least 2 per axis")
        for cell in self.passive_void + self.passive_solid:
            if not (0 <= cell[0] < nx and 0 <= cell[1] < ny):
                raise ValueError(f"passive cell {cell} outside macro grid {self.macro_dims}")
        if set(self.passive_void) & set(self.passive_solid):
            raise ValueError("passive_void and passive_solid cells must be disjoint")
        if self.volume_ramp is not None:
            for v in self.volume_ramp:
                if not 0.0 < v <= 1.0:
                    raise ValueError(f"volume_ramp entries must lie in (0, 1], got {self.volume_ramp}")
        if self.mode == "displacement" and self.target is None:
            raise ValueError("displacement mode requires a target")
        if self.target is not None and self.target.kind == "base_cell" and self.base_cell is None:
            raise ValueError("base_cell target requires a base_cell spec")
        if self.band != "none" and self.base_cell is None:
            raise ValueError("a base-cell band requires a base_cell spec")
        return self


# Run configuration
class RenderConfig(BaseModel):
    upsample: List[int] = [1]
    pixel_budget: Optional[int] = Field(None, ge=1)

    @field_validator("upsample")
    @classmethod
    def positive_factors(cls, v):
        if not v or any(s < 1 for s in v):
            raise ValueError("upsample factors must be >= 1")
        return v


class PostprocessConfig(BaseModel):
    enabled: bool = True
    low: float = Field(0.3, gt=0, lt=1)
    high: float = Field(0.5, gt=0, lt=1)
    min_area: int = Field(400, ge=0)
    dilation: int = Field(1, ge=0)

    @model_validator(mode="after")
    def ordered_thresholds(self):
        if not self.low < self.high:
            raise ValueError(f"low ({self.low}) must be below high ({self.high})")
        return self


class VerifyConfig(BaseModel):
    enabled: bool = False
    upsample: int = Field(1, ge=1)
    require_connected: bool = True


class RunConfig(BaseModel):
    version: Literal[1] = 1
    run_name: Optional[str] = None
    preset: str
    # preset fields replaced wholesale, validated against ProblemPreset
    overrides: Dict[str, Any] = {}
    train: Optional[TrainConfig] = None
    render: RenderConfig = RenderConfig()
    postprocess: PostprocessConfig = PostprocessConfig()
    verify: VerifyConfig = VerifyConfig()
    output_dir: Optional[str] = None


class RunSummary(BaseModel):
    run_name: str
    preset: str
    mode: ObjectiveMode
    config_hash: str
    seed: int
    epochs: int
    final_losses: Optional[LossReport] = None
    rmse: Optional[float] = None
    rmse_full_scale: Optional[float] = None
    mean_signed_error: Optional[float] = None
    full_scale_connected: Optional[bool] = None
    delta: Optional[float] = None
    delta_normalized: Optional[float] = None
    base_cell_deviation: Optional[float] = None
    percent_hs: Optional[List[float]] = None
    mean_percent_hs: Optional[float] = None
    cell_volumes: Optional[List[float]] = None
    connectivity: Dict[str, Dict[str, float]] = {}
    wall_time_s: float = 0.0
    artifacts: Dict[str, str] = {}


# API response schemas
class HsBoundResponse(BaseModel):
    volume_fraction: float
    youngs_modulus: float
    poisson_ratio: float
    bulk_solid: float
    shear_solid: float
    bound: float


class PresetSummary(BaseModel):
    name: str
    description: str
    mode: ObjectiveMode
    macro_dims: Tuple[int, int]
    micro_dims: Tuple[int, int]


class EpochRecordResponse(BaseModel):
    epoch: int
    total: float
    structural: float
    bulk: float
    volume: float
    boundary: float
    base_cell: float
    regularization: float
    rmse: Optional[float]
    alpha: float

    class Config:
        from_attributes = True


class RunResponse(BaseModel):
    id: int
    run_name: str
    preset: str
    mode: str
    config_hash: str
    seed: int
    epochs: int
    output_dir: str
    status: str
    final_total: Optional[float]
    rmse: Optional[float]
    delta: Optional[float]
    mean_hs: Optional[float]
    wall_time_s: Optional[float]
    created_at: datetime

    class Config:
        from_attributes = True


class RunDetailResponse(RunResponse):
    epoch_records: List[EpochRecordResponse] = []
