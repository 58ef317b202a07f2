"""
Run configuration models
Every section rejects unknown keys so that typos fail loudly
"""

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .camera import StereoRig

ResidualMode = Literal['combined', '2d', '3d']
PresetName = Literal['breathing', 'scanning', 'deforming']


def _split_vector(value):
    """Accept '1, 2, 3' strings as well as sequences"""
    if isinstance(value, str):
        value = value.strip()
        if not value:
            return None
        return [float(x) for x in value.split(',')]
    return value


class SolverConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    memory: int = Field(10, ge=1, description="L-BFGS history length")
    max_iters: int = Field(100, ge=1)
    grad_tol: float = Field(1e-8, gt=0)
    step_tol: float = Field(1e-10, gt=0)
    wolfe_c1: float = Field(1e-4, gt=0, lt=1)
    wolfe_c2: float = Field(0.9, gt=0, lt=1)
    init_policy: Literal['identity', 'previous_pose'] = 'identity'
    max_bisections: int = Field(20, ge=1, description="Zoom iterations before the line search gives up")
    polish_steps: int = Field(0, ge=0, description="Newton refinement steps after L-BFGS")

    @model_validator(mode='after')
    def check_wolfe_order(self):
        if not self.wolfe_c1 < self.wolfe_c2:
            raise ValueError(f"Need wolfe_c1 < wolfe_c2, got {self.wolfe_c1} >= {self.wolfe_c2}")
        return self


class FitConfig(BaseModel):
    """Weight-map fitting (the [ddn] section)"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    step: float = Field(1e-2, gt=0, description="Learning rate")
    iters: int = Field(200, ge=0)
    val_split: float = Field(0.2, ge=0, lt=1)
    optimizer: Literal['adam', 'sgd'] = 'adam'
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0
    workers: int = Field(1, ge=1)
    patience: int = Field(0, ge=0, description="Stop after this many iterations without validation gain; 0 disables")
    tracking_uri: Optional[str] = None


class MaskConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    specular_threshold: float = Field(0.98, gt=0, le=1)
    dilate_px: int = Field(2, ge=0)
    use_specularity: bool = True


class ScenarioConfig(BaseModel):
    """
    Simulator settings

    Unset optional fields keep the preset's value.
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    preset: PresetName = 'breathing'
    seed: int = 0
    n_frames: int = Field(150, ge=1)
    surface: Optional[Literal['plane', 'sphere_patch', 'heightfield']] = None
    base_depth: Optional[float] = Field(None, gt=0)
    heightfield_amplitude: Optional[float] = Field(None, ge=0, lt=1)
    heightfield_smoothness: Optional[float] = Field(None, gt=0)
    translation: Optional[List[float]] = None
    rotation: Optional[List[float]] = None
    breathing_amplitude: Optional[float] = Field(None, ge=0, lt=0.1)
    breathing_period: Optional[float] = Field(None, gt=0)
    depth_noise: Optional[float] = Field(None, ge=0, description="Gaussian sigma on depth (scene units)")
    flow_noise: Optional[float] = Field(None, ge=0, description="Gaussian sigma on flow (px)")
    instrument_polygon: Optional[List[float]] = Field(
        None, description="Flat u0, v0, u1, v1, ... polygon in pixels")
    specular_spots: Optional[int] = Field(None, ge=0)

    @field_validator('translation', 'rotation', 'instrument_polygon', mode='before')
    @classmethod
    def split_vectors(cls, v):
        return _split_vector(v)

    @field_validator('translation', 'rotation')
    @classmethod
    def check_three_vector(cls, v):
        if v is not None and len(v) != 3:
            raise ValueError(f"Expected 3 components, got {len(v)}")
        return v

    @field_validator('instrument_polygon')
    @classmethod
    def check_polygon(cls, v):
        if v is not None and (len(v) % 2 or len(v) < 6):
            raise ValueError("instrument_polygon needs at least 3 (u, v) vertices")
        return v


class EstimateConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    residuals: ResidualMode = 'combined'


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    rig: StereoRig = Field(default_factory=StereoRig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    ddn: FitConfig = Field(default_factory=FitConfig)
    masks: MaskConfig = Field(default_factory=MaskConfig)
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    estimate: EstimateConfig = Field(default_factory=EstimateConfig)


SECTIONS = tuple(RunConfig.model_fields)
