# Import required modules
from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    model_validator,
)

from src.core.config import QUALITY_TO_LAMBDA
from src.core.errors import ConfigurationError

SchemaT = TypeVar("SchemaT", bound=BaseModel)


def parse_schema(schema: Type[SchemaT], data: Any) -> SchemaT:
    """
    Validate raw data into a schema, reporting failures as ConfigurationError.

    Args:
        schema: Pydantic model class to validate into
        data: Mapping (or model instance) to validate

    Returns:
        The validated schema instance

    Raises:
        ConfigurationError: Naming the first offending field
    """
    if isinstance(data, BaseModel):
        data = data.model_dump()
    try:
        return schema.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or schema.__name__
        messages = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(messages, field=field) from e


# Model architecture
class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels_n: PositiveInt = Field(128, description="Convolution channel width N")
    latent_m: PositiveInt = Field(192, description="Latent channels M")
    hyper_out_channels: PositiveInt = Field(
        None, description="Channels of the last hyper-encoder layer (defaults to N)"
    )
    role: Literal["teacher", "student"] = "student"

    @model_validator(mode="before")
    @classmethod
    def _default_hyper_width(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("hyper_out_channels") is None:
            data = dict(data)
            data["hyper_out_channels"] = data.get("channels_n", 128)
        return data


# Distillation / RD loss weights
class KDWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda1: NonNegativeFloat = Field(0.2, description="Latent distillation weight")
    lambda2: NonNegativeFloat = Field(
        0.2, description="Reconstruction weight (L1) / hyper-latent weight (L2)"
    )
    lambda3: NonNegativeFloat = Field(
        0.4, description="RD weight (L1) / reconstruction weight (L2)"
    )
    lambda4: Optional[NonNegativeFloat] = Field(None, description="RD weight (L2 only)")
    rd_lambda: PositiveFloat = Field(0.025, description="Lambda inside the RD term")
    loss_form: Literal["L1", "L2"] = "L1"
    latent_divergence: Literal["mse", "kl"] = "mse"

    @model_validator(mode="after")
    def _check_lambda4(self) -> "KDWeights":
        if self.loss_form == "L2" and self.lambda4 is None:
            raise ValueError("lambda4 is required when loss_form is L2")
        if self.loss_form == "L1" and self.lambda4 is not None:
            raise ValueError("lambda4 is only used when loss_form is L2")
        return self

    @property
    def is_zoo_lambda(self) -> bool:
        return any(abs(self.rd_lambda - v) < 1e-12 for v in QUALITY_TO_LAMBDA.values())


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(50_000, ge=0)
    batch_size: PositiveInt = 16
    crop: PositiveInt = 256
    lr_initial: PositiveFloat = 1e-4
    lr_min: PositiveFloat = 1e-6
    plateau_patience: PositiveInt = 10
    plateau_threshold: NonNegativeFloat = 1e-4
    grad_clip: Optional[PositiveFloat] = 1.0
    seed: int = 0
    eval_interval: PositiveInt = 1_000
    eval_batch_size: PositiveInt = 16
    log_interval: PositiveInt = 100
    rd_lambda: PositiveFloat = Field(0.025, description="Lambda for plain RD training")
    kd: Optional[KDWeights] = None
    teacher_checkpoints: List[Path] = Field(default_factory=list, max_length=2)
    hybrid: bool = False
    deterministic: bool = False
    num_workers: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "TrainConfig":
        if self.lr_min >= self.lr_initial:
            raise ValueError("lr_min must be smaller than lr_initial")
        if self.kd is not None and not self.teacher_checkpoints:
            raise ValueError("distillation requires at least one teacher checkpoint")
        if self.hybrid:
            if len(self.teacher_checkpoints) != 2:
                raise ValueError("hybrid distillation requires exactly two teacher checkpoints")
            if self.kd is None or self.kd.loss_form != "L2":
                raise ValueError("hybrid distillation requires kd.loss_form = L2")
        elif len(self.teacher_checkpoints) > 1:
            raise ValueError("two teacher checkpoints are only used in hybrid mode")
        return self

    @property
    def effective_rd_lambda(self) -> float:
        return self.kd.rd_lambda if self.kd is not None else self.rd_lambda


class TrainState(BaseModel):
    step: int = 0
    lr: float
    best_eval_loss: Optional[float] = None
    bad_evals: int = 0
    # (step, eval_loss, bpp, psnr)
    history: List[Tuple[int, float, float, float]] = Field(default_factory=list)


class DataPaths(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_root: Path
    eval_root: Path


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    kd: Optional[KDWeights] = None
    data: DataPaths
    output_dir: Path = Path("runs")
    tag: str = Field(..., min_length=1)

    @model_validator(mode="before")
    @classmethod
    def _share_kd(cls, data: Any) -> Any:
        # kd lives in its own section of the file but the trainer reads it from train
        if isinstance(data, dict) and data.get("kd") is not None:
            data = dict(data)
            train = dict(data.get("train") or {})
            train.setdefault("kd", data["kd"])
            data["train"] = train
        return data

    @property
    def run_dir(self) -> Path:
        return self.output_dir / self.tag

    def missing_paths(self) -> List[Path]:
        """Paths referenced by the config that do not exist."""
        paths = [self.data.train_root, self.data.eval_root, *self.train.teacher_checkpoints]
        return [p for p in paths if not Path(p).exists()]


# Evaluation results
class RDPoint(BaseModel):
    bpp: NonNegativeFloat
    psnr: float
    msssim: Optional[float] = Field(None, ge=0.0, le=1.0)
    label: str = ""


class RDCurve(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    points: List[RDPoint]
    model_id: str


class RDRecord(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_id: str
    config_hash: str
    commit: str
    point: RDPoint


class ProfileReport(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_id: str
    params_m: Optional[PositiveFloat] = None
    memory_mb: Optional[PositiveFloat] = None
    gflops_per_frame: Optional[PositiveFloat] = None
    throughput_fps: PositiveFloat
    latency_ms_per_frame: PositiveFloat
    energy_mj_per_frame: Optional[PositiveFloat] = None
    avg_power_w: Optional[PositiveFloat] = None
    energy_estimated: bool = False
    passes: PositiveInt
    device_desc: str


# Traditional codecs
CODEC_QUALITY_RANGES: Dict[str, Tuple[int, int]] = {
    "jpeg": (0, 100),
    "webp": (0, 100),
    # 0 selects the library defaults, otherwise a compression-ratio target
    "jpeg2000": (0, 1000),
}


class CodecSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: Literal["jpeg", "webp", "jpeg2000"]
    quality_param: int = 75
    mode_flags: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_quality(self) -> "CodecSpec":
        low, high = CODEC_QUALITY_RANGES[self.name]
        if not low <= self.quality_param <= high:
            raise ValueError(
                f"quality_param for {self.name} must be in [{low}, {high}], got {self.quality_param}"
            )
        return self

    @property
    def label(self) -> str:
        flags = ",".join(f"{k}={v}" for k, v in sorted(self.mode_flags.items()))
        return f"{self.name}-q{self.quality_param}" + (f"[{flags}]" if flags else "")


# Training data manifest
class ManifestEntry(BaseModel):
    path: str
    sha256: str
    width: PositiveInt
    height: PositiveInt
