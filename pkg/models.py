from typing import Annotated, List, Literal, Optional, Tuple

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, computed_field, field_validator, model_validator


def split_csv(value):
    """Accept "a,b,c" wherever a tuple is expected (config files and flags)."""
    if isinstance(value, str):
        parts = [p.strip() for p in value.strip("()[] ").split(",") if p.strip()]
        return tuple(parts)
    return value


FloatPair = Annotated[Tuple[float, float], BeforeValidator(split_csv)]
IntTuple = Annotated[Tuple[int, ...], BeforeValidator(split_csv)]


SHAPE_NAMES = ("circle", "square", "triangle", "ring", "cross")

# ==================== DATASET ====================

class DatasetConfig(BaseModel):
    """
    Synthetic scene generator settings.
    Shape sizes are diameters expressed as a fraction of the image extent.
    """
    num_classes: int = Field(5, ge=2, le=len(SHAPE_NAMES), description="Shape classes, in SHAPE_NAMES order")
    image_size: int = Field(64, ge=8, description="Square image extent in pixels")
    shapes_min: int = Field(1, ge=1, description="Fewest shapes per image")
    shapes_max: int = Field(3, ge=1, description="Most shapes per image")
    size_range: FloatPair = Field((0.3, 0.5), description="Shape diameter range (fraction of extent)")
    texture_amplitude: float = Field(0.15, ge=0.0, le=0.5, description="Background value-noise amplitude")
    color_noise: float = Field(0.05, ge=0.0, le=0.5, description="Per-pixel color noise std")
    train_size: int = Field(2000, ge=0)
    val_size: int = Field(500, ge=0)
    min_visible: float = Field(0.3, gt=0.0, le=1.0, description="Fraction of each shape that must stay visible")
    max_attempts: int = Field(100, ge=1, description="Placement retries per sample")
    seed: int = Field(0, ge=0)

    @field_validator("size_range")
    @classmethod
    def check_size_range(cls, v):
        lo, hi = v
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("size_range must satisfy 0 < lo <= hi < 1")
        return v

    @model_validator(mode="after")
    def check_shape_counts(self):
        if self.shapes_min > self.shapes_max:
            raise ValueError("shapes_min must not exceed shapes_max")
        return self

# ==================== NETWORK ====================

class ClassNetConfig(BaseModel):
    """
    Plain CNN backbone + GAP + single linear classifier.
    """
    image_size: int = Field(64, ge=1, description="Square input extent")
    in_channels: int = Field(3, ge=1)
    block_channels: IntTuple = Field((16, 32, 64, 64), description="Output channels per conv block")
    block_strides: IntTuple = Field((2, 2, 2, 1), description="Stride per conv block")
    kernel_size: int = Field(3, ge=1)
    num_classes: int = Field(5, ge=2)

    @model_validator(mode="after")
    def check_geometry(self):
        if not self.block_channels:
            raise ValueError("at least one conv block is required")
        if len(self.block_channels) != len(self.block_strides):
            raise ValueError("block_channels and block_strides must have the same length")
        if any(c < 1 for c in self.block_channels) or any(s < 1 for s in self.block_strides):
            raise ValueError("channels and strides must be positive")
        if self.image_size % self.downsample != 0:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by the downsample factor {self.downsample}"
            )
        return self

    @property
    def downsample(self) -> int:
        factor = 1
        for s in self.block_strides:
            factor *= s
        return factor

    @property
    def feature_size(self) -> int:
        return self.image_size // self.downsample

    @property
    def feature_channels(self) -> int:
        return self.block_channels[-1]

# ==================== AUGMENTATION ====================

class AugmentConfig(BaseModel):
    """
    Mixup coefficient distribution and label-preserving augmentations.
    """
    alpha: float = Field(0.2, gt=0.0, description="Beta(alpha, alpha) shape")
    mixup: bool = Field(True, description="False forces lambda_mix = 1 (plain CAM)")
    flip_prob: float = Field(0.5, ge=0.0, le=1.0)
    crop_range: FloatPair = Field((0.8, 1.0), description="Crop side as a fraction of the image")
    scale_range: FloatPair = Field((1.0, 1.25), description="Rescale factor range")
    jitter: float = Field(0.1, ge=0.0, le=1.0, description="Color jitter amplitude")
    seed: int = Field(0, ge=0)

    @field_validator("crop_range")
    @classmethod
    def check_crop(cls, v):
        lo, hi = v
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_range must satisfy 0 < lo <= hi <= 1")
        return v

    @field_validator("scale_range")
    @classmethod
    def check_scale(cls, v):
        lo, hi = v
        if not 0.0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        return v

# ==================== OBJECTIVE ====================

class LossWeights(BaseModel):
    lambda_ent: float = Field(0.02, ge=0.0, description="Entropy regularizer weight")
    lambda_con: float = Field(2e-4, ge=0.0, description="Concentration regularizer weight")


class LossBreakdown(BaseModel):
    """
    Scalar values of the three terms and their weighted total.
    """
    cls: float
    ent: float
    con: float
    total: float

# ==================== EVALUATION ====================

class PseudoLabelConfig(BaseModel):
    tau_bg: float = Field(0.25, gt=0.0, lt=1.0, description="Background threshold on normalized maps")
    upsample: Literal["nearest", "bilinear"] = "bilinear"


class IoUReport(BaseModel):
    """
    Confusion counts for background + C classes, with derived IoU values.
    Index 0 is background; index c + 1 is shape class c.
    """
    intersection: List[int]
    union: List[int]
    pred_counts: List[int]
    truth_counts: List[int]

    @computed_field
    @property
    def per_class_iou(self) -> List[Optional[float]]:
        return [i / u if u > 0 else None for i, u in zip(self.intersection, self.union)]

    @computed_field
    @property
    def miou(self) -> float:
        present = [v for v in self.per_class_iou if v is not None]
        return sum(present) / len(present) if present else 0.0

    @property
    def num_labels(self) -> int:
        return len(self.union)

    def merge(self, other: "IoUReport") -> "IoUReport":
        if other.num_labels != self.num_labels:
            raise ValueError("cannot merge reports with different class counts")
        return IoUReport(
            intersection=[a + b for a, b in zip(self.intersection, other.intersection)],
            union=[a + b for a, b in zip(self.union, other.union)],
            pred_counts=[a + b for a, b in zip(self.pred_counts, other.pred_counts)],
            truth_counts=[a + b for a, b in zip(self.truth_counts, other.truth_counts)],
        )

    @classmethod
    def empty(cls, num_labels: int) -> "IoUReport":
        zeros = [0] * num_labels
        return cls(intersection=zeros, union=list(zeros), pred_counts=list(zeros), truth_counts=list(zeros))


class ResponseDiagnostics(BaseModel):
    """Coverage and uniformity of normalized responses on object pixels."""
    coverage: float = Field(0.0, ge=0.0, le=1.0)
    uniformity: float = Field(0.0, ge=0.0, le=1.0)
    classes_scored: int = Field(0, ge=0)


class EvaluationReport(BaseModel):
    samples: int
    tau_bg: float
    iou: IoUReport
    coverage: float
    uniformity: float
    accuracy: float = Field(..., description="All-classes exact-match accuracy at 0.5")
    calibration_error: float = Field(..., description="Expected calibration error of sigmoid outputs")

# ==================== TRAINING / ABLATION ====================

class TrainingSummary(BaseModel):
    epochs_completed: int
    steps: int
    final_val_accuracy: Optional[float] = None
    checkpoint: str
    last_loss: Optional[LossBreakdown] = None


class AblationConfiguration(BaseModel):
    """One row of the loss-combination grid."""
    name: str
    mixup: bool = True
    alpha: Optional[float] = Field(None, gt=0.0, description="Overrides the run alpha when set")
    lambda_ent: float = Field(0.0, ge=0.0)
    lambda_con: float = Field(0.0, ge=0.0)


class AblationRow(BaseModel):
    name: str
    status: Literal["ok", "failed"] = "ok"
    seeds: int = 0
    miou_mean: Optional[float] = None
    miou_std: Optional[float] = None
    coverage_mean: Optional[float] = None
    coverage_std: Optional[float] = None
    uniformity_mean: Optional[float] = None
    uniformity_std: Optional[float] = None
    error: Optional[str] = None

# ==================== HTTP SCHEMAS ====================

class CamRequest(BaseModel):
    """
    Request body for CAM inference on an arbitrary image.
    """
    image: List[List[List[float]]] = Field(..., description="3×H×W image with values in [0, 1]")
    labels: Optional[List[float]] = Field(
        None, description="Image-level label; when omitted, classes with probability >= 0.5 are used"
    )

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "image": [[[0.5, 0.5], [0.5, 0.5]]] * 3,
                "labels": [1, 0, 0, 0, 0],
            }
        }
    )


class CamResponse(BaseModel):
    logits: List[float]
    probabilities: List[float]
    valid_classes: List[int]
    normalized_maps: List[List[List[float]]]
    pseudo_label: List[List[int]]
    no_valid_classes: bool = False


class SampleCamResponse(CamResponse):
    split: str
    sample_id: int
    label: List[int]
    iou: IoUReport
