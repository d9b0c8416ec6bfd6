from typing import Iterable, Optional, Sequence


class MixcamError(Exception):
    """
    Base error for the toolkit.

    Every error carries a short snake-case `category` that the CLI prints
    verbatim (machine-parseable) and a human readable `detail`.
    """

    category = "mixcam"

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail

    def __str__(self) -> str:
        return self.detail


# ==================== COMPUTE CORE ====================

class ShapeError(MixcamError):
    """Operand shapes are invalid for an op-kind."""

    category = "shape"

    def __init__(self, op_kind: str, shapes: Iterable[Sequence[int]], reason: str = ""):
        self.op_kind = op_kind
        self.shapes = [tuple(s) for s in shapes]
        shown = ", ".join(str(s) for s in self.shapes)
        detail = f"{op_kind}: incompatible shapes {shown}"
        if reason:
            detail += f" ({reason})"
        super().__init__(detail)


class TapeError(MixcamError):
    category = "tape"


class OptimizerError(MixcamError):
    category = "optimizer"

    def __init__(self, detail: str, parameter: Optional[str] = None):
        super().__init__(detail)
        self.parameter = parameter


class FormatError(MixcamError):
    """Binary file has the wrong magic, version, or is truncated."""

    category = "format"


# ==================== DOMAIN ====================

class ConfigError(MixcamError):
    category = "config"


class PlacementError(MixcamError):
    category = "placement"

    def __init__(self, sample_id: int, attempts: int):
        self.sample_id = sample_id
        super().__init__(f"sample {sample_id}: no feasible shape placement after {attempts} attempts")


class LabelError(MixcamError):
    category = "label"


class NormalizationError(MixcamError):
    category = "normalization"


class EmptyClassSetError(MixcamError):
    category = "empty_class_set"


class NonFiniteLossError(MixcamError):
    category = "non_finite_loss"

    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value} at step {step}")


class UnknownSampleError(MixcamError):
    category = "unknown_sample"

    def __init__(self, sample_id: int, count: int):
        self.sample_id = sample_id
        self.count = count
        valid = f"0..{count - 1}" if count else "none (empty split)"
        super().__init__(f"sample id {sample_id} not found; valid ids: {valid}")
