"""
Classification network E -> GAP -> G and class activation maps.

The feature extractor is a stack of 3×3 conv + ReLU blocks. Logits are a
single linear map of the globally pooled features, so the CAM of class c is
that same linear map applied at every spatial position (bias excluded) and
its spatial mean equals logit_c - bias_c.
"""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from binfmt import ByteReader, pack_u32
from diffcore import Tensor, as_tensor, no_grad
from diffcore import ops
from errors import FormatError, ShapeError
from imaging import write_pgm
from logger import logger
from models import ClassNetConfig

NORMALIZE_EPS = 1e-12
RESPONSE_MAGIC = b"MXRM"


@dataclass
class ResponseMap:
    """
    Raw class scores (C×H_f×W_f, or N×C×H_f×W_f for a batch), an optional
    max-normalized view and the valid classes of the image label.
    """
    raw: Tensor
    normalized: Optional[Tensor] = None
    valid: Optional[Tuple[int, ...]] = None

    @property
    def num_classes(self) -> int:
        return self.raw.shape[-3]


class ClassNet:
    """
    Plain CNN + GAP + linear classifier.

    Parameters are named tensors (conv{i}.weight, conv{i}.bias,
    classifier.weight, classifier.bias) so checkpoints stay readable.
    """

    def __init__(self, config: ClassNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}

        k = config.kernel_size
        in_ch = config.in_channels
        for i, out_ch in enumerate(config.block_channels):
            std = np.sqrt(2.0 / (in_ch * k * k))
            self.params[f"conv{i}.weight"] = Tensor(rng.normal(0.0, std, (out_ch, in_ch, k, k)), True, f"conv{i}.weight")
            self.params[f"conv{i}.bias"] = Tensor(np.zeros(out_ch), True, f"conv{i}.bias")
            in_ch = out_ch

        feature_ch = config.feature_channels
        self.params["classifier.weight"] = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / feature_ch), (config.num_classes, feature_ch)), True, "classifier.weight"
        )
        self.params["classifier.bias"] = Tensor(np.zeros(config.num_classes), True, "classifier.bias")
        logger.debug(f"ClassNet initialised: {self.num_parameters()} parameters, seed={seed}")

    # ==================== PARAMETERS ====================

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        missing = [name for name in self.params if name not in state]
        if missing:
            raise FormatError(f"checkpoint is missing parameters: {', '.join(missing)}")
        for name, param in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise ShapeError("load_state_dict", [param.shape, value.shape], f"parameter '{name}'")
            param.data = np.ascontiguousarray(value.copy())
            param.zero_grad()

    # ==================== FORWARD ====================

    def _check_images(self, images: Tensor) -> Tuple[Tensor, bool]:
        cfg = self.config
        single = images.ndim == 3
        if single:
            images = images.reshape((1,) + images.shape)
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError("extract_features", [images.shape], f"expected (N,){expected}")
        return images, single

    def extract_features(self, images) -> Tensor:
        """3×H×W (or N×3×H×W) image -> K×H_f×W_f (or N×K×H_f×W_f) feature map."""
        x, single = self._check_images(as_tensor(images))
        pad = self.config.kernel_size // 2
        for i, stride in enumerate(self.config.block_strides):
            w = self.params[f"conv{i}.weight"]
            b = self.params[f"conv{i}.bias"]
            x = ops.conv2d(x, w, stride=stride, padding=pad)
            x = ops.relu(x + b.reshape((1, -1, 1, 1)))
        if single:
            x = x.reshape(x.shape[1:])
        return x

    def classify(self, features: Tensor) -> Tensor:
        """Per-class logits theta_G · GAP(f) + bias (pre-sigmoid)."""
        features = as_tensor(features)
        self._check_features(features)
        return self._linear(ops.gap(features))

    def _linear(self, pooled: Tensor) -> Tensor:
        weight = self.params["classifier.weight"]
        bias = self.params["classifier.bias"]
        if pooled.ndim == 1:
            return (pooled.reshape((1, -1)) @ weight.transpose()).reshape((-1,)) + bias
        return pooled @ weight.transpose() + bias

    def _check_features(self, features: Tensor):
        k = self.config.feature_channels
        if features.ndim not in (3, 4) or features.shape[-3] != k:
            raise ShapeError("classify", [features.shape], f"expected {k} feature channels")

    def cam_from_features(self, features: Tensor) -> Tensor:
        """M^c(h, w) = sum_k theta_G^c[k] · f[k, h, w]; bias excluded."""
        features = as_tensor(features)
        self._check_features(features)
        weight = self.params["classifier.weight"]
        k, h, w = features.shape[-3:]
        lead = features.shape[:-3]
        flat = features.reshape(lead + (k, h * w))
        maps = weight @ flat
        return maps.reshape(lead + (weight.shape[0], h, w))

    def forward(self, images) -> Tuple[Tensor, Tensor]:
        """One pass returning (logits, raw CAM); both share the feature map."""
        features = self.extract_features(images)
        return self._linear(ops.gap(features)), self.cam_from_features(features)

    def cam_raw(self, images, valid: Optional[Sequence[int]] = None) -> ResponseMap:
        features = self.extract_features(images)
        return ResponseMap(raw=self.cam_from_features(features), valid=_as_valid(valid))

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Sigmoid outputs for an N×3×H×W array, without recording a tape."""
        outputs = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                logits = self.classify(self.extract_features(Tensor(images[start:start + batch_size])))
                outputs.append(ops.sigmoid(logits).data)
        if not outputs:
            return np.zeros((0, self.config.num_classes))
        return np.concatenate(outputs, axis=0)


def _as_valid(valid: Optional[Sequence[int]]) -> Optional[Tuple[int, ...]]:
    return None if valid is None else tuple(sorted(int(c) for c in valid))


# ==================== NORMALIZED VIEWS ====================

def normalize_maps(raw: Tensor, eps: float = NORMALIZE_EPS) -> Tensor:
    """
    Clamp negatives, then divide each class map by its spatial maximum.
    Class maps whose maximum is not above eps become all zeros.
    """
    positive = ops.relu(raw)
    peak = positive.max(axis=(-2, -1), keepdims=True)
    keep = (peak.data > eps).astype(np.float64)
    return positive * Tensor(keep) / (peak + Tensor(1.0 - keep))


def cam_normalized(response: ResponseMap) -> ResponseMap:
    return replace(response, normalized=normalize_maps(response.raw))


def spatial_class_probability(response: ResponseMap, eps: float = NORMALIZE_EPS) -> Tensor:
    """
    Per-pixel class distribution P:
    scores / (global max |score|) followed by a softmax over the class axis.
    """
    raw = response.raw
    magnitude = ops.relu(raw) + ops.relu(-raw)
    peak = magnitude.max(axis=(-3, -2, -1), keepdims=True)
    keep = (peak.data > eps).astype(np.float64)
    scaled = raw / (peak * Tensor(keep) + Tensor(1.0 - keep))
    return ops.softmax(scaled, axis=-3)


# ==================== EXPORT ====================

def write_response_map(path: Union[str, Path], response: ResponseMap) -> Path:
    """MXRM dump: magic, C, H_f, W_f as u32, then float64 raw scores."""
    raw = response.raw.data
    if raw.ndim != 3:
        raise ShapeError("write_response_map", [raw.shape], "expected a single C×H×W map")
    c, h, w = raw.shape
    payload = RESPONSE_MAGIC + pack_u32(c) + pack_u32(h) + pack_u32(w) + raw.astype("<f8").tobytes()
    path = Path(path)
    path.write_bytes(payload)
    return path


def read_response_map(path: Union[str, Path]) -> ResponseMap:
    reader = ByteReader(Path(path).read_bytes(), str(path))
    reader.magic(RESPONSE_MAGIC)
    c, h, w = reader.u32(), reader.u32(), reader.u32()
    raw = reader.array("<f8", c * h * w).astype(np.float64).reshape(c, h, w)
    reader.expect_end()
    return ResponseMap(raw=Tensor(raw))


def export_normalized_pgms(response: ResponseMap, out_dir: Union[str, Path], stem: str) -> List[Path]:
    """One 16-bit PGM per class, normalized map scaled to 0..65535."""
    normalized = response.normalized if response.normalized is not None else normalize_maps(response.raw)
    planes = np.clip(np.rint(normalized.data * 65535.0), 0, 65535).astype(np.uint16)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [write_pgm(out_dir / f"{stem}_cam{c}.pgm", plane, depth=16) for c, plane in enumerate(planes)]
