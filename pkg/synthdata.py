"""
Deterministic synthetic multi-label scenes: colored geometric shapes on a
value-noise background, with image-level labels and pixel masks.

Masks exist for evaluation only; the training path receives
`SceneSplit.training_view()` which carries images and labels alone.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Tuple, Union

import numpy as np
from tqdm import tqdm

from binfmt import ByteReader, pack_u32, pack_u64
from errors import FormatError, PlacementError, UnknownSampleError
from imaging import resize_bilinear, write_pgm, write_ppm
from logger import logger
from models import SHAPE_NAMES, DatasetConfig

DATASET_MAGIC = b"MXDS"
DATASET_VERSION = 1
SPLITS = ("train", "val")

# Mean RGB per class, in SHAPE_NAMES order
CLASS_COLORS = np.array(
    [
        [0.85, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.90, 0.80, 0.15],
        [0.80, 0.25, 0.80],
    ]
)
NOISE_GRIDS = (4, 8)


@dataclass(frozen=True)
class SceneSample:
    """
    image: 3×H×W float64 in [0, 1]; label: C uint8 multi-hot;
    mask: H×W uint8 with 0 = background and c + 1 = class c.
    """
    sample_id: int
    image: np.ndarray
    label: np.ndarray
    mask: np.ndarray

    @property
    def classes(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.flatnonzero(self.label))


@dataclass
class SceneSplit:
    name: str
    num_classes: int
    image_size: int
    samples: List[SceneSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def get(self, sample_id: int) -> SceneSample:
        if not 0 <= sample_id < len(self.samples):
            raise UnknownSampleError(sample_id, len(self.samples))
        return self.samples[sample_id]

    def images(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 3, self.image_size, self.image_size))
        return np.stack([s.image for s in self.samples])

    def labels(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.num_classes))
        return np.stack([s.label for s in self.samples]).astype(np.float64)

    def masks(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.image_size, self.image_size), dtype=np.uint8)
        return np.stack([s.mask for s in self.samples])

    def training_view(self) -> Tuple[np.ndarray, np.ndarray]:
        """(images N×3×H×W, labels N×C); masks never leave this module this way."""
        return self.images(), self.labels()


@dataclass
class SceneDataset:
    train: SceneSplit
    val: SceneSplit

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def image_size(self) -> int:
        return self.train.image_size

    def split(self, name: str) -> SceneSplit:
        if name not in SPLITS:
            raise FormatError(f"unknown split '{name}', expected one of {', '.join(SPLITS)}")
        return getattr(self, name)


# ==================== GEOMETRY ====================

def _circle(dy, dx, r):
    return dy * dy + dx * dx <= r * r


def _square(dy, dx, r):
    return np.maximum(np.abs(dy), np.abs(dx)) <= 0.85 * r


def _triangle(dy, dx, r):
    # apex up, base at 0.5 r below the center
    return (dy >= -r) & (dy <= 0.5 * r) & (np.abs(dx) <= (dy + r) / np.sqrt(3.0))


def _ring(dy, dx, r):
    d2 = dy * dy + dx * dx
    return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)


def _cross(dy, dx, r):
    arm = r / 3.0
    ady, adx = np.abs(dy), np.abs(dx)
    return ((adx <= arm) & (ady <= r)) | ((ady <= arm) & (adx <= r))


SHAPE_RASTERS: Dict[str, Callable] = {
    "circle": _circle,
    "square": _square,
    "triangle": _triangle,
    "ring": _ring,
    "cross": _cross,
}


def shape_coverage(name: str, center: Tuple[float, float], radius: float, size: int) -> np.ndarray:
    """Boolean H×W coverage of one shape, sampled at pixel centers."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return SHAPE_RASTERS[name](yy - center[0], xx - center[1], radius)


def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Two octaves of bilinearly upsampled lattice noise, roughly in [-1, 1]."""
    total = np.zeros((size, size))
    weight = 1.0
    norm = 0.0
    for grid in NOISE_GRIDS:
        lattice = rng.uniform(-1.0, 1.0, (grid + 1, grid + 1))
        total += weight * resize_bilinear(lattice, size, size)
        norm += weight
        weight *= 0.5
    return total / norm


# ==================== GENERATION ====================

def _place_shapes(rng, cfg: DatasetConfig, classes: np.ndarray, sample_id: int) -> np.ndarray:
    """
    Returns an H×W owner map (shape index per pixel, -1 for background)
    in which every shape keeps at least `min_visible` of its pixels.
    """
    n = cfg.image_size
    lo, hi = cfg.size_range
    for attempt in range(cfg.max_attempts):
        owner = np.full((n, n), -1, dtype=np.int64)
        covers = []
        for index, cls in enumerate(classes):
            radius = rng.uniform(lo, hi) * n / 2.0
            center = (rng.uniform(radius, n - radius), rng.uniform(radius, n - radius))
            cover = shape_coverage(SHAPE_NAMES[cls], center, radius, n)
            owner[cover] = index
            covers.append(cover)
        visible = [(owner == i).sum() / max(cover.sum(), 1) for i, cover in enumerate(covers)]
        if all(cover.any() for cover in covers) and min(visible) >= cfg.min_visible:
            if attempt:
                logger.debug(f"sample {sample_id}: placement accepted after {attempt + 1} attempts")
            return owner
    raise PlacementError(sample_id, cfg.max_attempts)


def render_sample(cfg: DatasetConfig, stream: int, sample_id: int) -> SceneSample:
    """One scene from the RNG stream (seed, split stream, sample id)."""
    rng = np.random.default_rng([cfg.seed, stream, sample_id])
    n = cfg.image_size
    count = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    classes = rng.integers(0, cfg.num_classes, size=count)

    base = rng.uniform(0.35, 0.55, size=3)
    noise = _value_noise(rng, n)
    image = base[:, None, None] + cfg.texture_amplitude * noise[None, :, :]

    owner = _place_shapes(rng, cfg, classes, sample_id)
    mask = np.zeros((n, n), dtype=np.uint8)
    for index, cls in enumerate(classes):
        pixels = owner == index
        mask[pixels] = cls + 1
        jitter = rng.normal(0.0, cfg.color_noise, size=(3, int(pixels.sum())))
        image[:, pixels] = CLASS_COLORS[cls][:, None] + jitter

    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    label = np.zeros(cfg.num_classes, dtype=np.uint8)
    label[np.unique(mask[mask > 0]) - 1] = 1
    return SceneSample(sample_id=sample_id, image=image, label=label, mask=mask)


def generate_split(cfg: DatasetConfig, name: str, count: int, workers: int = 1, progress: bool = False) -> SceneSplit:
    stream = SPLITS.index(name)
    render = partial(render_sample, cfg, stream)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples = list(tqdm(pool.map(render, range(count)), total=count, desc=f"gen {name}", disable=not progress))
    return SceneSplit(name=name, num_classes=cfg.num_classes, image_size=cfg.image_size, samples=samples)


def generate_dataset(cfg: DatasetConfig, workers: int = 1, progress: bool = False) -> SceneDataset:
    """
    Deterministic per seed and independent of `workers`: each sample draws
    from its own RNG stream and results are collected in id order.
    """
    logger.info(f"🎨 Generating dataset: {cfg.train_size} train / {cfg.val_size} val, "
                f"{cfg.num_classes} classes at {cfg.image_size}px (seed={cfg.seed})")
    try:
        train = generate_split(cfg, "train", cfg.train_size, workers, progress)
        val = generate_split(cfg, "val", cfg.val_size, workers, progress)
    except PlacementError as e:
        logger.error(f"❌ Dataset generation failed: {e}")
        raise
    logger.info("✅ Dataset generated")
    return SceneDataset(train=train, val=val)


# ==================== STORAGE ====================

def encode_split(split: SceneSplit) -> bytes:
    n, c = split.image_size, split.num_classes
    chunks = [
        DATASET_MAGIC,
        pack_u32(DATASET_VERSION),
        pack_u32(c),
        pack_u32(n),
        pack_u32(n),
        pack_u32(len(split)),
    ]
    for sample in split:
        pixels = np.rint(sample.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
        chunks.append(pack_u64(sample.sample_id))
        chunks.append(np.ascontiguousarray(pixels).tobytes())
        chunks.append(sample.mask.astype(np.uint8).tobytes())
        chunks.append(sample.label.astype(np.uint8).tobytes())
    return b"".join(chunks)


def decode_split(payload: bytes, name: str, source: str = "<bytes>") -> SceneSplit:
    reader = ByteReader(payload, source)
    reader.magic(DATASET_MAGIC)
    version = reader.u32()
    if version != DATASET_VERSION:
        raise FormatError(f"{source}: unsupported dataset version {version}")
    c, h, w, count = reader.u32(), reader.u32(), reader.u32(), reader.u32()
    if h != w:
        raise FormatError(f"{source}: non-square images ({h}×{w}) are not supported")
    samples = []
    for _ in range(count):
        sample_id = reader.u64()
        pixels = reader.array("u1", h * w * 3).reshape(h, w, 3)
        mask = reader.array("u1", h * w).reshape(h, w)
        label = reader.array("u1", c)
        if mask.max(initial=0) > c:
            raise FormatError(f"{source}: sample {sample_id} has mask index above {c}")
        image = pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
        samples.append(SceneSample(sample_id=sample_id, image=image, label=label, mask=mask))
    reader.expect_end()
    return SceneSplit(name=name, num_classes=c, image_size=h, samples=samples)


def save_dataset(dataset: SceneDataset, directory: Union[str, Path]) -> List[Path]:
    """Writes train.mxds and val.mxds into `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SPLITS:
        path = directory / f"{name}.mxds"
        path.write_bytes(encode_split(dataset.split(name)))
        paths.append(path)
    logger.info(f"💾 Dataset saved to {directory}")
    return paths


def load_dataset(directory: Union[str, Path]) -> SceneDataset:
    directory = Path(directory)
    splits = {}
    for name in SPLITS:
        path = directory / f"{name}.mxds"
        try:
            payload = path.read_bytes()
        except FileNotFoundError:
            raise FormatError(f"dataset file not found: {path}")
        splits[name] = decode_split(payload, name, str(path))
    train, val = splits["train"], splits["val"]
    if (train.num_classes, train.image_size) != (val.num_classes, val.image_size):
        raise FormatError(f"{directory}: train and val splits disagree on class count or image size")
    logger.debug(f"Loaded dataset from {directory}: {len(train)} train / {len(val)} val")
    return SceneDataset(train=train, val=val)


def export_samples(split: SceneSplit, out_dir: Union[str, Path], limit: int = 8) -> List[Path]:
    """PPM images and raw-index PGM masks for the first `limit` samples."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sample in split.samples[:limit]:
        stem = f"{split.name}_{sample.sample_id:05d}"
        paths.append(write_ppm(out_dir / f"{stem}.ppm", sample.image))
        paths.append(write_pgm(out_dir / f"{stem}_mask.pgm", sample.mask))
    return paths
