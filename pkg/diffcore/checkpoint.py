"""
MXCM checkpoint container.

Layout: magic "MXCM", version u32, tensor count u32, then per tensor the
name length u32, UTF-8 name, rank u32, extents u64 each and a little-endian
float64 payload. Adam state lives under the reserved `adam/` prefix and run
bookkeeping under `meta/`.
"""
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np

from binfmt import ByteReader, pack_u32, pack_u64
from errors import FormatError
from diffcore.optim import AdamState

MAGIC = b"MXCM"
VERSION = 1
ADAM_PREFIX = "adam/"
META_PREFIX = "meta/"


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    adam: Optional[AdamState] = None
    meta: Dict[str, float] = field(default_factory=dict)


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, pack_u32(VERSION), pack_u32(len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(pack_u32(len(encoded)))
        chunks.append(encoded)
        chunks.append(pack_u32(array.ndim))
        chunks.extend(pack_u64(extent) for extent in array.shape)
        chunks.append(np.ascontiguousarray(array).tobytes())
    return b"".join(chunks)


def decode_tensors(payload: bytes, source: str = "<checkpoint>") -> Dict[str, np.ndarray]:
    reader = ByteReader(payload, source)
    reader.magic(MAGIC)
    version = reader.u32()
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u64() for _ in range(reader.u32()))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = reader.array("<f8", count).astype(np.float64).reshape(shape)
    reader.expect_end()
    return tensors


def _adam_tensors(state: AdamState) -> Dict[str, np.ndarray]:
    out = {
        f"{ADAM_PREFIX}step": np.array(float(state.step)),
        f"{ADAM_PREFIX}hparams": np.array(
            [state.learning_rate, state.weight_decay, state.beta1, state.beta2, state.epsilon]
        ),
    }
    for key in sorted(state.first_moment):
        out[f"{ADAM_PREFIX}m/{key}"] = state.first_moment[key]
        out[f"{ADAM_PREFIX}v/{key}"] = state.second_moment[key]
    return out


def save_checkpoint(
    path: Union[str, Path],
    params: Mapping[str, np.ndarray],
    adam: Optional[AdamState] = None,
    meta: Optional[Mapping[str, float]] = None,
) -> Path:
    """Write atomically: the previous file survives until the new one is complete."""
    tensors: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        if name.startswith((ADAM_PREFIX, META_PREFIX)):
            raise FormatError(f"parameter name '{name}' uses a reserved prefix")
        tensors[name] = np.asarray(value)
    if adam is not None:
        tensors.update(_adam_tensors(adam))
    for key in sorted(meta or {}):
        tensors[f"{META_PREFIX}{key}"] = np.array(float(meta[key]))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: checkpoint not found")
    tensors = decode_tensors(payload, str(path))

    params: Dict[str, np.ndarray] = {}
    meta: Dict[str, float] = {}
    adam_raw: Dict[str, np.ndarray] = {}
    for name, array in tensors.items():
        if name.startswith(ADAM_PREFIX):
            adam_raw[name[len(ADAM_PREFIX):]] = array
        elif name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = float(array)
        else:
            params[name] = array

    adam = None
    if adam_raw:
        try:
            lr, wd, b1, b2, eps = (float(v) for v in adam_raw["hparams"])
            adam = AdamState(
                learning_rate=lr, weight_decay=wd, beta1=b1, beta2=b2, epsilon=eps,
                step=int(adam_raw["step"]),
            )
        except (KeyError, ValueError):
            raise FormatError(f"{path}: incomplete Adam state")
        for name, array in adam_raw.items():
            if name.startswith("m/"):
                adam.first_moment[name[2:]] = array.copy()
            elif name.startswith("v/"):
                adam.second_moment[name[2:]] = array.copy()
    return Checkpoint(params=params, adam=adam, meta=meta)
