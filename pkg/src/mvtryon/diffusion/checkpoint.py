"""
Binary model checkpoints.

Layout (little endian): magic ``MVTK``, u32 version, u32 metadata length and
UTF-8 JSON metadata, u32 blob count, then per blob: u32 name length, name,
u32 rank, u64 dims, float64 data. Adam moments are stored as blobs named
``optim/<param>/<key>``.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional, Tuple

import numpy as np
import torch

from ..exceptions import FormatError
from .denoiser import INPUT_CHANNELS, DenoiserConfig, ToyDenoiser

logger = logging.getLogger(__name__)

MAGIC = b"MVTK"
VERSION = 1
OPTIMIZER_PREFIX = "optim/"
OPTIMIZER_KEYS = ("exp_avg", "exp_avg_sq", "step")


@dataclass
class Checkpoint:
    metadata: Dict[str, Any]
    parameters: Dict[str, np.ndarray]
    optimizer: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))

    def optimizer_state(self, model: ToyDenoiser) -> Optional[Dict[str, Any]]:
        """Rebuild a ``torch.optim.Adam`` state dict for ``model``."""
        if not self.optimizer:
            return None
        names = [name for name, _ in model.named_parameters()]
        state = {}
        for index, name in enumerate(names):
            if name not in self.optimizer:
                continue
            moments = self.optimizer[name]
            state[index] = {
                "step": torch.tensor(float(moments["step"].reshape(()))),
                "exp_avg": torch.from_numpy(moments["exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(moments["exp_avg_sq"].copy()),
            }
        group = dict(self.metadata.get("optimizer", {}))
        group["params"] = list(range(len(names)))
        return {"state": state, "param_groups": [group]}


def _write_blob(f: BinaryIO, name: str, array: np.ndarray):
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", array.ndim))
    f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    f.write(array.tobytes())


def save_checkpoint(
    path,
    model: ToyDenoiser,
    step: int = 0,
    optimizer_state: Optional[Dict[str, Any]] = None,
    echo: Optional[Dict[str, Any]] = None,
):
    names = [name for name, _ in model.named_parameters()]
    blobs = [
        (name, tensor.detach().cpu().numpy())
        for name, tensor in model.state_dict().items()
    ]
    metadata: Dict[str, Any] = {
        "model": model.config.to_dict(),
        "input_channels": list(INPUT_CHANNELS),
        "step": int(step),
        "config": echo or {},
    }
    if optimizer_state is not None:
        group = {
            key: value
            for key, value in optimizer_state["param_groups"][0].items()
            if key != "params"
        }
        metadata["optimizer"] = group
        for index, moments in sorted(optimizer_state["state"].items()):
            for key in OPTIMIZER_KEYS:
                value = moments[key]
                if torch.is_tensor(value):
                    value = value.detach().cpu().numpy()
                blobs.append(
                    (
                        f"{OPTIMIZER_PREFIX}{names[index]}/{key}",
                        np.asarray(value, dtype=np.float64),
                    )
                )

    encoded = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<I", len(blobs)))
        for name, array in blobs:
            _write_blob(f, name, array)
    logger.debug("saved %d blobs at step %d to %s", len(blobs), step, path)


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"{self.path} is truncated")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    cursor = _Cursor(Path(path).read_bytes(), path)
    if cursor.take(4) != MAGIC:
        raise FormatError(f"{path} is not a model checkpoint")
    version, length = cursor.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        metadata = json.loads(cursor.take(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path} has corrupt metadata: {e}") from e

    parameters: Dict[str, np.ndarray] = {}
    optimizer: Dict[str, Dict[str, np.ndarray]] = {}
    (count,) = cursor.unpack("<I")
    for _ in range(count):
        (name_length,) = cursor.unpack("<I")
        name = cursor.take(name_length).decode("utf-8")
        (rank,) = cursor.unpack("<I")
        shape = cursor.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(cursor.take(8 * size), dtype="<f8")
        array = array.reshape(shape).astype(np.float64)
        if name.startswith(OPTIMIZER_PREFIX):
            param, key = name[len(OPTIMIZER_PREFIX) :].rsplit("/", 1)
            optimizer.setdefault(param, {})[key] = array
        else:
            parameters[name] = array
    if cursor.offset != len(cursor.data):
        raise FormatError(f"{path} has trailing bytes")
    return Checkpoint(metadata, parameters, optimizer)


def load_denoiser(path) -> Tuple[ToyDenoiser, Checkpoint]:
    checkpoint = load_checkpoint(path)
    if checkpoint.metadata.get("input_channels") != list(INPUT_CHANNELS):
        raise FormatError(
            f"checkpoint input channels "
            f"{checkpoint.metadata.get('input_channels')} are not "
            f"{list(INPUT_CHANNELS)}"
        )
    model = ToyDenoiser(DenoiserConfig.from_dict(checkpoint.metadata["model"]))
    try:
        model.load_state_dict(
            {k: torch.from_numpy(v) for k, v in checkpoint.parameters.items()}
        )
    except RuntimeError as e:
        raise FormatError(f"{path} does not match its model config: {e}")
    return model, checkpoint
