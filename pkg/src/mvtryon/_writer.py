"""
Writers for the on-disk formats: 8-bit binary PPM (P6) through Pillow,
little-endian PFM for float-exact intermediates and sorted-key JSON.
"""
import json
from pathlib import Path
from typing import Any, Dict

import numpy as np
from PIL import Image

from .camera import ViewRig, rig_to_json
from .exceptions import ShapeError


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    if image.dtype == bool:
        return image.astype(np.uint8) * 255
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray):
    """Write an HxWx3 float image in [0, 1] (or an HxW mask) as P6."""
    data = to_uint8(image)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=-1)
    if data.ndim != 3 or data.shape[-1] != 3:
        raise ShapeError(f"cannot write image of shape {data.shape} as PPM")
    Image.fromarray(data).save(path, format="PPM")


def write_pfm(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        kind = b"Pf"
    elif image.ndim == 3 and image.shape[-1] == 3:
        kind = b"PF"
    else:
        raise ShapeError(f"cannot write image of shape {image.shape} as PFM")
    height, width = image.shape[:2]
    # PFM stores rows bottom to top; a negative scale means little endian
    body = np.ascontiguousarray(image[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(kind + b"\n%d %d\n-1.0\n" % (width, height))
        f.write(body)


def write_json(path, document: Dict[str, Any]):
    text = json.dumps(document, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def write_rig(path, rig: ViewRig):
    write_json(path, rig_to_json(rig))
