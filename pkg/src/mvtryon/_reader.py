"""
Readers for the on-disk image and rig formats.

``get_reader(path)`` dispatches on the file extension and returns the reader
function for ``path``, or ``None`` when the format is not recognized.
"""
import json
import re
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import numpy as np
from PIL import Image

from .camera import ViewRig, rig_from_json
from .exceptions import FormatError

PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s")


def get_reader(path) -> Optional[Callable]:
    if isinstance(path, (list, tuple)):
        # a list of paths is read as a stack of the first file's type
        path = path[0]
    suffix = Path(path).suffix.lower()
    return READERS.get(suffix)


def read_ppm(path) -> np.ndarray:
    """HxWx3 float64 image in [0, 1]."""
    with Image.open(path) as image:
        if image.format != "PPM":
            raise FormatError(f"{path} is not a PPM file")
        data = np.asarray(image.convert("RGB"), dtype=np.float64)
    return data / 255.0


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    match = PFM_HEADER.match(data)
    if match is None:
        raise FormatError(f"{path} is not a PFM file")
    kind, width, height, scale = match.groups()
    width, height, scale = int(width), int(height), float(scale)
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    if len(data) - match.end() != 4 * count:
        raise FormatError(f"{path} has a truncated PFM body")
    image = np.frombuffer(data, dtype=dtype, count=count, offset=match.end())
    image = image.reshape(height, width, channels)[::-1].astype(np.float64)
    return image[..., 0] if channels == 1 else image


def read_json(path) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e


def read_rig(path) -> ViewRig:
    document = read_json(path)
    try:
        return rig_from_json(document)
    except KeyError as e:
        raise FormatError(f"{path} is missing rig field {e}") from e


READERS: Dict[str, Callable] = {
    ".ppm": read_ppm,
    ".pfm": read_pfm,
    ".json": read_json,
}
