"""
Garment alignment (DINO similarity) and multi-view consistency (CLIP
directional consistency) metrics over a 120 view turntable, with pluggable
embedding providers.
"""
import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .camera import ViewRig
from .exceptions import (
    EmbeddingLookupError,
    FormatError,
    InvalidParameterError,
)

logger = logging.getLogger(__name__)

EMBEDDINGS_MAGIC = b"EMBD"
EMBEDDINGS_VERSION = 1
UNIT_TOLERANCE = 1e-9
PROTOCOL_VIEWS = 120


class EmbeddingProvider(Protocol):
    def embed(self, image: np.ndarray) -> np.ndarray:
        """Unit-norm embedding of an HWC image."""


@dataclass
class MetricsConfig:
    embed_dim: int = 64
    embed_seed: int = 0
    eval_views: int = PROTOCOL_VIEWS
    pool: int = 4


class ToyEmbedder:
    """
    Pools the image to a ``pool x pool`` grid, centres it and projects it with
    a fixed seeded matrix with orthonormal columns, then normalizes. The
    projection preserves distances between pooled images.
    """

    def __init__(self, dim: int = 64, seed: int = 0, pool: int = 4):
        features = 3 * pool * pool + 1
        if dim < features:
            raise InvalidParameterError(
                f"embedding dim {dim} is smaller than the {features} pooled "
                f"features"
            )
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, features)))
        self.projection = q
        self.dim = dim
        self.pool = pool

    @classmethod
    def from_config(cls, config: MetricsConfig) -> "ToyEmbedder":
        return cls(config.embed_dim, config.embed_seed, config.pool)

    def features(self, image) -> np.ndarray:
        image = torch.as_tensor(np.asarray(image, dtype=np.float64))
        if image.dim() != 3 or image.shape[-1] != 3:
            raise InvalidParameterError(
                f"expected an HxWx3 image, got {tuple(image.shape)}"
            )
        pooled = F.adaptive_avg_pool2d(
            image.permute(2, 0, 1)[None], self.pool
        )
        centred = pooled.reshape(-1).numpy() - 0.5
        # constant feature keeps mid-gray images away from the origin
        return np.concatenate([centred, [0.25]])

    def embed(self, image) -> np.ndarray:
        vector = self.projection @ self.features(image)
        return vector / np.linalg.norm(vector)


@dataclass(frozen=True)
class ViewClasses:
    front: Tuple[int, ...]
    back: Tuple[int, ...]
    side: Tuple[int, ...]

    def __post_init__(self):
        seen = set(self.front) | set(self.back) | set(self.side)
        if len(seen) != len(self.front) + len(self.back) + len(self.side):
            raise InvalidParameterError("view classes must be disjoint")


def _angular_distance(a: np.ndarray, b: float) -> np.ndarray:
    return np.abs(np.pi - np.mod(a - b + np.pi, 2 * np.pi))


def classify_views(
    views: Union[ViewRig, Sequence[float]], count: int = PROTOCOL_VIEWS
) -> ViewClasses:
    """
    Split a uniform orbit into the third of views closest to the subject's
    front, the third closest to its back and the remaining side views.
    Ties are broken by view index.
    """
    azimuths = (
        views.azimuths() if isinstance(views, ViewRig) else np.asarray(views)
    )
    azimuths = np.mod(np.asarray(azimuths, dtype=np.float64), 2 * np.pi)
    if len(azimuths) != count or count % 3:
        raise InvalidParameterError(
            f"expected {count} views (a multiple of 3), got {len(azimuths)}"
        )
    gaps = np.diff(np.sort(azimuths), append=np.sort(azimuths)[0] + 2 * np.pi)
    if np.abs(gaps - 2 * np.pi / count).max() > 1e-6:
        raise InvalidParameterError("views are not uniformly spaced")

    third = count // 3
    order = np.lexsort((np.arange(count), _angular_distance(azimuths, 0.0)))
    front = sorted(int(i) for i in order[:third])
    remaining = np.setdiff1d(np.arange(count), front)
    order = np.lexsort(
        (remaining, _angular_distance(azimuths[remaining], np.pi))
    )
    back = sorted(int(i) for i in remaining[order[:third]])
    side = sorted(set(range(count)) - set(front) - set(back))
    return ViewClasses(tuple(front), tuple(back), tuple(side))


def dino_sim(
    g_f: np.ndarray,
    g_b: np.ndarray,
    edited: Sequence[np.ndarray],
    classes: ViewClasses,
    provider: EmbeddingProvider,
) -> float:
    front = provider.embed(g_f)
    back = provider.embed(g_b)
    total = sum(
        float(front @ provider.embed(edited[i])) for i in classes.front
    )
    total += sum(
        float(back @ provider.embed(edited[i])) for i in classes.back
    )
    return total / (len(classes.front) + len(classes.back))


def clip_cons(
    edited: Sequence[np.ndarray],
    original: Sequence[np.ndarray],
    provider: EmbeddingProvider,
) -> float:
    """Mean dot product of consecutive edit directions, cyclic over views."""
    if len(edited) != len(original):
        raise InvalidParameterError(
            f"{len(edited)} edited views but {len(original)} originals"
        )
    if len(edited) < 2:
        raise InvalidParameterError("need at least two views")
    directions = [
        provider.embed(e) - provider.embed(o) for e, o in zip(edited, original)
    ]
    n = len(directions)
    total = sum(
        float(directions[i] @ directions[(i + 1) % n]) for i in range(n)
    )
    return total / n


def image_digest(image: np.ndarray) -> bytes:
    """SHA-256 of the 8-bit quantized image, prefixed by its shape."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    header = struct.pack("<I", image.ndim) + struct.pack(
        f"<{image.ndim}I", *image.shape
    )
    payload = header + np.ascontiguousarray(image).tobytes()
    return hashlib.sha256(payload).digest()


def _check_unit(vector: np.ndarray, key: bytes):
    norm = float(np.linalg.norm(vector))
    if not math.isfinite(norm) or abs(norm - 1.0) > UNIT_TOLERANCE:
        raise FormatError(
            f"embedding {key.hex()[:12]} has norm {norm}, expected 1"
        )


def write_embeddings(path, embeddings: Mapping[bytes, np.ndarray]):
    vectors = {k: np.asarray(v, dtype="<f8") for k, v in embeddings.items()}
    dims = {v.shape for v in vectors.values()}
    if len(dims) > 1:
        raise FormatError(f"embeddings have mixed shapes {sorted(dims)}")
    dim = dims.pop()[0] if dims else 0
    with open(path, "wb") as f:
        f.write(EMBEDDINGS_MAGIC)
        f.write(struct.pack("<IIQ", EMBEDDINGS_VERSION, dim, len(vectors)))
        for key in sorted(vectors):
            if len(key) != 32:
                raise FormatError("embedding keys must be 32 byte digests")
            _check_unit(vectors[key], key)
            f.write(key)
            f.write(vectors[key].tobytes())


class FileEmbeddings:
    """Embeddings computed elsewhere, looked up by ``image_digest``."""

    def __init__(self, vectors: Dict[bytes, np.ndarray], dim: int):
        self.vectors = vectors
        self.dim = dim

    def embed(self, image: np.ndarray) -> np.ndarray:
        key = image_digest(image)
        try:
            return self.vectors[key]
        except KeyError:
            raise EmbeddingLookupError(
                f"no embedding stored for image {key.hex()[:12]}"
            ) from None

    def __len__(self) -> int:
        return len(self.vectors)


def load_embeddings(path) -> FileEmbeddings:
    data = Path(path).read_bytes()
    header = len(EMBEDDINGS_MAGIC) + struct.calcsize("<IIQ")
    if len(data) < header or data[:4] != EMBEDDINGS_MAGIC:
        raise FormatError(f"{path} is not an embeddings file")
    version, dim, count = struct.unpack("<IIQ", data[4:header])
    if version != EMBEDDINGS_VERSION:
        raise FormatError(f"unsupported embeddings version {version}")
    entry = 32 + 8 * dim
    if len(data) != header + count * entry:
        raise FormatError(
            f"{path} holds {len(data) - header} entry bytes, expected "
            f"{count * entry}"
        )
    vectors = {}
    for i in range(count):
        offset = header + i * entry
        key = data[offset : offset + 32]
        vector = np.frombuffer(
            data, dtype="<f8", count=dim, offset=offset + 32
        ).astype(np.float64)
        _check_unit(vector, key)
        vectors[key] = vector
    logger.debug("loaded %d embeddings of dim %d from %s", count, dim, path)
    return FileEmbeddings(vectors, dim)
