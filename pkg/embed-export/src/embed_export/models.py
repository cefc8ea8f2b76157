"""Embedding models selectable by identifier string.

The identifier is configuration, not code: it picks the backend and its
geometry, and the exporter records it verbatim in a sidecar file so an EMB1
file can always be traced back to the model that produced it.

Built-in identifiers:

``thumbnail-<g>``
    Bilinear ``g x g`` grayscale thumbnail, flattened. Dimension ``g*g``.

``projection-<g>-<d>``
    The ``g x g`` thumbnail is standardized to zero mean and unit variance
    (making the vector invariant to positive affine intensity changes) and
    multiplied by a fixed Gaussian matrix seeded from the identifier itself.
    Dimension ``d``.

``openclip:<checkpoint>``
    Placeholder for a pretrained vision model served via the ``open_clip``
    package; raises ``ModelUnavailableError`` when that optional dependency
    is not installed.

All built-ins are deterministic functions of the pixel data alone, so
exports are reproducible byte-for-byte and independent of batch size.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from PIL import Image


class ModelUnavailableError(RuntimeError):
    """The requested embedding model cannot be constructed."""


@dataclass(frozen=True)
class EmbeddingModel:
    """A named, fixed-width embedding function over image batches."""

    name: str
    dimension: int
    _embed: Callable[[Sequence[np.ndarray]], np.ndarray]

    def embed_batch(self, images: Sequence[np.ndarray]) -> np.ndarray:
        """(n, dimension) float32 embeddings of [0, 1] float pixel arrays."""
        out = self._embed(images)
        if out.shape != (len(images), self.dimension):
            raise RuntimeError(
                f"model {self.name!r} returned shape {out.shape}, expected "
                f"{(len(images), self.dimension)}"
            )
        return np.ascontiguousarray(out, dtype=np.float32)


def _to_gray(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 3:
        return pixels.mean(axis=2)
    return pixels


def _thumbnail(pixels: np.ndarray, grid: int) -> np.ndarray:
    gray = np.asarray(_to_gray(pixels), dtype=np.float32)
    if gray.shape == (grid, grid):
        small = gray
    else:
        small = np.asarray(
            Image.fromarray(gray, mode="F").resize((grid, grid), Image.BILINEAR),
            dtype=np.float32,
        )
    return small.astype(np.float64).ravel()


def _make_thumbnail_model(name: str, grid: int) -> EmbeddingModel:
    def embed(images: Sequence[np.ndarray]) -> np.ndarray:
        return np.stack([_thumbnail(px, grid) for px in images]).astype(np.float32)

    return EmbeddingModel(name=name, dimension=grid * grid, _embed=embed)


def _make_projection_model(name: str, grid: int, dim: int) -> EmbeddingModel:
    seed = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")
    rng = np.random.default_rng(seed >> 1)
    projection = rng.standard_normal((grid * grid, dim)) / np.sqrt(grid * grid)

    def embed(images: Sequence[np.ndarray]) -> np.ndarray:
        rows = np.empty((len(images), dim), dtype=np.float64)
        for i, px in enumerate(images):
            thumb = _thumbnail(px, grid)
            spread = thumb.std()
            unit = (thumb - thumb.mean()) / spread if spread > 0 else np.zeros_like(thumb)
            rows[i] = unit @ projection
        return rows.astype(np.float32)

    return EmbeddingModel(name=name, dimension=dim, _embed=embed)


def _make_openclip_model(name: str, checkpoint: str) -> EmbeddingModel:
    try:
        import open_clip  # noqa: F401  (optional dependency)
    except ImportError as exc:
        raise ModelUnavailableError(
            f"model {name!r} needs the optional 'open_clip_torch' package; "
            "install it or choose a built-in model"
        ) from exc
    raise ModelUnavailableError(
        f"open_clip checkpoint loading for {name!r} is not wired up in this build"
    )


_THUMBNAIL_RE = re.compile(r"thumbnail-(\d+)$")
_PROJECTION_RE = re.compile(r"projection-(\d+)-(\d+)$")


def available_models() -> list[str]:
    """Human-readable identifier patterns accepted by get_model."""
    return ["thumbnail-<grid>", "projection-<grid>-<dim>", "openclip:<checkpoint>"]


def get_model(identifier: str) -> EmbeddingModel:
    """Build the embedding model named by an identifier string."""
    if m := _THUMBNAIL_RE.fullmatch(identifier):
        grid = int(m.group(1))
        if grid < 1:
            raise ModelUnavailableError(f"thumbnail grid must be >= 1: {identifier!r}")
        return _make_thumbnail_model(identifier, grid)
    if m := _PROJECTION_RE.fullmatch(identifier):
        grid, dim = int(m.group(1)), int(m.group(2))
        if grid < 1 or dim < 1:
            raise ModelUnavailableError(
                f"projection grid and dimension must be >= 1: {identifier!r}"
            )
        return _make_projection_model(identifier, grid, dim)
    if identifier.startswith("openclip:"):
        return _make_openclip_model(identifier, identifier.split(":", 1)[1])
    raise ModelUnavailableError(
        f"unknown embedding model {identifier!r}; expected one of "
        f"{available_models()}"
    )
