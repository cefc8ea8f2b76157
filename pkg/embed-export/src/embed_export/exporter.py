"""Embedding export: dataset directory in, EMB1 file plus sidecar out."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .emb1 import read_emb1_header, write_emb1
from .models import get_model


class ExportError(RuntimeError):
    """Unusable input directory, image, or output target."""


@dataclass(frozen=True)
class ExportJob:
    """One export: which images, where to, with which model."""

    input_dir: Path
    output: Path
    model: str
    batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _manifest_entries(input_dir: Path) -> list[tuple[str, Path]]:
    """(id, image path) pairs in manifest order; ids are patient/item-index."""
    manifest_path = input_dir / "manifest.json"
    if not manifest_path.is_file():
        raise ExportError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        patients = manifest["patients"]
        entries = [
            (f"{patient['patient_id']}/{index}", input_dir / item["image"])
            for patient in patients
            for index, item in enumerate(patient["items"])
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ExportError(f"malformed manifest {manifest_path}: {exc}") from exc
    if not entries:
        raise ExportError(f"manifest lists no images: {manifest_path}")
    return entries


def _load_image(path: Path) -> np.ndarray:
    """Pixels as float32 in [0, 1], scaled by the file's bit depth."""
    try:
        with Image.open(path) as handle:
            handle.load()
            if handle.mode in ("I;16", "I"):
                return np.asarray(handle, dtype=np.float32) / 65535.0
            if handle.mode == "L":
                return np.asarray(handle, dtype=np.float32) / 255.0
            if handle.mode == "RGB":
                return np.asarray(handle, dtype=np.float32) / 255.0
            raise ExportError(f"unsupported image mode {handle.mode!r}: {path}")
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ExportError(f"unreadable image {path}: {exc}") from exc


def export_embeddings(job: ExportJob) -> Path:
    """Embed every image the manifest lists and write the EMB1 file.

    The batch size bounds peak memory only; vectors are a per-image function
    of the pixels, so any batch size produces byte-identical output. The
    model identifier is recorded next to the output in a sidecar text file.
    Refuses to overwrite an existing output whose dimension differs, which
    would silently invalidate whatever already consumes that file.
    """
    entries = _manifest_entries(Path(job.input_dir))
    model = get_model(job.model)

    output = Path(job.output)
    if output.exists():
        count, dim = read_emb1_header(output)
        if dim != model.dimension:
            raise ExportError(
                f"existing {output} holds {count} vectors of dimension {dim}, "
                f"but model {job.model!r} produces dimension {model.dimension}"
            )

    blocks = []
    for start in range(0, len(entries), job.batch_size):
        batch = entries[start:start + job.batch_size]
        blocks.append(model.embed_batch([_load_image(path) for _, path in batch]))
    matrix = np.concatenate(blocks, axis=0)

    write_emb1(output, matrix, [ref for ref, _ in entries])
    sidecar = output.with_name(output.name + ".model.txt")
    sidecar.write_text(job.model + "\n", encoding="utf-8")
    return output
