"""Memorization gate: embedding-space threshold calibration and filtering.

The threshold is calibrated from the real data alone: patients are split in
half, each first-half image is matched to its nearest second-half neighbor in
embedding space, and the p-th percentile (nearest-rank) of those distances
becomes the cutoff. A synthetic image closer than the cutoff to *any* real
image is declared memorized and discarded. All nearest-neighbor searches are
exact brute force; approximate indices are deliberately not supported.

Embeddings come from a provider. The built-in toy provider (16x16 bilinear
thumbnail through a fixed random projection) keeps the pipeline dependency
free; learned embeddings arrive through EMB1 files written by the export
adapter and are served by :class:`PrecomputedEmbeddingProvider`.
"""

from __future__ import annotations

import csv
import random
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .core import (
    DataError,
    Dataset,
    Image2D,
    nearest_rank_percentile,
    nn_search,
    resize_bilinear,
)

DEFAULT_PERCENTILE = 5.0
_TOY_GRID = 16
_TOY_DIM = 64
_TOY_PROJECTION_SEED = 74140801


class EmbeddingProvider(Protocol):
    """Deterministic image -> vector mapping; same bytes give the same vector."""

    name: str
    dimension: int

    def embed(self, images: Sequence[Image2D], refs: Sequence[str]) -> np.ndarray:
        """Return an (n, dimension) float32 matrix, one row per image, in order."""
        ...


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    image_ref: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 1:
            raise ValueError("embedding values must be a 1D vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding components must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


class ToyEmbeddingProvider:
    """Standardized thumbnail + fixed seeded random projection.

    Each image is reduced to a small thumbnail that is shifted to zero mean
    and scaled to unit spread before projection, so the embedding ignores
    brightness and contrast: stored images are re-normalized per image when
    loaded, and copy detection must not be fooled by that affine remapping.
    A constant image has no spread and maps to the zero vector.
    """

    name = f"toy-proj-{_TOY_DIM}"
    dimension = _TOY_DIM

    def __init__(self):
        rng = np.random.default_rng(_TOY_PROJECTION_SEED)
        n_in = _TOY_GRID * _TOY_GRID
        self._projection = rng.standard_normal((n_in, _TOY_DIM)).astype(np.float64)
        self._projection /= np.sqrt(n_in)

    def embed(self, images: Sequence[Image2D], refs: Sequence[str]) -> np.ndarray:
        if len(images) == 0:
            raise ValueError("cannot embed an empty image list")
        rows = np.empty((len(images), _TOY_GRID * _TOY_GRID), dtype=np.float64)
        for i, img in enumerate(images):
            px = img.pixels
            if px.ndim == 3:
                px = px.mean(axis=2)
            thumb = resize_bilinear(px, (_TOY_GRID, _TOY_GRID)).astype(np.float64).ravel()
            spread = thumb.std()
            rows[i] = (thumb - thumb.mean()) / spread if spread > 0 else 0.0
        return (rows @ self._projection).astype(np.float32)


class PrecomputedEmbeddingProvider:
    """Serves vectors looked up by image ref, e.g. loaded from an EMB1 file."""

    def __init__(self, matrix: np.ndarray, ids: Sequence[str], name: str = "precomputed"):
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValueError("matrix rows must match id count")
        self.name = name
        self.dimension = int(matrix.shape[1])
        self._by_ref = {ref: matrix[i] for i, ref in enumerate(ids)}
        if len(self._by_ref) != len(ids):
            raise DataError("duplicate ids in embedding store")

    def embed(self, images: Sequence[Image2D], refs: Sequence[str]) -> np.ndarray:
        try:
            return np.stack([self._by_ref[r] for r in refs])
        except KeyError as exc:
            raise DataError(f"no embedding stored for ref {exc.args[0]!r}") from None


def dataset_image_refs(d: Dataset) -> list[str]:
    """Canonical per-image refs, '<patient_id>/<item_index>', dataset order."""
    return [f"{p.patient_id}/{i}" for p in d.patients for i in range(len(p.items))]


def embed_dataset(images: Sequence[Image2D], provider: EmbeddingProvider,
                  refs: Sequence[str] | None = None) -> list[EmbeddingVector]:
    """One vector per image, order-preserving; refs default to list indices."""
    if len(images) == 0:
        raise ValueError("cannot embed an empty image list")
    if refs is None:
        refs = [str(i) for i in range(len(images))]
    if len(refs) != len(images):
        raise ValueError("refs must match images in length")
    matrix = provider.embed(images, refs)
    if matrix.shape != (len(images), provider.dimension):
        raise DataError(
            f"provider {provider.name!r} returned shape {matrix.shape}, "
            f"expected ({len(images)}, {provider.dimension})"
        )
    return [EmbeddingVector(values=matrix[i], image_ref=refs[i])
            for i in range(len(images))]


# ---------------------------------------------------------------------------
# Exact nearest-neighbor audit
# ---------------------------------------------------------------------------

def nearest_neighbor_audit(
    set_a: Sequence[EmbeddingVector], set_b: Sequence[EmbeddingVector],
) -> list[tuple[str, str, float]]:
    """Brute-force NN of each A item in B: (ref_a, ref_b, distance) triples."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("both embedding sets must be non-empty")
    a = np.stack([v.values for v in set_a]).astype(np.float64)
    b = np.stack([v.values for v in set_b]).astype(np.float64)
    dists, idx = nn_search(a, b)
    return [(set_a[i].image_ref, set_b[idx[i]].image_ref, float(dists[i]))
            for i in range(len(set_a))]


# ---------------------------------------------------------------------------
# Threshold calibration and filtering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThresholdCalibration:
    """Real-to-real NN distance distribution and its percentile cutoff."""

    p: float
    split_seed: int
    distances: tuple[float, ...]        # sorted ascending
    threshold: float
    dimension: int

    def __post_init__(self):
        if any(d < 0 for d in self.distances):
            raise ValueError("distances must be non-negative")
        if list(self.distances) != sorted(self.distances):
            raise ValueError("distances must be sorted ascending")


def split_patients_for_calibration(d: Dataset, seed: int) -> tuple[list[str], list[str]]:
    """Seeded 50/50 patient split; an odd patient goes to the second subset."""
    ids = sorted(p.patient_id for p in d.patients)
    if len(ids) < 2:
        raise DataError("calibration needs at least 2 patients")
    rng = random.Random(seed)
    rng.shuffle(ids)
    half = len(ids) // 2
    return ids[:half], ids[half:]


def calibrate_threshold(real: Dataset, provider: EmbeddingProvider,
                        p: float = DEFAULT_PERCENTILE, seed: int = 0) -> ThresholdCalibration:
    """Compute the memorization cutoff from real data alone."""
    if not 0.0 <= p <= 100.0:
        raise ValueError("percentile must be in [0, 100]")
    first, second = split_patients_for_calibration(real, seed)

    by_patient = {pt.patient_id: pt for pt in real.patients}

    def embed_subset(patient_ids):
        images, refs = [], []
        for pid in patient_ids:
            for i, (img, _) in enumerate(by_patient[pid].items):
                images.append(img)
                refs.append(f"{pid}/{i}")
        return provider.embed(images, refs)

    emb1 = embed_subset(first)
    emb2 = embed_subset(second)
    dists, _ = nn_search(emb1, emb2)
    dists = np.sort(dists)
    return ThresholdCalibration(
        p=p, split_seed=seed,
        distances=tuple(float(x) for x in dists),
        threshold=nearest_rank_percentile(dists, p),
        dimension=provider.dimension,
    )


@dataclass(frozen=True)
class MemorizationReport:
    """Per-image NN audit of a synthetic set against all real images."""

    entries: tuple[tuple[str, str, float, str], ...]   # (ref, nn_ref, dist, verdict)
    threshold: float

    @property
    def n_total(self) -> int:
        return len(self.entries)

    @property
    def n_discarded(self) -> int:
        return sum(1 for e in self.entries if e[3] == "discarded")

    @property
    def n_kept(self) -> int:
        return self.n_total - self.n_discarded

    def kept_refs(self) -> list[str]:
        return [e[0] for e in self.entries if e[3] == "kept"]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["image_ref", "nn_ref", "distance", "verdict"])
            for ref, nn_ref, dist, verdict in self.entries:
                writer.writerow([ref, nn_ref, repr(dist), verdict])
        return path


def filter_synthetic(syn: Sequence[Image2D], real: Dataset,
                     cal: ThresholdCalibration, provider: EmbeddingProvider,
                     syn_refs: Sequence[str] | None = None) -> MemorizationReport:
    """Discard every synthetic image whose NN distance to real data is below
    the calibrated threshold (strictly below: an image exactly at the
    threshold is kept)."""
    if len(syn) == 0:
        raise ValueError("synthetic set is empty")
    if provider.dimension != cal.dimension:
        raise DataError(
            f"provider dimension {provider.dimension} does not match "
            f"calibration dimension {cal.dimension}"
        )
    if syn_refs is None:
        syn_refs = [f"syn/{i}" for i in range(len(syn))]

    real_refs = dataset_image_refs(real)
    real_emb = provider.embed(real.images(), real_refs)
    syn_emb = provider.embed(list(syn), list(syn_refs))
    dists, idx = nn_search(syn_emb, real_emb)

    entries = []
    for i in range(len(syn)):
        verdict = "discarded" if dists[i] < cal.threshold else "kept"
        entries.append((syn_refs[i], real_refs[idx[i]], float(dists[i]), verdict))
    return MemorizationReport(entries=tuple(entries), threshold=cal.threshold)


# ---------------------------------------------------------------------------
# Correlation-based cross-check
# ---------------------------------------------------------------------------

def _pearson_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlation of rows of a against rows of b.

    Rows with zero variance yield NaN against everything (undefined).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    an = np.sqrt((ac * ac).sum(axis=1))
    bn = np.sqrt((bc * bc).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (ac @ bc.T) / np.outer(an, bn)
    corr[an == 0, :] = np.nan
    corr[:, bn == 0] = np.nan
    return corr


def correlation_flagging(
    syn: Sequence[EmbeddingVector], real: Sequence[EmbeddingVector],
    tau: float | str = "auto", split_seed: int = 0,
) -> list[tuple[str, str]]:
    """Flag synthetic items whose max correlation to any real item exceeds tau.

    tau == "auto" derives the cutoff as the nearest-rank 95th percentile of
    real-to-real max correlations under a seeded 50/50 split. Zero-variance
    vectors make correlation undefined; such items are reported as
    "indeterminate" rather than silently flagged. Returns (ref, verdict) with
    verdict in {"flagged", "clear", "indeterminate"}.
    """
    if len(syn) == 0 or len(real) == 0:
        raise ValueError("both embedding sets must be non-empty")
    dim = len(syn[0].values)
    if dim < 2:
        raise ValueError("correlation needs vectors of dimension >= 2")
    syn_m = np.stack([v.values for v in syn]).astype(np.float64)
    real_m = np.stack([v.values for v in real]).astype(np.float64)
    if real_m.shape[1] != dim:
        raise ValueError("synthetic and real dimensions differ")

    if tau == "auto":
        if len(real) < 2:
            raise ValueError("auto tau needs at least 2 real vectors")
        order = list(range(len(real)))
        random.Random(split_seed).shuffle(order)
        half = len(order) // 2
        corr = _pearson_matrix(real_m[order[:half]], real_m[order[half:]])
        maxima = np.nanmax(corr, axis=1)
        maxima = np.sort(maxima[~np.isnan(maxima)])
        if len(maxima) == 0:
            raise ValueError("auto tau undefined: all real correlations undefined")
        tau_value = nearest_rank_percentile(maxima, 95.0)
    else:
        tau_value = float(tau)

    corr = _pearson_matrix(syn_m, real_m)
    out = []
    for i, vec in enumerate(syn):
        row = corr[i]
        defined = row[~np.isnan(row)]
        if len(defined) == 0:
            out.append((vec.image_ref, "indeterminate"))
        elif defined.max() > tau_value:
            out.append((vec.image_ref, "flagged"))
        else:
            out.append((vec.image_ref, "clear"))
    return out


# ---------------------------------------------------------------------------
# EMB1 binary embedding files
# ---------------------------------------------------------------------------

EMB1_MAGIC = b"EMB1"


def write_emb1(path: str | Path, matrix: np.ndarray, ids: Sequence[str]) -> Path:
    """Write an EMB1 file: magic, u32 count, u32 dim, float32 data, id lines."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("embedding matrix must be 2D")
    if matrix.shape[0] != len(ids):
        raise ValueError("id count must match matrix rows")
    for ref in ids:
        if "\n" in ref or "\r" in ref:
            raise ValueError(f"id {ref!r} contains a newline")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes(order="C"))
        fh.write(("\n".join(ids) + "\n" if ids else "").encode("utf-8"))
    return path


def read_emb1(path: str | Path) -> tuple[np.ndarray, list[str]]:
    """Read an EMB1 file back into (float32 matrix, id list)."""
    raw = Path(path).read_bytes()
    if raw[:4] != EMB1_MAGIC:
        raise DataError(f"not an EMB1 file: {path}")
    count, dim = struct.unpack_from("<II", raw, 4)
    data_end = 12 + 4 * count * dim
    if len(raw) < data_end:
        raise DataError(f"truncated EMB1 file: {path}")
    matrix = np.frombuffer(raw[12:data_end], dtype="<f4").reshape(count, dim).copy()
    ids = raw[data_end:].decode("utf-8").splitlines()
    if len(ids) != count:
        raise DataError(
            f"EMB1 id count {len(ids)} does not match header count {count}: {path}"
        )
    return matrix, ids
