"""Dataset representation, ingestion, fingerprinting, and patient-level fold splits.

A dataset lives in a directory with a ``manifest.json`` naming the site, the
modality, the foreground class count, and one entry per patient with relative
paths to PNG images (8/16-bit grayscale or 8-bit RGB) and optional 8-bit mask
PNGs. Intensities are min-max normalized to [0, 1] at load time; geometry,
spacing, and label values are preserved exactly, so fingerprints survive a
save/load round trip.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


class DataError(Exception):
    """Raised when an on-disk dataset or artifact violates its contract."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Image2D:
    """A single 2D image: float pixels in [0, 1], physical spacing in mm."""

    pixels: np.ndarray              # (H, W) or (H, W, 3) float32 in [0, 1]
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            pass
        elif px.ndim == 3 and px.shape[2] == 3:
            pass
        else:
            raise ValueError(f"pixels must be (H, W) or (H, W, 3), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must have height >= 1 and width >= 1")
        if not np.all(np.isfinite(px)):
            raise ValueError("image intensities must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ValueError("spacing components must be > 0")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3


@dataclass(frozen=True)
class SegMask:
    """Integer label grid paired with an image; values in {0..num_classes}."""

    labels: np.ndarray              # (H, W) integer grid
    num_classes: int                # count of foreground classes C; labels <= C

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"labels must be 2D, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            lab = lab.astype(np.int32)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if lab.min() < 0 or lab.max() > self.num_classes:
            raise ValueError(
                f"label values must be in 0..{self.num_classes}, "
                f"found range {lab.min()}..{lab.max()}"
            )
        lab = lab.astype(np.int32)
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class PatientRecord:
    """All items of one patient: (image, optional mask) pairs."""

    patient_id: str
    items: tuple[tuple[Image2D, SegMask | None], ...]

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if len(self.items) == 0:
            raise ValueError(f"patient {self.patient_id!r} has no items")
        for img, mask in self.items:
            if mask is not None and mask.shape != (img.height, img.width):
                raise DataError(
                    f"shape mismatch for patient {self.patient_id!r}: "
                    f"image {(img.height, img.width)} vs mask {mask.shape}"
                )


@dataclass(frozen=True)
class Dataset:
    """A site-local collection of patients."""

    site_id: str
    patients: tuple[PatientRecord, ...]
    modality: str = ""
    num_classes: int = 1

    def __post_init__(self):
        if not self.site_id:
            raise ValueError("site_id must be non-empty")
        ids = [p.patient_id for p in self.patients]
        if len(ids) != len(set(ids)):
            raise ValueError("patient ids must be unique within a dataset")

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    @property
    def n_images(self) -> int:
        return sum(len(p.items) for p in self.patients)

    def images(self) -> list[Image2D]:
        """All images in deterministic (patient_id, item index) order."""
        return [img for p in self.patients for img, _ in p.items]

    def labeled_items(self) -> list[tuple[Image2D, SegMask]]:
        """All (image, mask) pairs that carry a mask, deterministic order."""
        return [(img, m) for p in self.patients for img, m in p.items if m is not None]


@dataclass(frozen=True)
class DatasetFingerprint:
    """Summary statistics that drive all architecture and budget derivation."""

    median_size: tuple[int, int]            # (rows, cols) in pixels
    median_spacing: tuple[float, float]     # (mm, mm)
    n_images: int
    n_patients: int
    channels: int
    num_classes: int

    def __post_init__(self):
        if self.median_size[0] <= 0 or self.median_size[1] <= 0:
            raise ValueError("median_size components must be > 0")
        if self.median_spacing[0] <= 0 or self.median_spacing[1] <= 0:
            raise ValueError("median_spacing components must be > 0")
        if not (self.n_images >= self.n_patients >= 1):
            raise ValueError("need n_images >= n_patients >= 1")

    def to_dict(self) -> dict:
        return {
            "median_size": list(self.median_size),
            "median_spacing": list(self.median_spacing),
            "n_images": self.n_images,
            "n_patients": self.n_patients,
            "channels": self.channels,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetFingerprint":
        return cls(
            median_size=(int(d["median_size"][0]), int(d["median_size"][1])),
            median_spacing=(float(d["median_spacing"][0]), float(d["median_spacing"][1])),
            n_images=int(d["n_images"]),
            n_patients=int(d["n_patients"]),
            channels=int(d["channels"]),
            num_classes=int(d["num_classes"]),
        )


@dataclass(frozen=True)
class FoldSplit:
    """Patient-level split for one cross-validation fold (3:1:1 folds)."""

    fold_index: int
    train_patients: frozenset[str]
    val_patients: frozenset[str]
    test_patients: frozenset[str]

    def __post_init__(self):
        if not 0 <= self.fold_index <= 4:
            raise ValueError("fold_index must be in 0..4")
        roles = [self.train_patients, self.val_patients, self.test_patients]
        for i in range(3):
            for j in range(i + 1, 3):
                if roles[i] & roles[j]:
                    raise ValueError("a patient appears in two roles of one fold")


# ---------------------------------------------------------------------------
# Canonical serialization helpers (shared by planner / federation manifests)
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    """Stable JSON encoding: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def lower_median(values) -> float:
    """Median with the lower element taken for even counts (no averaging)."""
    s = sorted(values)
    if not s:
        raise ValueError("lower_median of empty sequence")
    return s[(len(s) - 1) // 2]


def nearest_rank_percentile(sorted_values, p: float) -> float:
    """1-based ceil(p/100 * n) order statistic; p = 0 gives the minimum."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("percentile of empty sequence")
    if not 0.0 <= p <= 100.0:
        raise ValueError("percentile must be in [0, 100]")
    # Multiply before dividing so integral ranks stay exact in float.
    rank = max(1, min(n, math.ceil(p * n / 100.0)))
    return float(sorted_values[rank - 1])


def nn_search(queries: np.ndarray, targets: np.ndarray,
              block: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Exact L2 nearest neighbor of each query row among target rows.

    Returns (distances, indices); ties resolve to the lowest target index.
    """
    q = np.asarray(queries, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if q.ndim != 2 or t.ndim != 2 or q.shape[1] != t.shape[1]:
        raise ValueError("queries and targets must be 2D with equal dimension")
    if len(t) == 0:
        raise ValueError("target set is empty")
    dists = np.empty(len(q), dtype=np.float64)
    idx = np.empty(len(q), dtype=np.int64)
    for start in range(0, len(q), block):
        chunk = q[start:start + block]
        diff = chunk[:, None, :] - t[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(chunk))
        dists[start:start + block] = np.sqrt(d2[rows, best])
        idx[start:start + block] = best
    return dists, idx


def resize_bilinear(pixels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resample to (rows, cols) using half-pixel-centered sampling."""
    src = np.asarray(pixels, dtype=np.float64)
    in_h, in_w = src.shape[:2]
    out_h, out_w = out_hw
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1 per axis")
    if (in_h, in_w) == (out_h, out_w):
        return src.astype(np.float32)

    def axis_coords(n_in, n_out):
        scale = n_in / n_out
        x = (np.arange(n_out) + 0.5) * scale - 0.5
        x = np.clip(x, 0.0, n_in - 1.0)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = x - lo
        return lo, hi, frac

    r0, r1, fr = axis_coords(in_h, out_h)
    c0, c1, fc = axis_coords(in_w, out_w)
    if src.ndim == 3:
        fr = fr[:, None, None]
        fc = fc[None, :, None]
    else:
        fr = fr[:, None]
        fc = fc[None, :]
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bot = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    out = top * (1 - fr) + bot * fr
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Load / save
# ---------------------------------------------------------------------------

_GRAY_MODES = {"L": 255.0, "I": 65535.0, "I;16": 65535.0}


def _load_image(path: Path, spacing: tuple[float, float]) -> Image2D:
    with PILImage.open(path) as im:
        mode = im.mode
        if mode in _GRAY_MODES:
            arr = np.asarray(im, dtype=np.float64)
        elif mode == "RGB":
            arr = np.asarray(im, dtype=np.float64)
        else:
            raise DataError(f"unsupported image mode {mode!r} in {path}")
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    return Image2D(pixels=arr.astype(np.float32), spacing=spacing)


def _load_mask(path: Path, num_classes: int) -> SegMask:
    with PILImage.open(path) as im:
        if im.mode == "P":
            im = im.convert("L")
        if im.mode not in ("L", "I", "I;16"):
            raise DataError(f"unsupported mask mode {im.mode!r} in {path}")
        lab = np.asarray(im).astype(np.int32)
    if lab.max() > num_classes:
        raise DataError(
            f"label value {lab.max()} >= declared class count + 1 "
            f"({num_classes + 1}) in {path}"
        )
    return SegMask(labels=lab, num_classes=num_classes)


def load_dataset(root: str | Path) -> Dataset:
    """Load a dataset directory; see the module docstring for the layout."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"missing manifest: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)

    for key in ("site_id", "num_classes", "patients"):
        if key not in manifest:
            raise DataError(f"manifest missing required key {key!r}")
    num_classes = int(manifest["num_classes"])

    patients = []
    for pat in sorted(manifest["patients"], key=lambda p: p["patient_id"]):
        spacing = tuple(float(s) for s in pat.get("spacing", (1.0, 1.0)))
        items = []
        for entry in pat["items"]:
            img = _load_image(root / entry["image"], spacing)
            mask = None
            if entry.get("mask"):
                mask = _load_mask(root / entry["mask"], num_classes)
                if mask.shape != (img.height, img.width):
                    raise DataError(
                        f"shape mismatch: image {entry['image']} is "
                        f"{(img.height, img.width)}, mask {entry['mask']} is {mask.shape}"
                    )
            items.append((img, mask))
        patients.append(PatientRecord(patient_id=pat["patient_id"], items=tuple(items)))

    return Dataset(
        site_id=manifest["site_id"],
        patients=tuple(patients),
        modality=manifest.get("modality", ""),
        num_classes=num_classes,
    )


def save_dataset(d: Dataset, root: str | Path) -> Path:
    """Write a dataset directory (deterministic bytes for fixed content).

    Grayscale images are stored as 16-bit PNG, RGB as 8-bit, masks as 8-bit.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    manifest = {
        "site_id": d.site_id,
        "modality": d.modality,
        "num_classes": d.num_classes,
        "patients": [],
    }
    for pat in d.patients:
        spacing = pat.items[0][0].spacing
        entry = {"patient_id": pat.patient_id, "spacing": list(spacing), "items": []}
        for idx, (img, mask) in enumerate(pat.items):
            stem = f"{pat.patient_id}_{idx:04d}"
            img_rel = f"images/{stem}.png"
            if img.channels == 1:
                arr16 = np.round(img.pixels * 65535.0).astype("<u2")
                PILImage.fromarray(arr16).save(root / img_rel)
            else:
                arr8 = np.round(img.pixels * 255.0).astype(np.uint8)
                PILImage.fromarray(arr8, mode="RGB").save(root / img_rel)
            item = {"image": img_rel}
            if mask is not None:
                mask_rel = f"masks/{stem}.png"
                PILImage.fromarray(mask.labels.astype(np.uint8), mode="L").save(root / mask_rel)
                item["mask"] = mask_rel
            entry["items"].append(item)
        manifest["patients"].append(entry)

    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        fh.write(canonical_json(manifest))
    return root


# ---------------------------------------------------------------------------
# Fingerprint and fold splits
# ---------------------------------------------------------------------------

def fingerprint_dataset(d: Dataset) -> DatasetFingerprint:
    """Per-axis lower medians of sizes/spacings plus exact counts."""
    images = d.images()
    if not images:
        raise DataError("cannot fingerprint an empty dataset")
    channels = {img.channels for img in images}
    if len(channels) > 1:
        raise DataError(f"mixed channel counts in dataset: {sorted(channels)}")
    return DatasetFingerprint(
        median_size=(
            int(lower_median(img.height for img in images)),
            int(lower_median(img.width for img in images)),
        ),
        median_spacing=(
            float(lower_median(img.spacing[0] for img in images)),
            float(lower_median(img.spacing[1] for img in images)),
        ),
        n_images=d.n_images,
        n_patients=d.n_patients,
        channels=channels.pop(),
        num_classes=d.num_classes,
    )


N_FOLDS = 5


def make_fold_splits(d: Dataset, seed: int) -> list[FoldSplit]:
    """Shuffle patients with a seeded PRNG and build the 5 rotated splits.

    Patients are partitioned into 5 near-equal folds (remainder going to the
    lowest-index folds). Fold i tests on fold i, validates on fold (i+4) % 5,
    and trains on the remaining three folds.
    """
    ids = sorted(p.patient_id for p in d.patients)
    if len(ids) < N_FOLDS:
        raise DataError(f"need at least {N_FOLDS} patients, got {len(ids)}")
    rng = random.Random(seed)
    rng.shuffle(ids)

    base, rem = divmod(len(ids), N_FOLDS)
    folds, start = [], 0
    for i in range(N_FOLDS):
        size = base + (1 if i < rem else 0)
        folds.append(ids[start:start + size])
        start += size

    splits = []
    for i in range(N_FOLDS):
        train: set[str] = set()
        for off in (1, 2, 3):
            train.update(folds[(i + off) % N_FOLDS])
        splits.append(FoldSplit(
            fold_index=i,
            train_patients=frozenset(train),
            val_patients=frozenset(folds[(i + 4) % N_FOLDS]),
            test_patients=frozenset(folds[i]),
        ))
    return splits


def subset_by_patients(d: Dataset, patient_ids) -> Dataset:
    """Restrict a dataset to the given patient ids (order preserved)."""
    wanted = set(patient_ids)
    kept = tuple(p for p in d.patients if p.patient_id in wanted)
    if not kept:
        raise DataError("patient subset is empty")
    return Dataset(site_id=d.site_id, patients=kept,
                   modality=d.modality, num_classes=d.num_classes)
