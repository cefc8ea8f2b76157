"""Generator/segmenter contracts with deterministic desk-scale references.

The reference implementations stand in for full generative and segmentation
networks so the whole orchestration pipeline runs in seconds and produces
measurable transfer effects:

* :class:`ReferenceGenerator` is a tile-mosaic sampler. Training resizes
  every image to the plan's output size, splits it into a k x k grid, and
  keeps a per-slot tile library; the training budget is spent as seeded image
  presentations whose counts become the library's sampling weights. Samples
  draw one library entry per slot plus bounded noise. Configured with a
  single-entry library and zero noise it reproduces training images exactly,
  which is how the memorization filter is exercised in the negative
  direction. The generator consumes images only — masks never enter its
  signature.

* :class:`ReferenceSegmenter` scores each pixel per class as
  ``prior_logit(class, position) - GAMMA * (value - prototype(class))^2`` and
  predicts the argmax. Training moves the prior map and the prototypes toward
  their full-batch targets with per-epoch step sizes from the learning-rate
  schedule, so pretrained state decays only partially during fine-tuning and
  cross-site knowledge measurably survives.

Both models are deterministic given seed and data order, expose a flat
parameter-vector view that round-trips losslessly, and serialize to versioned
binary files.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DataError, Image2D, SegMask, canonical_json, resize_bilinear
from .planner import GanPlan, LrSchedule, SegPlan, TrainingBudget, lr_at, plan_hash

PRESENTATIONS_PER_STEP = 1000
DEFAULT_TILE_GRID = 4
DEFAULT_NOISE_AMPLITUDE = 0.05
GAMMA = 15.0               # weight of the intensity term against the prior
PRIOR_EPS = 1e-3           # keeps log-frequencies finite for unseen classes

SEGMENTER_MAGIC = b"SFM1"
GENERATOR_MAGIC = b"SFG1"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Reference generator
# ---------------------------------------------------------------------------

def _tile_bounds(extent: int, k: int) -> list[tuple[int, int]]:
    """k contiguous index ranges covering [0, extent), sizes as even as possible."""
    cuts = [round(i * extent / k) for i in range(k + 1)]
    return [(cuts[i], cuts[i + 1]) for i in range(k)]


class ReferenceGenerator:
    """Tile-mosaic image sampler honoring the GAN plan's output size."""

    def __init__(self, plan: GanPlan, budget: TrainingBudget, seed: int = 0,
                 grid: int = DEFAULT_TILE_GRID,
                 noise_amplitude: float = DEFAULT_NOISE_AMPLITUDE,
                 library_cap: int | None = None):
        if grid < 1:
            raise ValueError("tile grid must be at least 1")
        if noise_amplitude < 0:
            raise ValueError("noise amplitude must be non-negative")
        if library_cap is not None and library_cap < 1:
            raise ValueError("library cap must be at least 1 when set")
        self.plan = plan
        self.budget = budget
        self.seed = seed
        self.grid = grid
        self.noise_amplitude = noise_amplitude
        self.library_cap = library_cap
        self.presentations = 0
        self.library_images: np.ndarray | None = None   # (n, H, W[, 3]) float32
        self.weights: np.ndarray | None = None          # (n,) float64, sums to 1
        self.spacing: tuple[float, float] = (1.0, 1.0)

    @property
    def trained(self) -> bool:
        return self.library_images is not None

    def _grid_shape(self) -> tuple[int, int]:
        h, w = self.plan.output_size
        return min(self.grid, h), min(self.grid, w)

    def tile_library_sizes(self) -> dict[tuple[int, int], int]:
        """Entries per tile slot (uniform by construction)."""
        if not self.trained:
            raise RuntimeError("generator is not trained")
        kr, kc = self._grid_shape()
        n = len(self.library_images)
        return {(i, j): n for i in range(kr) for j in range(kc)}


def fit_generator(g: ReferenceGenerator, train: list[Image2D]) -> ReferenceGenerator:
    """Spend the training budget as seeded presentations and build the library."""
    if len(train) == 0:
        raise DataError("generator training set is empty")
    out_hw = g.plan.output_size
    resized = np.stack([
        resize_bilinear(img.pixels, out_hw).astype(np.float32) for img in train
    ])

    rng = np.random.default_rng(g.seed)
    total = g.budget.n_steps * PRESENTATIONS_PER_STEP
    counts = np.zeros(len(train), dtype=np.int64)
    remaining = total
    while remaining > 0:
        chunk = min(remaining, 1_000_000)
        counts += np.bincount(rng.integers(0, len(train), size=chunk),
                              minlength=len(train))
        remaining -= chunk

    cap = len(train) if g.library_cap is None else min(g.library_cap, len(train))
    g.library_images = resized[:cap]
    capped = counts[:cap].astype(np.float64)
    g.weights = (capped / capped.sum() if capped.sum() > 0
                 else np.full(cap, 1.0 / cap))
    g.presentations = total
    g.spacing = train[0].spacing
    return g


def sample(g: ReferenceGenerator, n: int, seed: int | None = None) -> list[Image2D]:
    """Draw n mosaic images of plan.output_size with values in [0, 1]."""
    if not g.trained:
        raise RuntimeError("generator is not trained")
    if n < 0:
        raise ValueError("sample count must be non-negative")
    if n == 0:
        return []
    rng = np.random.default_rng(g.seed if seed is None else seed)
    h, w = g.plan.output_size
    kr, kc = g._grid_shape()
    row_bounds = _tile_bounds(h, kr)
    col_bounds = _tile_bounds(w, kc)
    n_lib = len(g.library_images)

    out = []
    for _ in range(n):
        picks = rng.choice(n_lib, size=(kr, kc), p=g.weights)
        canvas = np.empty_like(g.library_images[0])
        for i, (r0, r1) in enumerate(row_bounds):
            for j, (c0, c1) in enumerate(col_bounds):
                canvas[r0:r1, c0:c1] = g.library_images[picks[i, j]][r0:r1, c0:c1]
        if g.noise_amplitude > 0:
            canvas = canvas + rng.uniform(
                -g.noise_amplitude, g.noise_amplitude, size=canvas.shape
            ).astype(np.float32)
        out.append(Image2D(pixels=np.clip(canvas, 0.0, 1.0), spacing=g.spacing))
    return out


def save_generator(g: ReferenceGenerator, path: str | Path,
                   seg_plan_hash: str) -> Path:
    """Versioned binary file: magic, version, JSON header, weights, images."""
    if not g.trained:
        raise RuntimeError("generator is not trained")
    imgs = np.ascontiguousarray(g.library_images, dtype="<f4")
    weights = np.ascontiguousarray(g.weights, dtype="<f8")
    header = canonical_json({
        "grid": g.grid,
        "noise_amplitude": g.noise_amplitude,
        "library_cap": g.library_cap,
        "seed": g.seed,
        "presentations": g.presentations,
        "spacing": list(g.spacing),
        "image_shape": list(imgs.shape),
        "plan_hash": seg_plan_hash,
        "budget": {"n_steps": g.budget.n_steps, "n_gen": g.budget.n_gen,
                   "warmup_fraction": g.budget.warmup_fraction,
                   "epochs": g.budget.epochs},
    }).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(GENERATOR_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(weights.tobytes())
        fh.write(imgs.tobytes())
    return path


def load_generator(path: str | Path, plan: GanPlan,
                   budget: TrainingBudget) -> ReferenceGenerator:
    import json

    raw = Path(path).read_bytes()
    if raw[:4] != GENERATOR_MAGIC:
        raise DataError(f"not a generator model file: {path}")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported generator file version {version}")
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    shape = tuple(header["image_shape"])
    n = shape[0]
    off = 12 + header_len
    weights = np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy()
    off += 8 * n
    imgs = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)),
                         offset=off).reshape(shape).copy()

    g = ReferenceGenerator(
        plan=plan, budget=budget, seed=header["seed"], grid=header["grid"],
        noise_amplitude=header["noise_amplitude"], library_cap=header["library_cap"],
    )
    g.library_images = imgs
    g.weights = weights
    g.presentations = header["presentations"]
    g.spacing = tuple(header["spacing"])
    return g


# ---------------------------------------------------------------------------
# Reference segmenter
# ---------------------------------------------------------------------------

def _resize_mask_nearest(labels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    src_h, src_w = labels.shape
    out_h, out_w = out_hw
    rows = np.minimum(((np.arange(out_h) + 0.5) * src_h / out_h).astype(np.int64),
                      src_h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * src_w / out_w).astype(np.int64),
                      src_w - 1)
    return labels[np.ix_(rows, cols)]


def _intensity(image: Image2D) -> np.ndarray:
    px = image.pixels
    return px.mean(axis=2) if px.ndim == 3 else px


class ReferenceSegmenter:
    """Per-pixel class-prior map plus global per-class intensity prototypes."""

    def __init__(self, plan: SegPlan, num_classes: int,
                 prior_logits: np.ndarray | None = None,
                 prototypes: np.ndarray | None = None):
        if num_classes < 1:
            raise ValueError("segmenter needs at least 1 foreground class")
        self.plan = plan
        self.num_classes = num_classes
        c = num_classes + 1
        h, w = plan.patch_size
        if prior_logits is None:
            prior_logits = np.full((c, h, w), math.log(1.0 / c), dtype=np.float32)
        if prototypes is None:
            prototypes = ((np.arange(c, dtype=np.float32) + 0.5) / c)
        if prior_logits.shape != (c, h, w):
            raise DataError(f"prior map shape {prior_logits.shape} does not match "
                            f"plan patch {plan.patch_size} with {c} classes")
        if prototypes.shape != (c,):
            raise DataError("prototype vector shape mismatch")
        self.prior_logits = prior_logits.astype(np.float32)
        self.prototypes = prototypes.astype(np.float32)

    def parameter_vector(self) -> np.ndarray:
        """Flat float32 view: prior map then prototypes; lossless round-trip."""
        return np.concatenate([self.prior_logits.ravel(), self.prototypes]).astype(np.float32)

    def with_parameters(self, vector: np.ndarray) -> "ReferenceSegmenter":
        c = self.num_classes + 1
        h, w = self.plan.patch_size
        expected = c * h * w + c
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (expected,):
            raise DataError(f"parameter vector length {vector.shape} does not "
                            f"match expected ({expected},)")
        return ReferenceSegmenter(
            plan=self.plan, num_classes=self.num_classes,
            prior_logits=vector[:c * h * w].reshape(c, h, w).copy(),
            prototypes=vector[c * h * w:].copy(),
        )

    def predict(self, image: Image2D) -> SegMask:
        c = self.num_classes + 1
        hw = (image.height, image.width)
        intensity = _intensity(image).astype(np.float32)
        if hw == tuple(self.plan.patch_size):
            priors = self.prior_logits
        else:
            priors = np.stack([
                resize_bilinear(self.prior_logits[k], hw).astype(np.float32)
                for k in range(c)
            ])
        diff = intensity[None, :, :] - self.prototypes[:, None, None]
        scores = priors - np.float32(GAMMA) * diff * diff
        labels = np.argmax(scores, axis=0).astype(np.int32)
        return SegMask(labels=labels, num_classes=self.num_classes)


def _batch_targets(m: ReferenceSegmenter,
                   train: list[tuple[Image2D, SegMask]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-batch class-frequency log-priors and per-class mean intensities."""
    c = m.num_classes + 1
    h, w = m.plan.patch_size
    counts = np.zeros((c, h, w), dtype=np.float64)
    value_sums = np.zeros(c, dtype=np.float64)
    pixel_counts = np.zeros(c, dtype=np.float64)
    for image, mask in train:
        if mask.num_classes != m.num_classes:
            raise DataError(f"mask declares {mask.num_classes} classes, "
                            f"model has {m.num_classes}")
        intensity = resize_bilinear(_intensity(image), (h, w))
        labels = _resize_mask_nearest(mask.labels, (h, w))
        for k in range(c):
            sel = labels == k
            counts[k] += sel
            value_sums[k] += float(intensity[sel].sum())
            pixel_counts[k] += float(sel.sum())
    freq = counts / len(train)
    target_logits = np.log(freq + PRIOR_EPS).astype(np.float32)
    defined = pixel_counts > 0
    target_protos = np.where(defined, value_sums / np.maximum(pixel_counts, 1.0),
                             0.0).astype(np.float32)
    return target_logits, target_protos, defined


def fit_segmenter(m: ReferenceSegmenter, train: list[tuple[Image2D, SegMask]],
                  epochs: int, schedule: LrSchedule,
                  init: ReferenceSegmenter | None = None,
                  start_epoch: int = 0) -> ReferenceSegmenter:
    """Move state toward full-batch targets; step size lr_at(schedule, epoch).

    With `init` given, training continues from the pretrained parameter
    vector (fine-tuning); `epochs == 0` returns that state unchanged.
    `start_epoch` offsets the schedule position, so a caller iterating
    training round by round (parameter averaging) keeps the decay curve.
    """
    if len(train) == 0:
        raise DataError("segmenter training set is empty")
    if epochs < 0 or start_epoch < 0:
        raise ValueError("epochs and start_epoch must be non-negative")
    if start_epoch + epochs > schedule.total_epochs:
        raise ValueError("epochs exceed the schedule length")

    if init is not None:
        if init.num_classes != m.num_classes:
            raise DataError(f"init has {init.num_classes} classes, "
                            f"model expects {m.num_classes}")
        current = m.with_parameters(init.parameter_vector())
    else:
        current = m.with_parameters(m.parameter_vector())

    logits = current.prior_logits.copy()
    protos = current.prototypes.copy()
    target_logits, target_protos, defined = _batch_targets(m, train)

    for epoch in range(epochs):
        eta = np.float32(lr_at(schedule, start_epoch + epoch))
        logits += eta * (target_logits - logits)
        protos = np.where(defined, protos + eta * (target_protos - protos), protos)

    return ReferenceSegmenter(plan=m.plan, num_classes=m.num_classes,
                              prior_logits=logits, prototypes=protos.astype(np.float32))


def fedavg_round(models: list[ReferenceSegmenter],
                 weights: list[float]) -> np.ndarray:
    """Element-wise weighted parameter average, exactly permutation-invariant."""
    if len(models) == 0:
        raise DataError("no models to average")
    if len(weights) != len(models):
        raise DataError("one weight per model is required")
    if any(w <= 0 for w in weights):
        raise DataError("weights must be positive")
    vectors = [m.parameter_vector().astype(np.float64) for m in models]
    length = len(vectors[0])
    if any(len(v) != length for v in vectors):
        raise DataError("parameter vector lengths differ")
    total = math.fsum(weights)
    # fsum is correctly rounded, so the result is independent of model order.
    scaled = np.stack([v * (w / total) for v, w in zip(vectors, weights)])
    return np.array([math.fsum(scaled[:, i]) for i in range(length)],
                    dtype=np.float64).astype(np.float32)


# ---------------------------------------------------------------------------
# Segmenter serialization (model.bin)
# ---------------------------------------------------------------------------

def save_segmenter(m: ReferenceSegmenter, path: str | Path,
                   seg_plan_hash: str | None = None) -> Path:
    """model.bin: magic, version, plan hash (64 hex bytes), count, float32 data."""
    digest = seg_plan_hash if seg_plan_hash is not None else plan_hash(m.plan)
    if len(digest) != 64:
        raise ValueError("plan hash must be 64 hex characters")
    params = np.ascontiguousarray(m.parameter_vector(), dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(SEGMENTER_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(digest.encode("ascii"))
        fh.write(struct.pack("<I", len(params)))
        fh.write(params.tobytes())
    return path


def load_segmenter(path: str | Path, plan: SegPlan) -> ReferenceSegmenter:
    raw = Path(path).read_bytes()
    if raw[:4] != SEGMENTER_MAGIC:
        raise DataError(f"not a segmenter model file: {path}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported model file version {version}")
    digest = raw[8:72].decode("ascii")
    expected = plan_hash(plan)
    if digest != expected:
        raise DataError(f"model was trained under plan {digest[:12]}…, "
                        f"not the supplied plan {expected[:12]}…")
    (count,) = struct.unpack_from("<I", raw, 72)
    params = np.frombuffer(raw, dtype="<f4", count=count, offset=76).copy()

    h, w = plan.patch_size
    per_class = h * w + 1
    if count % per_class != 0:
        raise DataError("parameter count does not fit the plan's patch size")
    num_classes = count // per_class - 1
    if num_classes < 1:
        raise DataError("parameter vector too small for any foreground class")
    template = ReferenceSegmenter(plan=plan, num_classes=num_classes)
    return template.with_parameters(params)
