"""Deterministic derivation of architecture plans and training budgets.

Everything here is a pure function of a dataset fingerprint. The segmentation
plan fixes per-axis pooling depth from the median image size; the generator
plan is a structural mirror of it (generator = decoder stages, discriminator =
encoder stages). Budgets scale with dataset size: the generator sees one
thousand image presentations per training image, and each site synthesizes
ten images per training image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .core import DatasetFingerprint, canonical_json, sha256_hex

BASE_CHANNELS = 32
MAX_CHANNELS = 512
MAX_POOLS_PER_AXIS = 5
MIN_POOLS_PER_AXIS = 1
MIN_KERNEL_EXTENT = 3          # axes thinner than this at a stage get kernel 1
WARMUP_FRACTION = 0.1
DECAY_EXPONENT = 0.9
DEFAULT_EPOCHS = 50


@dataclass(frozen=True)
class ArchStage:
    """One encoder/decoder stage: per-axis stride and kernel, channel count."""

    stride: tuple[int, int]
    kernel: tuple[int, int]
    channels: int

    def __post_init__(self):
        if any(s not in (1, 2) for s in self.stride):
            raise ValueError(f"stride components must be 1 or 2, got {self.stride}")
        if any(k not in (1, 3) for k in self.kernel):
            raise ValueError(f"kernel components must be 1 or 3, got {self.kernel}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    def to_dict(self) -> dict:
        return {"stride": list(self.stride), "kernel": list(self.kernel),
                "channels": self.channels}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchStage":
        return cls(stride=tuple(d["stride"]), kernel=tuple(d["kernel"]),
                   channels=int(d["channels"]))


@dataclass(frozen=True)
class SegPlan:
    """Staged U-Net-style architecture description derived from a fingerprint."""

    patch_size: tuple[int, int]
    encoder_stages: tuple[ArchStage, ...]
    decoder_stages: tuple[ArchStage, ...]
    base_channels: int = BASE_CHANNELS
    max_channels: int = MAX_CHANNELS

    def __post_init__(self):
        if self.decoder_stages != tuple(reversed(self.encoder_stages)):
            raise ValueError("decoder_stages must mirror encoder_stages")
        for axis in (0, 1):
            prod = self.stride_product(axis)
            if self.patch_size[axis] % prod != 0:
                raise ValueError(
                    f"patch_size axis {axis} ({self.patch_size[axis]}) not "
                    f"divisible by stride product {prod}"
                )

    def stride_product(self, axis: int) -> int:
        p = 1
        for st in self.encoder_stages:
            p *= st.stride[axis]
        return p

    def bottleneck_size(self) -> tuple[int, int]:
        return (self.patch_size[0] // self.stride_product(0),
                self.patch_size[1] // self.stride_product(1))

    def to_dict(self) -> dict:
        return {
            "patch_size": list(self.patch_size),
            "encoder_stages": [s.to_dict() for s in self.encoder_stages],
            "decoder_stages": [s.to_dict() for s in self.decoder_stages],
            "base_channels": self.base_channels,
            "max_channels": self.max_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegPlan":
        return cls(
            patch_size=tuple(d["patch_size"]),
            encoder_stages=tuple(ArchStage.from_dict(s) for s in d["encoder_stages"]),
            decoder_stages=tuple(ArchStage.from_dict(s) for s in d["decoder_stages"]),
            base_channels=int(d["base_channels"]),
            max_channels=int(d["max_channels"]),
        )


@dataclass(frozen=True)
class GanPlan:
    """Generator/discriminator structure copied from a segmentation plan."""

    output_size: tuple[int, int]
    generator_stages: tuple[ArchStage, ...]
    discriminator_stages: tuple[ArchStage, ...]

    def to_dict(self) -> dict:
        return {
            "output_size": list(self.output_size),
            "generator_stages": [s.to_dict() for s in self.generator_stages],
            "discriminator_stages": [s.to_dict() for s in self.discriminator_stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GanPlan":
        return cls(
            output_size=tuple(d["output_size"]),
            generator_stages=tuple(ArchStage.from_dict(s) for s in d["generator_stages"]),
            discriminator_stages=tuple(ArchStage.from_dict(s) for s in d["discriminator_stages"]),
        )


@dataclass(frozen=True)
class TrainingBudget:
    """Size-coupled training budget: kimg for the generator, counts elsewhere."""

    n_steps: int                    # thousands of real-image presentations
    n_gen: int                      # synthetic images to draw
    warmup_fraction: float = WARMUP_FRACTION
    epochs: int = DEFAULT_EPOCHS    # segmenter epochs

    def __post_init__(self):
        if self.n_steps < 1 or self.n_gen < 1 or self.epochs < 1:
            raise ValueError("budget counts must be >= 1")
        if self.warmup_fraction != WARMUP_FRACTION:
            raise ValueError(f"warmup_fraction is fixed at {WARMUP_FRACTION}")

    def to_dict(self) -> dict:
        return {"n_steps": self.n_steps, "n_gen": self.n_gen,
                "warmup_fraction": self.warmup_fraction, "epochs": self.epochs}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingBudget":
        return cls(n_steps=int(d["n_steps"]), n_gen=int(d["n_gen"]),
                   warmup_fraction=float(d["warmup_fraction"]), epochs=int(d["epochs"]))


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up over the first 10% of epochs, then polynomial decay."""

    base_rate: float
    total_epochs: int

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ValueError("base_rate must be positive")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")

    @property
    def warmup_epochs(self) -> int:
        return math.ceil(WARMUP_FRACTION * self.total_epochs)


def lr_at(s: LrSchedule, epoch: int) -> float:
    """Learning rate at an epoch: linear ramp to base, then (1 - t)^0.9 decay."""
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} out of range 0..{s.total_epochs - 1}")
    w = s.warmup_epochs
    if epoch < w:
        return s.base_rate * (epoch + 1) / w
    frac = (epoch - w) / (s.total_epochs - w)
    return s.base_rate * (1.0 - frac) ** DECAY_EXPONENT


# ---------------------------------------------------------------------------
# Plan derivation
# ---------------------------------------------------------------------------

def _pools_for_axis(median: int) -> int:
    d = math.floor(math.log2(median)) - 2
    return max(MIN_POOLS_PER_AXIS, min(MAX_POOLS_PER_AXIS, d))


def derive_seg_plan(f: DatasetFingerprint) -> SegPlan:
    """Derive the staged segmentation architecture from the fingerprint.

    Per axis, the pool count is floor(log2(median)) - 2 clamped to [1, 5]; the
    stage count is the max over axes. A stage downsamples an axis while pools
    remain for it, keeps kernel extent 3 unless the axis has shrunk below 3,
    and doubles channels from 32 up to 512. The patch rounds the median size
    up to the next multiple of each axis's total stride.
    """
    pools = (_pools_for_axis(f.median_size[0]), _pools_for_axis(f.median_size[1]))
    n_stages = max(pools)
    patch = tuple(
        -(-f.median_size[a] // (1 << pools[a])) * (1 << pools[a]) for a in (0, 1)
    )

    stages = []
    current = list(patch)
    for s in range(n_stages):
        stride = tuple(2 if s < pools[a] else 1 for a in (0, 1))
        kernel = tuple(3 if current[a] >= MIN_KERNEL_EXTENT else 1 for a in (0, 1))
        channels = min(BASE_CHANNELS * (1 << s), MAX_CHANNELS)
        stages.append(ArchStage(stride=stride, kernel=kernel, channels=channels))
        current = [current[a] // stride[a] for a in (0, 1)]

    encoder = tuple(stages)
    return SegPlan(patch_size=patch, encoder_stages=encoder,
                   decoder_stages=tuple(reversed(encoder)))


def derive_gan_plan(p: SegPlan) -> GanPlan:
    """Mirror the segmentation plan: pure structural copy, no recomputation."""
    return GanPlan(
        output_size=p.patch_size,
        generator_stages=p.decoder_stages,
        discriminator_stages=p.encoder_stages,
    )


def derive_budget(f: DatasetFingerprint, epochs: int = DEFAULT_EPOCHS) -> TrainingBudget:
    """n_steps = dataset size in kimg, n_gen = ten times the dataset size."""
    return TrainingBudget(n_steps=f.n_images, n_gen=10 * f.n_images, epochs=epochs)


# ---------------------------------------------------------------------------
# plan.json
# ---------------------------------------------------------------------------

def plan_document(seg: SegPlan, gan: GanPlan, budget: TrainingBudget) -> dict:
    return {"seg_plan": seg.to_dict(), "gan_plan": gan.to_dict(),
            "budget": budget.to_dict()}


def plan_hash(seg: SegPlan) -> str:
    """Content hash identifying an architecture (budget-independent)."""
    return sha256_hex(canonical_json(seg.to_dict()).encode("utf-8"))


def write_plan_file(path: str | Path, seg: SegPlan, gan: GanPlan,
                    budget: TrainingBudget) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(plan_document(seg, gan, budget)), encoding="utf-8")
    return path


def read_plan_file(path: str | Path) -> tuple[SegPlan, GanPlan, TrainingBudget]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return (SegPlan.from_dict(doc["seg_plan"]),
            GanPlan.from_dict(doc["gan_plan"]),
            TrainingBudget.from_dict(doc["budget"]))
