"""Multi-site orchestration: synthesize, filter, share, merge, pretrain, fine-tune.

Each site runs an isolated pipeline over its own images:

    fingerprint -> plan -> train generator + local segmenter -> synthesize
    -> memorization filter -> label kept images -> publish bundle

Only the published bundle (filtered synthetic images, machine labels, and
provenance) ever leaves a site.  A central step validates and merges the
bundles, pretrains a general model on the union, and hands that model back
to every site for a warm-start fine-tune.

Every stage writes its artifacts to the run directory first, then appends one
line to ``events.log`` and records completion in ``state.json``.  A completed
stage is never re-executed: re-running a finished run changes no bytes, and an
interrupted run resumes at the first incomplete stage.  Wall-clock time
appears only in ``events.log``; every other byte is a pure function of the
configuration, the input data, and the seed.  Sites are always processed in
sorted order, so the run directory does not depend on argument order.

Run directory layout (one experiment):

    config.json
    events.log
    state.json
    sites/<site_id>/fold<k>/
        fingerprint.json  split.json  plan.json
        generator.bin  segmenter.bin
        synthetic/                sampled images, before filtering
        calibration.json  filter_report.csv
        bundle/                   the published artifact (dataset + provenance)
        finetuned.bin             general model adapted to this site
        syn_only.bin              optional arm: trained on own bundle alone
    central/fold<k>/
        merged/  plan.json  general_model.bin
        real_all.bin  fedavg.bin  (+ their plan files; optional arms)
    reports/
        metrics.csv  summary.txt  stats.csv  stats.txt
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
import statistics
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (
    DataError,
    Dataset,
    DatasetFingerprint,
    Image2D,
    N_FOLDS,
    PatientRecord,
    canonical_json,
    fingerprint_dataset,
    load_dataset,
    make_fold_splits,
    save_dataset,
    sha256_hex,
    subset_by_patients,
)
from .memfilter import (
    EmbeddingProvider,
    ToyEmbeddingProvider,
    calibrate_threshold,
    dataset_image_refs,
    filter_synthetic,
)
from .metrics import (
    FoldScores,
    TestOutcome,
    aggregate_folds,
    bonferroni,
    dice,
    hd95,
    read_metric_report,
    wilcoxon_one_sided,
    write_metric_report,
)
from .planner import (
    LrSchedule,
    SegPlan,
    TrainingBudget,
    derive_budget,
    derive_gan_plan,
    derive_seg_plan,
    plan_hash,
    read_plan_file,
    write_plan_file,
)
from .trainers import (
    FORMAT_VERSION,
    ReferenceGenerator,
    ReferenceSegmenter,
    fedavg_round,
    fit_generator,
    fit_segmenter,
    load_generator,
    load_segmenter,
    sample,
    save_generator,
    save_segmenter,
)

GENERATOR_VERSION = f"tile-mosaic/v{FORMAT_VERSION}"

# Canonical life cycle of one site within one fold.  Phases advance one step
# at a time and never move backwards.
PHASES = (
    "Idle",
    "Fingerprinted",
    "Planned",
    "GenTrained",
    "Synthesized",
    "Filtered",
    "BundlePublished",
    "AwaitingGeneralModel",
    "FineTuned",
)

# Evaluation arms.  The per-site arms expand to one setting per site
# ("real-<site>", ...); the pooled arms are single settings.
ARMS = ("real", "syn", "syn-real", "real-all", "syn-all", "fedavg")

_SITE_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_-]*$")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FederationConfig:
    """Knobs of one experiment.  Sites and arms are canonicalized so two
    configurations naming the same experiment serialize to the same bytes."""

    sites: tuple[str, ...]
    seed: int = 0
    name: str = "toy-federation"
    arms: tuple[str, ...] = ("syn-real", "real")
    percentile: float = 5.0
    alpha: float = 0.05
    local_epochs: int = 50
    local_base_rate: float = 0.1
    pretrain_epochs: int = 50
    pretrain_base_rate: float = 0.1
    finetune_epochs: int = 50
    finetune_base_rate: float = 0.01
    fedavg_rounds: int = 10
    generator_grid: int = 4
    generator_noise: float = 0.05
    generator_library_cap: int | None = None

    def __post_init__(self):
        sites = tuple(sorted(self.sites))
        if not sites:
            raise ValueError("at least one site is required")
        if len(set(sites)) != len(sites):
            raise ValueError("site ids must be unique")
        for sid in sites:
            if not _SITE_ID_RE.fullmatch(sid):
                raise ValueError(f"site id {sid!r} is not a safe directory name")
        object.__setattr__(self, "sites", sites)

        unknown = set(self.arms) - set(ARMS)
        if unknown:
            raise ValueError(f"unknown arms: {sorted(unknown)}")
        if not self.arms:
            raise ValueError("at least one arm is required")
        object.__setattr__(self, "arms",
                           tuple(a for a in ARMS if a in set(self.arms)))

        if not 0.0 <= self.percentile <= 100.0:
            raise ValueError("percentile must be in [0, 100]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if self.local_epochs < 1 or self.pretrain_epochs < 1:
            raise ValueError("training epochs must be >= 1")
        if self.finetune_epochs < 0:
            raise ValueError("finetune epochs must be >= 0")
        if min(self.local_base_rate, self.pretrain_base_rate,
               self.finetune_base_rate) <= 0:
            raise ValueError("learning rates must be positive")
        if self.fedavg_rounds < 1:
            raise ValueError("fedavg_rounds must be >= 1")
        if self.generator_grid < 1:
            raise ValueError("generator_grid must be >= 1")
        if self.generator_noise < 0:
            raise ValueError("generator_noise must be non-negative")
        if self.generator_library_cap is not None and self.generator_library_cap < 1:
            raise ValueError("generator_library_cap must be >= 1 when set")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "sites": list(self.sites),
            "seed": self.seed,
            "arms": list(self.arms),
            "percentile": self.percentile,
            "alpha": self.alpha,
            "local_epochs": self.local_epochs,
            "local_base_rate": self.local_base_rate,
            "pretrain_epochs": self.pretrain_epochs,
            "pretrain_base_rate": self.pretrain_base_rate,
            "finetune_epochs": self.finetune_epochs,
            "finetune_base_rate": self.finetune_base_rate,
            "fedavg_rounds": self.fedavg_rounds,
            "generator_grid": self.generator_grid,
            "generator_noise": self.generator_noise,
            "generator_library_cap": self.generator_library_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FederationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "sites" in kwargs:
            kwargs["sites"] = tuple(str(s) for s in kwargs["sites"])
        if "arms" in kwargs:
            kwargs["arms"] = tuple(str(a) for a in kwargs["arms"])
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise DataError(f"invalid configuration: {exc}") from exc


def _derive_seed(base: int, *parts) -> int:
    """Independent per-purpose seed, stable across processes and platforms."""
    material = ":".join([str(base), *map(str, parts)])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# ---------------------------------------------------------------------------
# Run directory bookkeeping
# ---------------------------------------------------------------------------

class RunState:
    """Completion ledger: ``scope:phase`` -> artifact digest, rewritten
    atomically after every completed stage."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.completed: dict[str, str] = {}
        if self.path.is_file():
            doc = json.loads(self.path.read_text(encoding="utf-8"))
            self.completed = {str(k): str(v) for k, v in doc.get("completed", {}).items()}

    def get(self, key: str) -> str | None:
        return self.completed.get(key)

    def done(self, key: str) -> bool:
        return key in self.completed

    def mark(self, key: str, digest: str) -> None:
        self.completed[key] = digest
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(canonical_json({"completed": self.completed}), encoding="utf-8")
        os.replace(tmp, self.path)


class RunLog:
    """Append-only event log; the only file that records wall-clock time."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.count = 0
        if self.path.is_file():
            with open(self.path, encoding="utf-8") as fh:
                self.count = sum(1 for _ in fh)

    def append(self, scope: str, phase: str, artifact: str) -> None:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        self.count += 1
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{self.count}\t{scope}\t{phase}\t{artifact}\t{stamp}\n")


class RunContext:
    """State and log of one run directory."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.state = RunState(self.run_dir / "state.json")
        self.log = RunLog(self.run_dir / "events.log")


def _stage(ctx: RunContext, scope: str, phase: str, build: Callable[[], str]) -> str:
    """Run one guarded stage.  ``build`` writes its artifacts and returns
    their digest; a stage that already completed is skipped without logging."""
    key = f"{scope}:{phase}"
    existing = ctx.state.get(key)
    if existing is not None:
        return existing
    digest = build()
    ctx.log.append(scope, phase, digest)
    ctx.state.mark(key, digest)
    return digest


@dataclass
class SiteState:
    """Phase machine of one site within one fold."""

    site_id: str
    fold: int = 0
    phase: str = "Idle"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")

    @property
    def phase_index(self) -> int:
        return PHASES.index(self.phase)

    def advance(self, new_phase: str) -> None:
        if new_phase not in PHASES:
            raise ValueError(f"unknown phase {new_phase!r}")
        if PHASES.index(new_phase) != self.phase_index + 1:
            raise RuntimeError(
                f"cannot move from {self.phase} to {new_phase}: "
                "phases advance one step at a time and never regress"
            )
        self.phase = new_phase


def _restored_phase(ctx: RunContext, scope: str) -> str:
    """Furthest contiguously completed phase for a scope (for resuming)."""
    phase = PHASES[0]
    for candidate in PHASES[1:]:
        if ctx.state.done(f"{scope}:{candidate}"):
            phase = candidate
        else:
            break
    return phase


def _site_dir(run_dir: Path, site_id: str, fold: int) -> Path:
    return Path(run_dir) / "sites" / site_id / f"fold{fold}"


def _central_dir(run_dir: Path, fold: int) -> Path:
    return Path(run_dir) / "central" / f"fold{fold}"


def _hash_tree(root: Path, skip: frozenset[str] = frozenset({"bundle.sha256"})) -> str:
    """Digest of every file under ``root`` (path + content), order-free."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(p.relative_to(root).as_posix().encode("utf-8"))
            h.update(b"\0")
            h.update(p.read_bytes())
            h.update(b"\0")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Site pipeline
# ---------------------------------------------------------------------------

def run_site_pipeline(run_dir: str | Path, dataset: Dataset, fold: int,
                      config: FederationConfig, *,
                      ctx: RunContext | None = None,
                      provider: EmbeddingProvider | None = None) -> Path:
    """Run one site's pipeline for one fold through bundle publication.

    Every stage reads its inputs from files written by earlier stages, so a
    resumed run continues from artifacts on disk rather than from memory.
    Returns the published bundle directory.
    """
    if not 0 <= fold < N_FOLDS:
        raise ValueError(f"fold must be in 0..{N_FOLDS - 1}")
    sid = dataset.site_id
    if sid not in config.sites:
        raise DataError(f"dataset site {sid!r} is not in the configuration")
    ctx = ctx if ctx is not None else RunContext(run_dir)
    provider = provider if provider is not None else ToyEmbeddingProvider()

    scope = f"fold{fold}/{sid}"
    sdir = _site_dir(ctx.run_dir, sid, fold)
    st = SiteState(site_id=sid, fold=fold, phase=_restored_phase(ctx, scope))

    split = make_fold_splits(dataset, config.seed)[fold]
    train_ds = subset_by_patients(dataset, split.train_patients)

    def ensure(phase: str, build: Callable[[], str]) -> str:
        digest = _stage(ctx, scope, phase, build)
        if st.phase_index < PHASES.index(phase):
            st.advance(phase)
        return digest

    def build_fingerprint() -> str:
        sdir.mkdir(parents=True, exist_ok=True)
        fp_bytes = canonical_json(fingerprint_dataset(train_ds).to_dict()).encode("utf-8")
        (sdir / "fingerprint.json").write_bytes(fp_bytes)
        (sdir / "split.json").write_text(canonical_json({
            "fold_index": split.fold_index,
            "train": sorted(split.train_patients),
            "val": sorted(split.val_patients),
            "test": sorted(split.test_patients),
        }), encoding="utf-8")
        return sha256_hex(fp_bytes)

    ensure("Fingerprinted", build_fingerprint)

    def build_plan() -> str:
        doc = json.loads((sdir / "fingerprint.json").read_text(encoding="utf-8"))
        fp = DatasetFingerprint.from_dict(doc)
        seg = derive_seg_plan(fp)
        path = write_plan_file(sdir / "plan.json", seg, derive_gan_plan(seg),
                               derive_budget(fp, epochs=config.local_epochs))
        return sha256_hex(path.read_bytes())

    ensure("Planned", build_plan)

    def build_models() -> str:
        seg, gan, budget = read_plan_file(sdir / "plan.json")
        gen = ReferenceGenerator(
            gan, budget,
            seed=_derive_seed(config.seed, fold, sid, "generator"),
            grid=config.generator_grid,
            noise_amplitude=config.generator_noise,
            library_cap=config.generator_library_cap,
        )
        fit_generator(gen, train_ds.images())
        gpath = save_generator(gen, sdir / "generator.bin", seg_plan_hash=plan_hash(seg))
        schedule = LrSchedule(config.local_base_rate, budget.epochs)
        model = fit_segmenter(ReferenceSegmenter(seg, dataset.num_classes),
                              train_ds.labeled_items(), budget.epochs, schedule)
        mpath = save_segmenter(model, sdir / "segmenter.bin")
        combined = sha256_hex(gpath.read_bytes()) + sha256_hex(mpath.read_bytes())
        return sha256_hex(combined.encode("ascii"))

    ensure("GenTrained", build_models)

    def build_synthetic() -> str:
        _, gan, budget = read_plan_file(sdir / "plan.json")
        gen = load_generator(sdir / "generator.bin", gan, budget)
        images = sample(gen, budget.n_gen,
                        seed=_derive_seed(config.seed, fold, sid, "sample"))
        syn = Dataset(
            site_id=sid,
            patients=tuple(
                PatientRecord(patient_id=f"{sid}-syn{i:05d}", items=((img, None),))
                for i, img in enumerate(images)
            ),
            modality=dataset.modality,
            num_classes=dataset.num_classes,
        )
        save_dataset(syn, sdir / "synthetic")
        return sha256_hex((sdir / "synthetic" / "manifest.json").read_bytes())

    ensure("Synthesized", build_synthetic)

    def build_filter() -> str:
        syn = load_dataset(sdir / "synthetic")
        cal = calibrate_threshold(
            train_ds, provider, p=config.percentile,
            seed=_derive_seed(config.seed, fold, sid, "calibration"),
        )
        (sdir / "calibration.json").write_text(canonical_json({
            "provider": provider.name,
            "dimension": cal.dimension,
            "p": cal.p,
            "split_seed": cal.split_seed,
            "threshold": cal.threshold,
            "distances": list(cal.distances),
        }), encoding="utf-8")
        report = filter_synthetic(syn.images(), train_ds, cal, provider,
                                  syn_refs=dataset_image_refs(syn))
        if report.n_kept == 0:
            raise DataError(
                f"memorization filter discarded every synthetic image at {sid}"
            )
        report.to_csv(sdir / "filter_report.csv")
        return sha256_hex((sdir / "filter_report.csv").read_bytes())

    ensure("Filtered", build_filter)

    def build_bundle() -> str:
        syn = load_dataset(sdir / "synthetic")
        seg, _, budget = read_plan_file(sdir / "plan.json")
        model = load_segmenter(sdir / "segmenter.bin", seg)
        by_id = {p.patient_id: p for p in syn.patients}
        real_ids = {p.patient_id for p in dataset.patients}

        patients = []
        for ref in _kept_refs(sdir / "filter_report.csv"):
            pid = ref.split("/")[0]
            if pid in real_ids:
                raise DataError("bundle would contain a real patient id")
            img = by_id[pid].items[0][0]
            patients.append(PatientRecord(pid, ((img, model.predict(img)),)))

        bdir = sdir / "bundle"
        save_dataset(Dataset(site_id=sid, patients=tuple(patients),
                             modality=dataset.modality,
                             num_classes=dataset.num_classes), bdir)
        report_bytes = (sdir / "filter_report.csv").read_bytes()
        (bdir / "filter_report.csv").write_bytes(report_bytes)
        (bdir / "provenance.json").write_text(canonical_json({
            "site_id": sid,
            "seed": _derive_seed(config.seed, fold, sid, "sample"),
            "generator_seed": _derive_seed(config.seed, fold, sid, "generator"),
            "budget": budget.to_dict(),
            "plan_hash": plan_hash(seg),
            "generator_version": GENERATOR_VERSION,
            "filter_report_sha256": sha256_hex(report_bytes),
            "created_step": ctx.log.count + 1,
            "n_images": len(patients),
        }), encoding="utf-8")
        digest = _hash_tree(bdir)
        (bdir / "bundle.sha256").write_text(digest + "\n", encoding="utf-8")
        return digest

    ensure("BundlePublished", build_bundle)

    if "syn-real" in config.arms:
        ensure("AwaitingGeneralModel", lambda: "-")

    return sdir / "bundle"


def _kept_refs(report_path: Path) -> list[str]:
    with open(report_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["image_ref", "nn_ref", "distance", "verdict"]:
            raise DataError(f"unexpected filter report header: {header}")
        return [row[0] for row in reader if row[3] == "kept"]


# ---------------------------------------------------------------------------
# Bundles: validation and merging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticBundle:
    """A validated published bundle: filtered synthetic images with machine
    labels plus the provenance needed to audit them."""

    site_id: str
    dataset: Dataset
    seed: int
    budget: TrainingBudget
    plan_hash: str
    generator_version: str
    filter_report_sha256: str
    created_step: int


def validate_bundle(bundle_dir: str | Path) -> SyntheticBundle:
    """Check integrity and structure of a bundle directory.

    Rejects content-hash mismatches (including a tampered filter report),
    model parameter files smuggled into the bundle, items without machine
    labels, and patient ids that do not look synthetic.
    """
    bdir = Path(bundle_dir)
    for name in ("manifest.json", "provenance.json", "filter_report.csv",
                 "bundle.sha256"):
        if not (bdir / name).is_file():
            raise DataError(f"bundle is missing {name}: {bdir}")

    recorded = (bdir / "bundle.sha256").read_text(encoding="utf-8").strip()
    actual = _hash_tree(bdir)
    if recorded != actual:
        raise DataError(f"bundle content hash mismatch in {bdir}")

    prov = json.loads((bdir / "provenance.json").read_text(encoding="utf-8"))
    report_digest = sha256_hex((bdir / "filter_report.csv").read_bytes())
    if prov.get("filter_report_sha256") != report_digest:
        raise DataError(f"filter report hash mismatch in {bdir}")
    if any(True for _ in bdir.rglob("*.bin")):
        raise DataError("bundle must not contain model parameter files")

    ds = load_dataset(bdir)
    if ds.site_id != prov.get("site_id"):
        raise DataError("bundle site id does not match its provenance")
    prefix = f"{prov['site_id']}-syn"
    for p in ds.patients:
        if not p.patient_id.startswith(prefix):
            raise DataError(f"bundle contains a non-synthetic patient id: {p.patient_id}")
        if any(mask is None for _, mask in p.items):
            raise DataError("bundle item lacks a machine label")
    if ds.n_images != int(prov.get("n_images", -1)):
        raise DataError("bundle image count does not match its provenance")

    return SyntheticBundle(
        site_id=str(prov["site_id"]),
        dataset=ds,
        seed=int(prov["seed"]),
        budget=TrainingBudget.from_dict(prov["budget"]),
        plan_hash=str(prov["plan_hash"]),
        generator_version=str(prov["generator_version"]),
        filter_report_sha256=str(prov["filter_report_sha256"]),
        created_step=int(prov["created_step"]),
    )


def merge_bundles(bundle_dirs: Sequence[str | Path],
                  out_dir: str | Path | None = None) -> Dataset:
    """Validate and concatenate bundles into one dataset, sorted by patient id.

    A pure function of the multiset of bundles: the same bundles in any order
    produce an identical merged dataset (and identical bytes when persisted).
    """
    if len(bundle_dirs) == 0:
        raise DataError("no bundles to merge")
    bundles = [validate_bundle(b) for b in bundle_dirs]

    seen: set[str] = set()
    for b in bundles:
        if b.site_id in seen:
            raise DataError(f"duplicate bundle for site {b.site_id!r}")
        seen.add(b.site_id)
    classes = {b.dataset.num_classes for b in bundles}
    if len(classes) > 1:
        raise DataError(f"bundles disagree on class count: {sorted(classes)}")
    modalities = {b.dataset.modality for b in bundles}
    if len(modalities) > 1:
        raise DataError(f"bundles disagree on modality: {sorted(modalities)}")

    patients = sorted((p for b in bundles for p in b.dataset.patients),
                      key=lambda p: p.patient_id)
    merged = Dataset(site_id="merged", patients=tuple(patients),
                     modality=bundles[0].dataset.modality,
                     num_classes=classes.pop())
    if out_dir is not None:
        save_dataset(merged, out_dir)
    return merged


# ---------------------------------------------------------------------------
# Central training and fine-tuning
# ---------------------------------------------------------------------------

def pretrain_general(merged: Dataset, config: FederationConfig):
    """Train the general model from scratch on merged synthetic data.

    The architecture comes from a fresh fingerprint of the merged dataset,
    not from any site's plan.  Returns (model, seg_plan, gan_plan, budget).
    """
    items = merged.labeled_items()
    if not items:
        raise DataError("merged synthetic dataset has no labeled items")
    fp = fingerprint_dataset(merged)
    seg = derive_seg_plan(fp)
    budget = derive_budget(fp, epochs=config.pretrain_epochs)
    schedule = LrSchedule(config.pretrain_base_rate, config.pretrain_epochs)
    model = fit_segmenter(ReferenceSegmenter(seg, merged.num_classes), items,
                          config.pretrain_epochs, schedule)
    return model, seg, derive_gan_plan(seg), budget


def finetune_at_site(general: ReferenceSegmenter,
                     site_train: list[tuple[Image2D, object]],
                     config: FederationConfig) -> ReferenceSegmenter:
    """Warm-start fine-tune of the general model on one site's real data.

    Runs a fresh warm-up-and-decay schedule from the general parameters;
    zero fine-tune epochs return the general model unchanged.  Pure function
    of its inputs, so sites can fine-tune independently in any order.
    """
    if config.finetune_epochs == 0:
        return general.with_parameters(general.parameter_vector())
    schedule = LrSchedule(config.finetune_base_rate, config.finetune_epochs)
    return fit_segmenter(general, site_train, config.finetune_epochs,
                         schedule, init=general)


def _pooled_real_dataset(datasets: dict[str, Dataset], site_ids: Sequence[str],
                         fold: int, splits: dict[str, list]) -> Dataset:
    """All sites' training folds as one dataset with site-prefixed ids."""
    patients = []
    for sid in site_ids:
        sub = subset_by_patients(datasets[sid], splits[sid][fold].train_patients)
        patients.extend(
            PatientRecord(f"{sid}-{p.patient_id}", p.items) for p in sub.patients
        )
    patients.sort(key=lambda p: p.patient_id)
    first = datasets[site_ids[0]]
    return Dataset(site_id="pooled", patients=tuple(patients),
                   modality=first.modality, num_classes=first.num_classes)


def fedavg_train(datasets: dict[str, Dataset], site_ids: Sequence[str],
                 fold: int, splits: dict[str, list], config: FederationConfig):
    """Round-based parameter averaging over the sites' real training folds.

    Each round, every site advances the shared model by one epoch of its own
    schedule position; the new shared model is the image-count weighted
    average.  Returns (model, seg_plan, gan_plan, budget).
    """
    site_ids = sorted(site_ids)
    pooled = _pooled_real_dataset(datasets, site_ids, fold, splits)
    fp = fingerprint_dataset(pooled)
    seg = derive_seg_plan(fp)
    budget = derive_budget(fp, epochs=config.fedavg_rounds)
    schedule = LrSchedule(config.local_base_rate, config.fedavg_rounds)

    train_sets = [
        subset_by_patients(datasets[sid], splits[sid][fold].train_patients).labeled_items()
        for sid in site_ids
    ]
    weights = [float(len(t)) for t in train_sets]
    shared = ReferenceSegmenter(seg, pooled.num_classes)
    for r in range(config.fedavg_rounds):
        locals_ = [fit_segmenter(shared, items, 1, schedule, init=shared,
                                 start_epoch=r) for items in train_sets]
        shared = shared.with_parameters(fedavg_round(locals_, weights))
    return shared, seg, derive_gan_plan(seg), budget


# ---------------------------------------------------------------------------
# Evaluation and reports
# ---------------------------------------------------------------------------

def score_items(model: ReferenceSegmenter,
                 items: list[tuple[Image2D, object]]) -> tuple[float, float | None]:
    """Mean Dice (percent) and mean defined 95th-percentile boundary distance
    over a list of labeled test items, averaging classes within an item."""
    if not items:
        raise DataError("no labeled test items to score")
    ds_vals: list[float] = []
    hd_vals: list[float | None] = []
    for img, mask in items:
        pred = model.predict(img)
        per_ds, per_hd = [], []
        for c in range(1, model.num_classes + 1):
            per_ds.append(100.0 * dice(pred, mask, class_id=c))
            per_hd.append(hd95(pred, mask, class_id=c, spacing=img.spacing))
        ds_vals.append(sum(per_ds) / len(per_ds))
        defined = [v for v in per_hd if v is not None]
        hd_vals.append(sum(defined) / len(defined) if defined else None)
    ds_value = sum(ds_vals) / len(ds_vals)
    defined_hd = [v for v in hd_vals if v is not None]
    hd_value = sum(defined_hd) / len(defined_hd) if defined_hd else None
    return ds_value, hd_value


def _model_specs(run_dir: Path, config: FederationConfig, fold: int,
                 site_ids: Sequence[str]) -> list[tuple[str, Path, Path]]:
    """(setting, model file, plan file) for every configured arm, one fold."""
    cdir = _central_dir(run_dir, fold)
    specs: list[tuple[str, Path, Path]] = []
    for arm in config.arms:
        if arm == "real":
            for sid in site_ids:
                sdir = _site_dir(run_dir, sid, fold)
                specs.append((f"real-{sid}", sdir / "segmenter.bin", sdir / "plan.json"))
        elif arm == "syn":
            for sid in site_ids:
                sdir = _site_dir(run_dir, sid, fold)
                specs.append((f"syn-{sid}", sdir / "syn_only.bin",
                              sdir / "syn_only.plan.json"))
        elif arm == "syn-real":
            for sid in site_ids:
                sdir = _site_dir(run_dir, sid, fold)
                specs.append((f"syn-real-{sid}", sdir / "finetuned.bin",
                              cdir / "plan.json"))
        elif arm == "syn-all":
            specs.append(("syn-all", cdir / "general_model.bin", cdir / "plan.json"))
        elif arm == "real-all":
            specs.append(("real-all", cdir / "real_all.bin", cdir / "real_all.plan.json"))
        elif arm == "fedavg":
            specs.append(("fedavg", cdir / "fedavg.bin", cdir / "fedavg.plan.json"))
    return specs


def _build_metric_rows(run_dir: Path, config: FederationConfig,
                       datasets: dict[str, Dataset], site_ids: Sequence[str],
                       splits: dict[str, list]):
    """Evaluate every persisted arm model on every site's test folds."""
    test_items = {
        (sid, fold): subset_by_patients(
            datasets[sid], splits[sid][fold].test_patients).labeled_items()
        for sid in site_ids for fold in range(N_FOLDS)
    }
    values: dict[tuple[str, str, str, int], float | None] = {}
    for fold in range(N_FOLDS):
        for setting, model_path, plan_path in _model_specs(run_dir, config, fold, site_ids):
            seg, _, _ = read_plan_file(plan_path)
            model = load_segmenter(model_path, seg)
            for tsid in site_ids:
                ds_v, hd_v = score_items(model, test_items[(tsid, fold)])
                values[(setting, tsid, "ds", fold)] = ds_v
                values[(setting, tsid, "hd95", fold)] = hd_v

    settings = sorted({k[0] for k in values})
    return [
        (setting, tsid, metric, fold, values[(setting, tsid, metric, fold)])
        for setting in settings
        for tsid in site_ids
        for metric in ("ds", "hd95")
        for fold in range(N_FOLDS)
    ]


def _format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    table = [[str(c) for c in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]

    def fmt(row: Sequence[str]) -> str:
        return "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(table[0]), sep, *(fmt(r) for r in table[1:])]) + "\n"


def summarize_metric_rows(rows) -> str:
    """Fixed-width per-(setting, test site, metric) fold aggregates."""
    grouped: dict[tuple[str, str, str], dict[int, float | None]] = {}
    for setting, tsid, metric, fold, value in rows:
        grouped.setdefault((setting, tsid, metric), {})[fold] = value

    out_rows = []
    for key in sorted(grouped):
        by_fold = grouped[key]
        ordered = [by_fold[f] for f in sorted(by_fold)]
        scores = FoldScores.from_values(ordered)
        try:
            mean, sd = aggregate_folds(scores)
            mean_s, sd_s = f"{mean:.4f}", f"{sd:.4f}"
        except DataError:
            mean_s, sd_s = "n/a", "n/a"
        out_rows.append([*key, mean_s, sd_s,
                         str(len(scores.values)), str(scores.n_undefined)])
    return _format_table(
        ["setting", "test_site", "metric", "mean", "sd", "n_folds", "n_undefined"],
        out_rows,
    )


@dataclass(frozen=True)
class StatRow:
    """One paired comparison with its multiple-testing verdict."""

    comparison: str
    metric: str
    n_pairs: int
    outcome: TestOutcome
    threshold: float
    significant: bool


def compute_stats(rows, alpha: float = 0.05) -> list[StatRow]:
    """Paired one-sided tests of synthetic-sharing fine-tunes against local
    real baselines, pooled over (model site, test site, fold).

    Dice tests "syn-real greater"; the boundary-distance metric tests
    "real greater" (lower is better).  Pairs with an undefined value on
    either side are dropped.  The corrected threshold spans all tests run.
    """
    values = {(s, t, m, f): v for s, t, m, f, v in rows}
    settings = {r[0] for r in rows}
    model_sites = sorted(
        s[len("syn-real-"):] for s in settings if s.startswith("syn-real-")
    )
    model_sites = [sid for sid in model_sites if f"real-{sid}" in settings]
    test_sites = sorted({r[1] for r in rows})
    folds = sorted({r[3] for r in rows})

    candidates: list[tuple[str, int, TestOutcome]] = []
    for metric in ("ds", "hd95"):
        xs: list[float] = []
        ys: list[float] = []
        for i in model_sites:
            for j in test_sites:
                for f in folds:
                    a = values.get((f"syn-real-{i}", j, metric, f))
                    b = values.get((f"real-{i}", j, metric, f))
                    if a is None or b is None:
                        continue
                    if metric == "ds":
                        xs.append(a)
                        ys.append(b)
                    else:
                        xs.append(b)
                        ys.append(a)
        if len(xs) < 5:
            continue
        try:
            outcome = wilcoxon_one_sided(xs, ys)
        except DataError:
            continue  # every pair tied: no evidence either way
        candidates.append((metric, len(xs), outcome))

    if not candidates:
        return []
    verdicts = bonferroni([c[2].p_value for c in candidates], alpha)
    return [
        StatRow(comparison="syn-real-vs-real", metric=metric, n_pairs=n,
                outcome=outcome, threshold=thr, significant=sig)
        for (metric, n, outcome), (thr, sig) in zip(candidates, verdicts)
    ]


STATS_HEADER = ["comparison", "metric", "n_pairs", "statistic", "p_value",
                "method", "threshold", "significant"]


def write_stats_report(csv_path: str | Path, txt_path: str | Path,
                       stat_rows: Sequence[StatRow], alpha: float) -> None:
    csv_path, txt_path = Path(csv_path), Path(txt_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STATS_HEADER)
        for r in stat_rows:
            writer.writerow([
                r.comparison, r.metric, r.n_pairs,
                repr(float(r.outcome.statistic)), repr(float(r.outcome.p_value)),
                r.outcome.method, repr(float(r.threshold)),
                "yes" if r.significant else "no",
            ])

    lines = [f"Paired one-sided tests at alpha={alpha:g} "
             "(corrected across all tests run)"]
    if not stat_rows:
        lines.append("  no comparison available: needs both the syn-real and "
                     "real arms with overlapping defined values")
    for r in stat_rows:
        verdict = "significant" if r.significant else "not significant"
        lines.append(
            f"  {r.comparison} on {r.metric}: W={r.outcome.statistic:g}, "
            f"p={r.outcome.p_value:.6g} ({r.outcome.method}, "
            f"n={r.outcome.n_effective} of {r.n_pairs} pairs), "
            f"threshold={r.threshold:.6g} -> {verdict}"
        )
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

def _central_stages(ctx: RunContext, config: FederationConfig,
                    datasets: dict[str, Dataset], splits: dict[str, list],
                    site_ids: list[str], fold: int) -> None:
    scope = f"fold{fold}/central"
    cdir = _central_dir(ctx.run_dir, fold)
    bundle_dirs = [_site_dir(ctx.run_dir, sid, fold) / "bundle" for sid in site_ids]

    if "syn-real" in config.arms or "syn-all" in config.arms:
        def build_merge() -> str:
            merge_bundles(bundle_dirs, out_dir=cdir / "merged")
            return sha256_hex((cdir / "merged" / "manifest.json").read_bytes())

        _stage(ctx, scope, "Merged", build_merge)

        def build_pretrained() -> str:
            merged = load_dataset(cdir / "merged")
            model, seg, gan, budget = pretrain_general(merged, config)
            write_plan_file(cdir / "plan.json", seg, gan, budget)
            path = save_segmenter(model, cdir / "general_model.bin")
            return sha256_hex(path.read_bytes())

        _stage(ctx, scope, "Pretrained", build_pretrained)

    if "syn-real" in config.arms:
        for sid in site_ids:
            sscope = f"fold{fold}/{sid}"
            sdir = _site_dir(ctx.run_dir, sid, fold)
            if not ctx.state.done(f"{sscope}:AwaitingGeneralModel"):
                raise RuntimeError(
                    f"site {sid} cannot fine-tune before publishing its bundle"
                )

            def build_finetune(sid=sid, sdir=sdir) -> str:
                seg, _, _ = read_plan_file(cdir / "plan.json")
                general = load_segmenter(cdir / "general_model.bin", seg)
                items = subset_by_patients(
                    datasets[sid], splits[sid][fold].train_patients).labeled_items()
                tuned = finetune_at_site(general, items, config)
                path = save_segmenter(tuned, sdir / "finetuned.bin")
                return sha256_hex(path.read_bytes())

            _stage(ctx, sscope, "FineTuned", build_finetune)

    if "syn" in config.arms:
        for sid in site_ids:
            sscope = f"fold{fold}/{sid}"
            sdir = _site_dir(ctx.run_dir, sid, fold)

            def build_syn_only(sid=sid, sdir=sdir) -> str:
                bundle = validate_bundle(sdir / "bundle")
                fp = fingerprint_dataset(bundle.dataset)
                seg = derive_seg_plan(fp)
                write_plan_file(sdir / "syn_only.plan.json", seg,
                                derive_gan_plan(seg),
                                derive_budget(fp, epochs=config.local_epochs))
                schedule = LrSchedule(config.local_base_rate, config.local_epochs)
                model = fit_segmenter(
                    ReferenceSegmenter(seg, bundle.dataset.num_classes),
                    bundle.dataset.labeled_items(), config.local_epochs, schedule)
                path = save_segmenter(model, sdir / "syn_only.bin")
                return sha256_hex(path.read_bytes())

            _stage(ctx, sscope, "SynOnlyTrained", build_syn_only)

    if "real-all" in config.arms:
        def build_real_all() -> str:
            pooled = _pooled_real_dataset(datasets, site_ids, fold, splits)
            fp = fingerprint_dataset(pooled)
            seg = derive_seg_plan(fp)
            write_plan_file(cdir / "real_all.plan.json", seg, derive_gan_plan(seg),
                            derive_budget(fp, epochs=config.pretrain_epochs))
            schedule = LrSchedule(config.pretrain_base_rate, config.pretrain_epochs)
            model = fit_segmenter(ReferenceSegmenter(seg, pooled.num_classes),
                                  pooled.labeled_items(), config.pretrain_epochs,
                                  schedule)
            path = save_segmenter(model, cdir / "real_all.bin")
            return sha256_hex(path.read_bytes())

        _stage(ctx, scope, "RealAllTrained", build_real_all)

    if "fedavg" in config.arms:
        def build_fedavg() -> str:
            model, seg, gan, budget = fedavg_train(datasets, site_ids, fold,
                                                   splits, config)
            write_plan_file(cdir / "fedavg.plan.json", seg, gan, budget)
            path = save_segmenter(model, cdir / "fedavg.bin")
            return sha256_hex(path.read_bytes())

        _stage(ctx, scope, "FedAvgTrained", build_fedavg)


def run_experiment(config: FederationConfig, datasets: dict[str, Dataset],
                   out_dir: str | Path, *,
                   provider: EmbeddingProvider | None = None) -> dict:
    """Run the full experiment: site pipelines, merge, pretrain, all arms,
    evaluation, and reports.  Deterministic for a fixed (config, data, seed);
    resumable; site order never matters."""
    if set(datasets) != set(config.sites):
        raise DataError(
            f"datasets {sorted(datasets)} do not match configured sites "
            f"{list(config.sites)}"
        )
    for sid, ds in datasets.items():
        if ds.site_id != sid:
            raise DataError(f"dataset under key {sid!r} declares site {ds.site_id!r}")
    if len({ds.num_classes for ds in datasets.values()}) > 1:
        raise DataError("sites disagree on the number of classes")

    provider = provider if provider is not None else ToyEmbeddingProvider()
    site_ids = sorted(config.sites)
    ctx = RunContext(out_dir)
    run_dir = ctx.run_dir

    config_bytes = canonical_json(config.to_dict()).encode("utf-8")

    def build_config() -> str:
        (run_dir / "config.json").write_bytes(config_bytes)
        return sha256_hex(config_bytes)

    _stage(ctx, "run", "ConfigWritten", build_config)
    if (run_dir / "config.json").read_bytes() != config_bytes:
        raise DataError("run directory belongs to a different configuration")

    splits = {sid: make_fold_splits(datasets[sid], config.seed) for sid in site_ids}

    for fold in range(N_FOLDS):
        for sid in site_ids:
            run_site_pipeline(run_dir, datasets[sid], fold, config,
                              ctx=ctx, provider=provider)
        _central_stages(ctx, config, datasets, splits, site_ids, fold)

    reports = run_dir / "reports"

    def build_metrics() -> str:
        rows = _build_metric_rows(run_dir, config, datasets, site_ids, splits)
        path = write_metric_report(reports / "metrics.csv", rows)
        return sha256_hex(path.read_bytes())

    _stage(ctx, "run", "Evaluated", build_metrics)

    def build_summary() -> str:
        rows = read_metric_report(reports / "metrics.csv")
        path = reports / "summary.txt"
        path.write_text(summarize_metric_rows(rows), encoding="utf-8")
        return sha256_hex(path.read_bytes())

    _stage(ctx, "run", "Summarized", build_summary)

    def build_stats() -> str:
        rows = read_metric_report(reports / "metrics.csv")
        stat_rows = compute_stats(rows, alpha=config.alpha)
        write_stats_report(reports / "stats.csv", reports / "stats.txt",
                           stat_rows, config.alpha)
        return sha256_hex((reports / "stats.csv").read_bytes())

    _stage(ctx, "run", "StatsComputed", build_stats)

    return {
        "run_dir": str(run_dir),
        "sites": list(site_ids),
        "arms": list(config.arms),
        "metrics_csv": str(reports / "metrics.csv"),
        "summary_txt": str(reports / "summary.txt"),
        "stats_csv": str(reports / "stats.csv"),
        "stats_txt": str(reports / "stats.txt"),
        "events": ctx.log.count,
    }


# ---------------------------------------------------------------------------
# Scaling study (in memory)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingPoint:
    """Cross-site accuracy gap at one federation size.

    ``fold_deltas`` holds, per fold, the mean over ordered cross-site pairs
    (model site != test site) of Dice(syn-real) - Dice(real)."""

    n_sites: int
    fold_deltas: tuple[float, ...]
    mean_delta_ds: float
    fold_wins: int
    mean_synreal_ds: float
    mean_real_ds: float


def _mean_ds(model: ReferenceSegmenter, items) -> float:
    per = []
    for img, mask in items:
        pred = model.predict(img)
        per.append(100.0 * sum(
            dice(pred, mask, class_id=c) for c in range(1, model.num_classes + 1)
        ) / model.num_classes)
    return sum(per) / len(per)


def _shared_view(img: Image2D) -> Image2D:
    """Reproduce in memory what a recipient of a published image sees.

    Shared images travel as integer-valued image files and every loaded
    image is re-normalized to span [0, 1], so memorization filtering and any
    training on shared data must operate on that representation rather than
    on raw sampler output.
    """
    scale = 65535.0 if img.channels == 1 else 255.0
    q = np.round(img.pixels * scale).astype(np.float64)
    lo, hi = q.min(), q.max()
    arr = (q - lo) / (hi - lo) if hi > lo else np.zeros_like(q)
    return Image2D(pixels=arr.astype(np.float32), spacing=img.spacing)


def run_scaling_study(datasets: dict[str, Dataset],
                      config: FederationConfig | None = None,
                      site_counts: Sequence[int] = (2, 4, 8), *,
                      provider: EmbeddingProvider | None = None) -> list[ScalingPoint]:
    """Measure how the syn-real advantage grows with federation size.

    Per-site work (generator, filter, bundle, local baseline) happens once;
    for every requested size N the first N sites' bundles are merged, a
    general model is pretrained and fine-tuned at each participant, and all
    models are scored on every participant's test folds.  Everything runs in
    memory with the same primitives as the persisted pipeline.
    """
    site_ids = sorted(datasets)
    if config is None:
        config = FederationConfig(sites=tuple(site_ids))
    provider = provider if provider is not None else ToyEmbeddingProvider()
    counts = sorted(set(int(n) for n in site_counts))
    if counts[0] < 2:
        raise DataError("scaling study needs at least 2 sites per point")
    if counts[-1] > len(site_ids):
        raise DataError(
            f"requested {counts[-1]} sites but only {len(site_ids)} are available"
        )
    used = site_ids[:counts[-1]]
    splits = {sid: make_fold_splits(datasets[sid], config.seed) for sid in used}

    # One pass of local work per (fold, site).
    bundle_items: dict[tuple[int, str], list] = {}
    local_models: dict[tuple[int, str], ReferenceSegmenter] = {}
    train_items: dict[tuple[int, str], list] = {}
    test_items: dict[tuple[int, str], list] = {}
    for fold in range(N_FOLDS):
        for sid in used:
            ds = datasets[sid]
            split = splits[sid][fold]
            train_ds = subset_by_patients(ds, split.train_patients)
            fp = fingerprint_dataset(train_ds)
            seg = derive_seg_plan(fp)
            budget = derive_budget(fp, epochs=config.local_epochs)

            gen = ReferenceGenerator(
                derive_gan_plan(seg), budget,
                seed=_derive_seed(config.seed, fold, sid, "generator"),
                grid=config.generator_grid,
                noise_amplitude=config.generator_noise,
                library_cap=config.generator_library_cap,
            )
            fit_generator(gen, train_ds.images())
            syn = [_shared_view(s)
                   for s in sample(gen, budget.n_gen,
                                   seed=_derive_seed(config.seed, fold, sid,
                                                     "sample"))]
            cal = calibrate_threshold(
                train_ds, provider, p=config.percentile,
                seed=_derive_seed(config.seed, fold, sid, "calibration"))
            report = filter_synthetic(syn, train_ds, cal, provider)
            kept = [syn[i] for i, e in enumerate(report.entries) if e[3] == "kept"]
            if not kept:
                raise DataError(
                    f"memorization filter discarded every synthetic image at {sid}"
                )

            schedule = LrSchedule(config.local_base_rate, budget.epochs)
            local = fit_segmenter(ReferenceSegmenter(seg, ds.num_classes),
                                  train_ds.labeled_items(), budget.epochs, schedule)
            bundle_items[(fold, sid)] = [(img, local.predict(img)) for img in kept]
            local_models[(fold, sid)] = local
            train_items[(fold, sid)] = train_ds.labeled_items()
            test_items[(fold, sid)] = subset_by_patients(
                ds, split.test_patients).labeled_items()

    points = []
    for n in counts:
        participants = used[:n]
        fold_deltas, syn_means, real_means = [], [], []
        for fold in range(N_FOLDS):
            merged_list = [item for sid in participants
                           for item in bundle_items[(fold, sid)]]
            merged = Dataset(
                site_id="merged",
                patients=tuple(PatientRecord(f"m{i:05d}", (item,))
                               for i, item in enumerate(merged_list)),
                modality=datasets[participants[0]].modality,
                num_classes=datasets[participants[0]].num_classes,
            )
            general, _, _, _ = pretrain_general(merged, config)
            tuned = {sid: finetune_at_site(general, train_items[(fold, sid)], config)
                     for sid in participants}

            deltas, syn_all, real_all = [], [], []
            for i in participants:
                for j in participants:
                    if i == j:
                        continue
                    items = test_items[(fold, j)]
                    ds_syn = _mean_ds(tuned[i], items)
                    ds_real = _mean_ds(local_models[(fold, i)], items)
                    deltas.append(ds_syn - ds_real)
                    syn_all.append(ds_syn)
                    real_all.append(ds_real)
            fold_deltas.append(statistics.mean(deltas))
            syn_means.append(statistics.mean(syn_all))
            real_means.append(statistics.mean(real_all))

        points.append(ScalingPoint(
            n_sites=n,
            fold_deltas=tuple(fold_deltas),
            mean_delta_ds=statistics.mean(fold_deltas),
            fold_wins=sum(1 for d in fold_deltas if d > 0),
            mean_synreal_ds=statistics.mean(syn_means),
            mean_real_ds=statistics.mean(real_means),
        ))
    return points
