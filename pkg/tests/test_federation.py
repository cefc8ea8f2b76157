"""Orchestration tests: toy benchmark family, site phase machine, resumable
run directories, bundle integrity, merging, central training, reports, and
the scaling study."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from synfed.core import (
    DataError,
    Dataset,
    Image2D,
    PatientRecord,
    SegMask,
    canonical_json,
    sha256_hex,
)
from synfed.federation import (
    ARMS,
    PHASES,
    FederationConfig,
    RunContext,
    ScalingPoint,
    SiteState,
    StatRow,
    _derive_seed,
    _hash_tree,
    compute_stats,
    fedavg_train,
    finetune_at_site,
    merge_bundles,
    pretrain_general,
    run_experiment,
    run_scaling_study,
    run_site_pipeline,
    summarize_metric_rows,
    validate_bundle,
    write_stats_report,
)
from synfed.memfilter import ToyEmbeddingProvider
from synfed.metrics import read_metric_report
from synfed.planner import TrainingBudget
from synfed.toybench import (
    FAMILY_SIZE,
    make_toy_family,
    make_toy_site,
    site_name,
)

# ---------------------------------------------------------------------------
# Shared fixtures: a small 2-site family and a fast configuration
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def family2():
    """Two sites from opposite ends of the family, so local models do not
    transfer and the syn-real arm has something to improve."""
    sites = [make_toy_site(0, seed=0), make_toy_site(4, seed=0)]
    return {ds.site_id: ds for ds in sites}


@pytest.fixture(scope="module")
def quick_cfg():
    return FederationConfig(sites=("site-a", "site-e"), seed=0)


@pytest.fixture(scope="module")
def exp_run(tmp_path_factory, quick_cfg, family2):
    out = tmp_path_factory.mktemp("experiment") / "run"
    result = run_experiment(quick_cfg, family2, out)
    return Path(out), result


def _tree(root: Path, exclude: tuple[str, ...] = ("events.log",)) -> dict[str, bytes]:
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(Path(root).rglob("*"))
        if p.is_file() and p.name not in exclude
    }


def _events_without_time(path: Path) -> list[str]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return ["\t".join(line.split("\t")[:4]) for line in lines]


class _FlakyProvider:
    """Delegates to the toy embedding but fails on one specific call."""

    def __init__(self, fail_at: int):
        self._inner = ToyEmbeddingProvider()
        self.name = self._inner.name
        self.dimension = self._inner.dimension
        self.calls = 0
        self.fail_at = fail_at

    def embed(self, images, refs):
        self.calls += 1
        if self.calls == self.fail_at:
            raise RuntimeError("simulated transport failure")
        return self._inner.embed(images, refs)


# ---------------------------------------------------------------------------
# Toy benchmark family
# ---------------------------------------------------------------------------


class TestToyBench:
    def test_family_shape(self):
        family = make_toy_family(3, seed=0, n_patients=4, images_per_patient=2)
        assert sorted(family) == ["site-a", "site-b", "site-c"]
        for sid, ds in family.items():
            assert ds.site_id == sid
            assert ds.n_patients == 4
            assert ds.n_images == 8
            assert ds.num_classes == 1
            for img, mask in ds.labeled_items():
                assert img.pixels.shape == (32, 32)
                assert mask is not None

    def test_deterministic(self):
        a = make_toy_site(2, seed=5, n_patients=3, images_per_patient=2)
        b = make_toy_site(2, seed=5, n_patients=3, images_per_patient=2)
        for pa, pb in zip(a.patients, b.patients):
            for (ia, ma), (ib, mb) in zip(pa.items, pb.items):
                assert np.array_equal(ia.pixels, ib.pixels)
                assert np.array_equal(ma.labels, mb.labels)

    def test_sites_are_shifted(self):
        """Opposite family members place blobs in different image regions."""
        near = make_toy_site(0, seed=0, n_patients=4)
        far = make_toy_site(4, seed=0, n_patients=4)

        def centroid(ds):
            pts = np.argwhere(np.stack([m.labels for _, m in ds.labeled_items()]).sum(0) > 0)
            return pts.mean(axis=0)

        assert np.linalg.norm(centroid(near) - centroid(far)) > 6.0

    def test_masks_nontrivial(self):
        ds = make_toy_site(1, seed=3, n_patients=3)
        for _, mask in ds.labeled_items():
            fg = int(mask.labels.sum())
            assert 10 < fg < mask.labels.size // 2

    def test_intensity_progression(self):
        lo = make_toy_site(0, seed=0, n_patients=3)
        hi = make_toy_site(7, seed=0, n_patients=3)

        def fg_mean(ds):
            vals = [img.pixels[mask.labels == 1].mean()
                    for img, mask in ds.labeled_items()]
            return float(np.mean(vals))

        assert fg_mean(hi) - fg_mean(lo) > 0.10

    def test_bad_site_index(self):
        with pytest.raises(ValueError):
            make_toy_site(FAMILY_SIZE)
        with pytest.raises(ValueError):
            make_toy_family(0)

    def test_site_names(self):
        assert site_name(0) == "site-a"
        assert site_name(7) == "site-h"


# ---------------------------------------------------------------------------
# Phase machine and configuration
# ---------------------------------------------------------------------------


class TestSiteState:
    def test_full_progression(self):
        st = SiteState(site_id="site-a")
        for phase in PHASES[1:]:
            st.advance(phase)
        assert st.phase == "FineTuned"

    def test_no_skipping(self):
        st = SiteState(site_id="site-a")
        with pytest.raises(RuntimeError, match="one step"):
            st.advance("Planned")

    def test_no_regression(self):
        st = SiteState(site_id="site-a", phase="Filtered")
        with pytest.raises(RuntimeError):
            st.advance("Planned")
        with pytest.raises(RuntimeError):
            st.advance("Filtered")

    def test_unknown_phase(self):
        with pytest.raises(ValueError):
            SiteState(site_id="x", phase="Bogus")
        with pytest.raises(ValueError):
            SiteState(site_id="x").advance("Bogus")


class TestFederationConfig:
    def test_canonical_order(self):
        cfg = FederationConfig(sites=("site-b", "site-a"),
                               arms=("real", "syn-real"))
        assert cfg.sites == ("site-a", "site-b")
        assert cfg.arms == ("real", "syn-real")
        assert list(cfg.arms) == [a for a in ARMS if a in cfg.arms]

    def test_round_trip(self):
        cfg = FederationConfig(sites=("s1", "s0"), seed=7, fedavg_rounds=3,
                               arms=("fedavg", "real"))
        again = FederationConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(DataError, match="unknown configuration keys"):
            FederationConfig.from_dict({"sites": ["a"], "bogus": 1})

    def test_unknown_arm_rejected(self):
        with pytest.raises(ValueError, match="unknown arms"):
            FederationConfig(sites=("a",), arms=("real", "imaginary"))

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            FederationConfig(sites=())
        with pytest.raises(ValueError):
            FederationConfig(sites=("a", "a"))
        with pytest.raises(ValueError):
            FederationConfig(sites=("bad/site",))
        with pytest.raises(ValueError):
            FederationConfig(sites=("a",), percentile=101.0)
        with pytest.raises(ValueError):
            FederationConfig(sites=("a",), alpha=0.0)
        with pytest.raises(ValueError):
            FederationConfig(sites=("a",), finetune_epochs=-1)
        with pytest.raises(ValueError):
            FederationConfig(sites=("a",), fedavg_rounds=0)

    def test_from_dict_invalid_becomes_data_error(self):
        with pytest.raises(DataError, match="invalid configuration"):
            FederationConfig.from_dict({"sites": ["a"], "alpha": 2.0})

    def test_derive_seed_stable_and_distinct(self):
        a = _derive_seed(0, 1, "site-a", "generator")
        assert a == _derive_seed(0, 1, "site-a", "generator")
        assert a != _derive_seed(0, 1, "site-a", "sample")
        assert a != _derive_seed(0, 2, "site-a", "generator")
        assert 0 <= a < 2 ** 63


# ---------------------------------------------------------------------------
# Site pipeline
# ---------------------------------------------------------------------------


class TestSitePipeline:
    def test_publishes_valid_bundle(self, tmp_path, quick_cfg, family2):
        bundle_dir = run_site_pipeline(tmp_path / "run", family2["site-a"], 0,
                                       quick_cfg)
        bundle = validate_bundle(bundle_dir)
        assert bundle.site_id == "site-a"
        assert bundle.dataset.n_images >= 1
        for p in bundle.dataset.patients:
            assert p.patient_id.startswith("site-a-syn")
            assert all(mask is not None for _, mask in p.items)
        assert not any(bundle_dir.rglob("*.bin"))
        assert bundle.generator_version.startswith("tile-mosaic/")

        completed = json.loads(
            (tmp_path / "run" / "state.json").read_text())["completed"]
        for phase in ("Fingerprinted", "Planned", "GenTrained", "Synthesized",
                      "Filtered", "BundlePublished", "AwaitingGeneralModel"):
            assert f"fold0/site-a:{phase}" in completed

    def test_created_step_matches_event_log(self, tmp_path, quick_cfg, family2):
        bundle_dir = run_site_pipeline(tmp_path / "run", family2["site-a"], 0,
                                       quick_cfg)
        bundle = validate_bundle(bundle_dir)
        events = (tmp_path / "run" / "events.log").read_text().splitlines()
        published = [e.split("\t") for e in events
                     if e.split("\t")[2] == "BundlePublished"]
        assert len(published) == 1
        assert int(published[0][0]) == bundle.created_step

    def test_event_log_format(self, tmp_path, quick_cfg, family2):
        run_site_pipeline(tmp_path / "run", family2["site-e"], 1, quick_cfg)
        lines = (tmp_path / "run" / "events.log").read_text().splitlines()
        assert [int(line.split("\t")[0]) for line in lines] == list(
            range(1, len(lines) + 1))
        for line in lines:
            fields = line.split("\t")
            assert len(fields) == 5
            assert fields[1] == "fold1/site-e"

    def test_rerun_is_noop(self, tmp_path, quick_cfg, family2):
        run_dir = tmp_path / "run"
        run_site_pipeline(run_dir, family2["site-a"], 0, quick_cfg)
        before = _hash_tree(run_dir, skip=frozenset())
        run_site_pipeline(run_dir, family2["site-a"], 0, quick_cfg)
        assert _hash_tree(run_dir, skip=frozenset()) == before

    def test_failure_preserves_phase_then_resumes(self, tmp_path, quick_cfg,
                                                  family2):
        run_dir = tmp_path / "run"
        with pytest.raises(RuntimeError, match="simulated"):
            run_site_pipeline(run_dir, family2["site-a"], 0, quick_cfg,
                              provider=_FlakyProvider(fail_at=1))
        completed = json.loads((run_dir / "state.json").read_text())["completed"]
        assert "fold0/site-a:Synthesized" in completed
        assert "fold0/site-a:Filtered" not in completed
        generator_before = (run_dir / "sites" / "site-a" / "fold0"
                            / "generator.bin").read_bytes()

        bundle_dir = run_site_pipeline(run_dir, family2["site-a"], 0, quick_cfg)
        validate_bundle(bundle_dir)
        after = (run_dir / "sites" / "site-a" / "fold0"
                 / "generator.bin").read_bytes()
        assert after == generator_before

    def test_unknown_site_rejected(self, tmp_path, quick_cfg):
        stranger = make_toy_site(3, seed=0, n_patients=5, images_per_patient=1)
        with pytest.raises(DataError, match="not in the configuration"):
            run_site_pipeline(tmp_path / "run", stranger, 0, quick_cfg)

    def test_fold_out_of_range(self, tmp_path, quick_cfg, family2):
        with pytest.raises(ValueError):
            run_site_pipeline(tmp_path / "run", family2["site-a"], 5, quick_cfg)


# ---------------------------------------------------------------------------
# Bundle validation and merging
# ---------------------------------------------------------------------------


def _fake_bundle(root: Path, sid: str, *, num_classes: int = 1, n: int = 2,
                 extra_bin: bool = False, bad_pid: bool = False,
                 missing_mask: bool = False) -> Path:
    """Hand-built bundle directory with a consistent content hash."""
    from synfed.core import save_dataset

    patients = []
    for i in range(n):
        pid = "patient-007" if bad_pid and i == 0 else f"{sid}-syn{i:05d}"
        img = Image2D(pixels=np.linspace(0.1 * (i + 1), 0.9, 64,
                                         dtype=np.float32).reshape(8, 8))
        mask = None if missing_mask and i == 0 else SegMask(
            labels=(np.arange(64).reshape(8, 8) % (num_classes + 1)).astype(np.int32),
            num_classes=num_classes)
        patients.append(PatientRecord(pid, ((img, mask),)))
    ds = Dataset(site_id=sid, patients=tuple(patients), modality="toy",
                 num_classes=num_classes)

    bdir = root / sid / "bundle"
    save_dataset(ds, bdir)
    report = "image_ref,nn_ref,distance,verdict\n" + "".join(
        f"{p.patient_id}/0,r/0,1.0,kept\n" for p in patients)
    (bdir / "filter_report.csv").write_text(report, encoding="utf-8")
    (bdir / "provenance.json").write_text(canonical_json({
        "site_id": sid,
        "seed": 0,
        "generator_seed": 0,
        "budget": TrainingBudget(n_steps=1, n_gen=10).to_dict(),
        "plan_hash": "0" * 64,
        "generator_version": "tile-mosaic/v1",
        "filter_report_sha256": sha256_hex(report.encode("utf-8")),
        "created_step": 1,
        "n_images": n,
    }), encoding="utf-8")
    if extra_bin:
        (bdir / "weights.bin").write_bytes(b"\x00\x01")
    (bdir / "bundle.sha256").write_text(_hash_tree(bdir) + "\n", encoding="utf-8")
    return bdir


class TestBundleValidation:
    def test_fake_bundle_round_trip(self, tmp_path):
        bdir = _fake_bundle(tmp_path, "s0")
        bundle = validate_bundle(bdir)
        assert bundle.site_id == "s0"
        assert bundle.dataset.n_images == 2

    def test_corrupted_filter_report_rejected(self, tmp_path, quick_cfg, family2):
        bdir = run_site_pipeline(tmp_path / "run", family2["site-a"], 0, quick_cfg)
        report = bdir / "filter_report.csv"
        report.write_text(report.read_text() + "tampered/0,r/0,0.0,kept\n")
        with pytest.raises(DataError, match="hash mismatch"):
            validate_bundle(bdir)

    def test_tampered_hash_file_rejected(self, tmp_path):
        bdir = _fake_bundle(tmp_path, "s0")
        (bdir / "bundle.sha256").write_text("0" * 64 + "\n")
        with pytest.raises(DataError, match="content hash mismatch"):
            validate_bundle(bdir)

    def test_missing_files_rejected(self, tmp_path):
        bdir = _fake_bundle(tmp_path, "s0")
        (bdir / "provenance.json").unlink()
        with pytest.raises(DataError, match="missing provenance.json"):
            validate_bundle(bdir)

    def test_model_files_rejected(self, tmp_path):
        bdir = _fake_bundle(tmp_path, "s0", extra_bin=True)
        with pytest.raises(DataError, match="model parameter files"):
            validate_bundle(bdir)

    def test_non_synthetic_patient_id_rejected(self, tmp_path):
        bdir = _fake_bundle(tmp_path, "s0", bad_pid=True)
        with pytest.raises(DataError, match="non-synthetic patient id"):
            validate_bundle(bdir)

    def test_unlabeled_item_rejected(self, tmp_path):
        bdir = _fake_bundle(tmp_path, "s0", missing_mask=True)
        with pytest.raises(DataError, match="machine label"):
            validate_bundle(bdir)


class TestMergeBundles:
    def test_order_invariant_bytes(self, tmp_path):
        a = _fake_bundle(tmp_path / "x", "s0")
        b = _fake_bundle(tmp_path / "x", "s1", n=3)
        m1 = merge_bundles([a, b], out_dir=tmp_path / "m1")
        m2 = merge_bundles([b, a], out_dir=tmp_path / "m2")
        assert [p.patient_id for p in m1.patients] == \
               [p.patient_id for p in m2.patients]
        assert (tmp_path / "m1" / "manifest.json").read_bytes() == \
               (tmp_path / "m2" / "manifest.json").read_bytes()
        assert m1.n_images == 5

    def test_patients_sorted_and_grouped(self, tmp_path):
        a = _fake_bundle(tmp_path / "x", "s0")
        b = _fake_bundle(tmp_path / "x", "s1")
        merged = merge_bundles([b, a])
        ids = [p.patient_id for p in merged.patients]
        assert ids == sorted(ids)
        assert ids[0].startswith("s0-")

    def test_duplicate_site_rejected(self, tmp_path):
        a = _fake_bundle(tmp_path / "x", "s0")
        a2 = _fake_bundle(tmp_path / "y", "s0")
        with pytest.raises(DataError, match="duplicate bundle"):
            merge_bundles([a, a2])

    def test_class_count_mismatch_rejected(self, tmp_path):
        a = _fake_bundle(tmp_path / "x", "s0", num_classes=1)
        c = _fake_bundle(tmp_path / "x", "s2", num_classes=2)
        with pytest.raises(DataError, match="class count"):
            merge_bundles([a, c])

    def test_empty_rejected(self):
        with pytest.raises(DataError, match="no bundles"):
            merge_bundles([])


# ---------------------------------------------------------------------------
# Central training and fine-tuning
# ---------------------------------------------------------------------------


class TestCentralTraining:
    def test_pretrain_uses_merged_fingerprint(self, tmp_path):
        a = _fake_bundle(tmp_path, "s0")
        b = _fake_bundle(tmp_path, "s1", n=3)
        merged = merge_bundles([a, b])
        cfg = FederationConfig(sites=("s0", "s1"), pretrain_epochs=4)
        model, seg, gan, budget = pretrain_general(merged, cfg)
        assert model.num_classes == 1
        assert budget.epochs == 4
        assert budget.n_steps == merged.n_images
        assert gan.output_size == seg.patch_size

    def test_finetune_zero_epochs_is_identity(self, tmp_path):
        a = _fake_bundle(tmp_path, "s0")
        merged = merge_bundles([a])
        cfg = FederationConfig(sites=("s0",), pretrain_epochs=4,
                               finetune_epochs=0)
        general, *_ = pretrain_general(merged, cfg)
        tuned = finetune_at_site(general, merged.labeled_items(), cfg)
        assert np.array_equal(tuned.parameter_vector(),
                              general.parameter_vector())

    def test_finetune_order_independent(self, family2, tmp_path):
        a = _fake_bundle(tmp_path, "s0")
        cfg = FederationConfig(sites=("s0",), pretrain_epochs=4,
                               finetune_epochs=3, finetune_base_rate=0.05)
        general, *_ = pretrain_general(merge_bundles([a]), cfg)
        items_a = family2["site-a"].labeled_items()[:3]
        items_b = family2["site-e"].labeled_items()[:3]

        first_a = finetune_at_site(general, items_a, cfg)
        first_b = finetune_at_site(general, items_b, cfg)
        again_b = finetune_at_site(general, items_b, cfg)
        again_a = finetune_at_site(general, items_a, cfg)
        assert np.array_equal(first_a.parameter_vector(),
                              again_a.parameter_vector())
        assert np.array_equal(first_b.parameter_vector(),
                              again_b.parameter_vector())

    def test_fedavg_site_order_invariant(self, family2):
        cfg = FederationConfig(sites=("site-a", "site-e"), fedavg_rounds=3,
                               arms=("fedavg",))
        from synfed.core import make_fold_splits
        splits = {sid: make_fold_splits(ds, cfg.seed)
                  for sid, ds in family2.items()}
        m1, *_ = fedavg_train(family2, ["site-a", "site-e"], 0, splits, cfg)
        m2, *_ = fedavg_train(family2, ["site-e", "site-a"], 0, splits, cfg)
        assert np.array_equal(m1.parameter_vector(), m2.parameter_vector())


# ---------------------------------------------------------------------------
# Full experiment
# ---------------------------------------------------------------------------


class TestRunExperiment:
    def test_reports_cover_full_grid(self, exp_run):
        run_dir, result = exp_run
        rows = read_metric_report(result["metrics_csv"])
        settings = sorted({r[0] for r in rows})
        assert settings == ["real-site-a", "real-site-e",
                            "syn-real-site-a", "syn-real-site-e"]
        index = {(s, t, m, f) for s, t, m, f, _ in rows}
        for s in settings:
            for t in ("site-a", "site-e"):
                for m in ("ds", "hd95"):
                    for f in range(5):
                        assert (s, t, m, f) in index
        assert len(rows) == len(index) == 4 * 2 * 2 * 5

        ds_values = [v for s, t, m, f, v in rows if m == "ds"]
        assert all(v is not None and 0.0 <= v <= 100.0 for v in ds_values)

    def test_summary_and_stats_written(self, exp_run):
        run_dir, result = exp_run
        summary = Path(result["summary_txt"]).read_text()
        assert "syn-real-site-a" in summary
        assert "mean" in summary.splitlines()[0]

        stats_lines = Path(result["stats_csv"]).read_text().splitlines()
        assert stats_lines[0].startswith("comparison,metric,")
        assert len(stats_lines) >= 2  # distant sites: ds comparison must exist
        for line in stats_lines[1:]:
            p = float(line.split(",")[4])
            assert 0.0 <= p <= 1.0
        assert "Paired one-sided tests" in Path(result["stats_txt"]).read_text()

    def test_rerun_changes_no_bytes(self, exp_run, quick_cfg, family2):
        run_dir, _ = exp_run
        before = _hash_tree(run_dir, skip=frozenset())
        run_experiment(quick_cfg, family2, run_dir)
        assert _hash_tree(run_dir, skip=frozenset()) == before

    def test_site_order_invariance(self, exp_run, tmp_path, family2):
        run_dir, _ = exp_run
        reversed_cfg = FederationConfig(sites=("site-e", "site-a"), seed=0)
        reversed_data = dict(reversed(list(family2.items())))
        other = tmp_path / "swapped"
        run_experiment(reversed_cfg, reversed_data, other)
        assert _tree(other) == _tree(run_dir)
        assert _events_without_time(other / "events.log") == \
               _events_without_time(run_dir / "events.log")

    def test_interrupted_run_resumes_to_identical_bytes(self, exp_run, tmp_path,
                                                        quick_cfg, family2):
        run_dir, _ = exp_run
        other = tmp_path / "resumed"
        with pytest.raises(RuntimeError, match="simulated"):
            run_experiment(quick_cfg, family2, other,
                           provider=_FlakyProvider(fail_at=7))
        run_experiment(quick_cfg, family2, other)
        assert _tree(other) == _tree(run_dir)
        assert _events_without_time(other / "events.log") == \
               _events_without_time(run_dir / "events.log")

    def test_config_change_rejected(self, exp_run, family2):
        run_dir, _ = exp_run
        changed = FederationConfig(sites=("site-a", "site-e"), seed=1)
        with pytest.raises(DataError, match="different configuration"):
            run_experiment(changed, family2, run_dir)

    def test_datasets_must_match_sites(self, quick_cfg, family2, tmp_path):
        partial = {"site-a": family2["site-a"]}
        with pytest.raises(DataError, match="do not match configured sites"):
            run_experiment(quick_cfg, partial, tmp_path / "run")

    def test_fedavg_arm_in_reports(self, family2, tmp_path):
        cfg = FederationConfig(sites=("site-a", "site-e"), seed=0,
                               arms=("real", "fedavg"), fedavg_rounds=3,
                               local_epochs=8)
        result = run_experiment(cfg, family2, tmp_path / "run")
        rows = read_metric_report(result["metrics_csv"])
        settings = {r[0] for r in rows}
        assert "fedavg" in settings
        assert "real-site-a" in settings
        assert "no comparison available" in Path(result["stats_txt"]).read_text()


# ---------------------------------------------------------------------------
# Statistics over metric rows
# ---------------------------------------------------------------------------


def _paired_rows(delta_ds: float = 2.0, delta_hd: float = -1.0):
    """syn-real better than real by fixed margins on one model site."""
    rows = []
    for t in ("site-a", "site-b"):
        for f in range(5):
            base = 70.0 + f + (0.0 if t == "site-a" else 3.0)
            rows.append((f"real-{t}", t, "ds", f, base))
            rows.append((f"syn-real-{t}", t, "ds", f, base + delta_ds))
            rows.append((f"real-{t}", t, "hd95", f, 5.0 + f))
            rows.append((f"syn-real-{t}", t, "hd95", f, 5.0 + f + delta_hd))
    return rows


class TestComputeStats:
    def test_consistent_improvement_is_significant(self):
        stats = compute_stats(_paired_rows(), alpha=0.05)
        assert [s.metric for s in stats] == ["ds", "hd95"]
        for s in stats:
            assert s.comparison == "syn-real-vs-real"
            assert s.threshold == 0.05 / 2
            assert s.outcome.p_value < s.threshold
            assert s.significant

    def test_undefined_values_dropped(self):
        rows = [r for r in _paired_rows()]
        rows = [(s, t, m, f, None if (m == "hd95" and f == 0) else v)
                for s, t, m, f, v in rows]
        stats = compute_stats(rows, alpha=0.05)
        hd = [s for s in stats if s.metric == "hd95"][0]
        assert hd.n_pairs == 8  # two sites x five folds minus two dropped folds

    def test_no_pairs_no_stats(self):
        rows = [("real-site-a", "site-a", "ds", f, 50.0) for f in range(5)]
        assert compute_stats(rows) == []

    def test_degenerate_ties_skipped(self):
        rows = []
        for f in range(5):
            rows.append(("real-site-a", "site-a", "ds", f, 50.0))
            rows.append(("syn-real-site-a", "site-a", "ds", f, 50.0))
        assert compute_stats(rows) == []

    def test_stats_report_files(self, tmp_path):
        stats = compute_stats(_paired_rows(), alpha=0.05)
        write_stats_report(tmp_path / "stats.csv", tmp_path / "stats.txt",
                           stats, alpha=0.05)
        lines = (tmp_path / "stats.csv").read_text().splitlines()
        assert len(lines) == 3
        assert "significant" in (tmp_path / "stats.txt").read_text()


class TestSummarize:
    def test_aggregates_and_undefined(self):
        rows = []
        for f in range(5):
            rows.append(("real-s", "s", "ds", f, 78.0 + f))
        rows.append(("real-s", "s", "hd95", 0, 3.0))
        for f in range(1, 5):
            rows.append(("real-s", "s", "hd95", f, None))
        text = summarize_metric_rows(rows)
        lines = text.splitlines()
        assert lines[0].split()[:3] == ["setting", "test_site", "metric"]
        ds_line = next(l for l in lines if " ds " in f" {l} ")
        assert "80.0000" in ds_line
        hd_line = next(l for l in lines if "hd95" in l)
        assert "n/a" in hd_line and hd_line.rstrip().endswith("4")


# ---------------------------------------------------------------------------
# Scaling study
# ---------------------------------------------------------------------------


class TestScalingStudy:
    def test_smoke_two_sites(self):
        family = make_toy_family(2, seed=0)
        cfg = FederationConfig(sites=tuple(sorted(family)), seed=0,
                               local_epochs=8, pretrain_epochs=8,
                               finetune_epochs=4, finetune_base_rate=0.02)
        points = run_scaling_study(family, cfg, site_counts=(2,))
        assert len(points) == 1
        point = points[0]
        assert isinstance(point, ScalingPoint)
        assert point.n_sites == 2
        assert len(point.fold_deltas) == 5
        assert math.isfinite(point.mean_delta_ds)
        assert 0 <= point.fold_wins <= 5

    def test_rejects_bad_counts(self):
        family = make_toy_family(2, seed=0, n_patients=5, images_per_patient=1)
        with pytest.raises(DataError):
            run_scaling_study(family, site_counts=(1,))
        with pytest.raises(DataError):
            run_scaling_study(family, site_counts=(4,))
