import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synfed.core import DatasetFingerprint, canonical_json
from synfed.planner import (
    ArchStage,
    LrSchedule,
    derive_budget,
    derive_gan_plan,
    derive_seg_plan,
    lr_at,
    plan_document,
    plan_hash,
    read_plan_file,
    write_plan_file,
)


def _fp(rows, cols, n_images=100, n_patients=10, channels=1, num_classes=1):
    return DatasetFingerprint(
        median_size=(rows, cols), median_spacing=(1.0, 1.0),
        n_images=n_images, n_patients=n_patients,
        channels=channels, num_classes=num_classes,
    )


# sizes below 7 are excluded: the forced minimum of one pooling stage means a
# median of 4..6 pixels cannot keep a 4-pixel bottleneck (see design notes)
fingerprints = st.builds(
    _fp,
    rows=st.integers(8, 2048),
    cols=st.integers(8, 2048),
    n_images=st.integers(10, 10000),
    n_patients=st.integers(1, 10),
    channels=st.sampled_from([1, 3]),
    num_classes=st.integers(1, 4),
)


class TestSegPlan:
    def test_square_224(self):
        plan = derive_seg_plan(_fp(224, 224))
        assert len(plan.encoder_stages) == 5
        assert all(s.stride == (2, 2) for s in plan.encoder_stages)
        assert plan.patch_size == (224, 224)
        assert plan.bottleneck_size() == (7, 7)

    def test_432_rounds_up_to_448(self):
        plan = derive_seg_plan(_fp(432, 432))
        assert len(plan.encoder_stages) == 5
        assert plan.patch_size == (448, 448)

    def test_tiny_axis_clamps_to_one_pool(self):
        plan = derive_seg_plan(_fp(4, 4))
        assert len(plan.encoder_stages) == 1
        assert plan.patch_size == (4, 4)

    def test_channel_progression(self):
        plan = derive_seg_plan(_fp(512, 512))
        assert [s.channels for s in plan.encoder_stages] == [32, 64, 128, 256, 512]

    def test_anisotropic_strides_and_kernels(self):
        # column axis pools twice then idles; row axis pools all five stages
        plan = derive_seg_plan(_fp(224, 16))
        assert plan.patch_size == (224, 16)
        assert [s.stride for s in plan.encoder_stages] == [
            (2, 2), (2, 2), (2, 1), (2, 1), (2, 1)]
        assert all(s.kernel == (3, 3) for s in plan.encoder_stages)

    def test_thin_axis_gets_kernel_one(self):
        plan = derive_seg_plan(_fp(224, 4))
        # column shrinks to 2 after its single pool; later stages see < 3
        assert plan.encoder_stages[0].kernel == (3, 3)
        assert all(s.kernel == (3, 1) for s in plan.encoder_stages[1:])

    def test_decoder_mirrors_encoder(self):
        plan = derive_seg_plan(_fp(100, 300))
        assert plan.decoder_stages == tuple(reversed(plan.encoder_stages))

    @settings(max_examples=200, deadline=None)
    @given(f=fingerprints)
    def test_divisibility_and_bottleneck(self, f):
        plan = derive_seg_plan(f)
        for axis in (0, 1):
            assert plan.patch_size[axis] % plan.stride_product(axis) == 0
            assert plan.patch_size[axis] >= f.median_size[axis]
        assert min(plan.bottleneck_size()) >= 4

    @settings(max_examples=100, deadline=None)
    @given(f=fingerprints)
    def test_serialization_deterministic(self, f):
        a = derive_seg_plan(f)
        b = derive_seg_plan(f)
        assert canonical_json(a.to_dict()) == canonical_json(b.to_dict())
        assert plan_hash(a) == plan_hash(b)


class TestGanPlan:
    def test_pure_mirror(self):
        seg = derive_seg_plan(_fp(224, 224))
        gan = derive_gan_plan(seg)
        assert gan.generator_stages == tuple(reversed(seg.encoder_stages))
        assert gan.discriminator_stages == seg.encoder_stages
        assert gan.output_size == seg.patch_size

    def test_latent_grid_from_224(self):
        gan = derive_gan_plan(derive_seg_plan(_fp(224, 224)))
        rows, cols = gan.output_size
        for st_ in gan.generator_stages:
            rows //= st_.stride[0]
            cols //= st_.stride[1]
        assert (rows, cols) == (7, 7)

    def test_mixed_stride_copied_verbatim(self):
        seg = derive_seg_plan(_fp(224, 16))
        gan = derive_gan_plan(seg)
        strides = [s.stride for s in gan.generator_stages]
        assert strides == [s.stride for s in reversed(seg.encoder_stages)]
        assert (2, 1) in strides

    @settings(max_examples=200, deadline=None)
    @given(f=fingerprints)
    def test_mirror_property(self, f):
        seg = derive_seg_plan(f)
        gan = derive_gan_plan(seg)
        assert gan.generator_stages == tuple(reversed(seg.encoder_stages))


class TestBudget:
    @pytest.mark.parametrize("n,expect_gen", [(1000, 10000), (1, 10), (612, 6120)])
    def test_scaling_rule(self, n, expect_gen):
        b = derive_budget(_fp(64, 64, n_images=n, n_patients=1))
        assert b.n_steps == n
        assert b.n_gen == expect_gen
        assert b.warmup_fraction == 0.1

    @settings(max_examples=100, deadline=None)
    @given(n=st.integers(1, 10**6), extra=st.integers(1, 10**6))
    def test_monotone_in_dataset_size(self, n, extra):
        small = derive_budget(_fp(64, 64, n_images=n, n_patients=1))
        large = derive_budget(_fp(64, 64, n_images=n + extra, n_patients=1))
        assert large.n_steps >= small.n_steps
        assert large.n_gen >= small.n_gen


class TestLrSchedule:
    def test_ramp_midpoint(self):
        s = LrSchedule(base_rate=1.0, total_epochs=100)
        assert lr_at(s, 4) == pytest.approx(0.5)

    def test_ramp_endpoint_reaches_base(self):
        s = LrSchedule(base_rate=1.0, total_epochs=100)
        assert lr_at(s, 9) == pytest.approx(1.0)

    def test_final_epoch_decay(self):
        s = LrSchedule(base_rate=1.0, total_epochs=100)
        assert lr_at(s, 99) == pytest.approx((1.0 / 90.0) ** 0.9)

    def test_first_decay_epoch_continuous_with_ramp(self):
        s = LrSchedule(base_rate=2.0, total_epochs=100)
        assert lr_at(s, 10) == pytest.approx(2.0)

    def test_epoch_out_of_range(self):
        s = LrSchedule(base_rate=1.0, total_epochs=10)
        with pytest.raises(ValueError):
            lr_at(s, 10)
        with pytest.raises(ValueError):
            lr_at(s, -1)

    @settings(max_examples=200, deadline=None)
    @given(total=st.integers(1, 500), base=st.floats(1e-6, 10.0),
           data=st.data())
    def test_nonnegative_and_boundary_step(self, total, base, data):
        s = LrSchedule(base_rate=base, total_epochs=total)
        epoch = data.draw(st.integers(0, total - 1))
        rate = lr_at(s, epoch)
        assert rate >= 0.0
        w = s.warmup_epochs
        if epoch == w and w < total:
            ramp_step = base / w
            assert abs(lr_at(s, w) - lr_at(s, w - 1)) <= ramp_step + 1e-12


class TestPlanFile:
    def test_round_trip(self, tmp_path):
        f = _fp(224, 160, n_images=200, n_patients=20)
        seg = derive_seg_plan(f)
        gan = derive_gan_plan(seg)
        budget = derive_budget(f)
        path = write_plan_file(tmp_path / "plan.json", seg, gan, budget)
        seg2, gan2, budget2 = read_plan_file(path)
        assert seg2 == seg
        assert gan2 == gan
        assert budget2 == budget

    def test_document_shape(self):
        f = _fp(64, 64)
        seg = derive_seg_plan(f)
        doc = plan_document(seg, derive_gan_plan(seg), derive_budget(f))
        assert set(doc) == {"seg_plan", "gan_plan", "budget"}
        stage = doc["seg_plan"]["encoder_stages"][0]
        assert set(stage) == {"stride", "kernel", "channels"}


class TestArchStage:
    def test_rejects_bad_stride(self):
        with pytest.raises(ValueError):
            ArchStage(stride=(3, 1), kernel=(3, 3), channels=32)

    def test_rejects_bad_kernel(self):
        with pytest.raises(ValueError):
            ArchStage(stride=(1, 1), kernel=(5, 3), channels=32)
