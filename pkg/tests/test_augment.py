import numpy as np
import pytest

from refgrounder.augment import (AugmentConfigError, AugmentPolicy, AugSample,
                                 TransformSpec, apply_policy, cutmix,
                                 elastic_transform, horizontal_flip, mixup,
                                 rand_augment, random_crop, random_erasing,
                                 random_resize)
from refgrounder.boxes import BoundingBox

from conftest import box_coverage, make_scene


def scene_sample(seed=0, size=128, **kw) -> tuple[AugSample, tuple]:
    scene = make_scene(np.random.default_rng(seed), size=size, **kw)
    return AugSample(image=scene.image, box=scene.box,
                     expression=scene.expression), scene.color


class FixedUniformRng:
    """Generator stub whose uniform() returns a preset value."""

    def __init__(self, value, base=0):
        self.value = value
        self._rng = np.random.default_rng(base)

    def uniform(self, lo, hi, size=None):
        return self.value

    def __getattr__(self, name):
        return getattr(self._rng, name)


class TestRandomResize:
    def test_identity_scale(self):
        sample, _ = scene_sample(size=416)
        out = random_resize(sample, FixedUniformRng(1.0), snap=32)
        assert out.image.shape == (416, 416, 3)
        assert out.box == sample.box

    def test_half_scale_halves_box(self):
        # 208 is a legal side only for snaps dividing it, e.g. 16
        sample, _ = scene_sample(size=416)
        out = random_resize(sample, FixedUniformRng(0.5), snap=16)
        assert out.image.shape == (208, 208, 3)
        assert out.box.cx == pytest.approx(sample.box.cx / 2, abs=1e-6)
        assert out.box.w == pytest.approx(sample.box.w / 2, abs=1e-6)

    def test_affine_box_update_exact(self):
        sample, _ = scene_sample(size=416)
        out = random_resize(sample, FixedUniformRng(1.25), snap=32)
        fx = out.image.shape[1] / 416
        fy = out.image.shape[0] / 416
        assert out.box.x1 == pytest.approx(sample.box.x1 * fx, abs=1e-6)
        assert out.box.y2 == pytest.approx(sample.box.y2 * fy, abs=1e-6)

    def test_snap_divides_sides(self):
        sample, _ = scene_sample(size=416)
        rng = np.random.default_rng(4)
        for _ in range(20):
            out = random_resize(sample, rng, scale_range=(0.6, 1.4), snap=32)
            assert out.image.shape[0] % 32 == 0
            assert out.image.shape[1] % 32 == 0

    def test_coverage_oracle(self):
        rng = np.random.default_rng(9)
        for seed in range(20):
            sample, color = scene_sample(seed=seed)
            out = random_resize(sample, rng)
            assert box_coverage(out.image, out.box, color) >= 0.95

    def test_input_not_mutated(self):
        sample, _ = scene_sample()
        before = sample.image.copy()
        random_resize(sample, np.random.default_rng(0))
        np.testing.assert_array_equal(sample.image, before)


class TestHorizontalFlip:
    def test_mirror_arithmetic(self):
        sample, _ = scene_sample(size=416)
        box = BoundingBox(cx=100, cy=50, w=10, h=10)
        out = horizontal_flip(AugSample(image=sample.image, box=box))
        assert out.box.cx == 316

    def test_involution(self):
        sample, _ = scene_sample()
        out = horizontal_flip(horizontal_flip(sample))
        np.testing.assert_array_equal(out.image, sample.image)
        assert out.box.cx == pytest.approx(sample.box.cx)

    def test_spatial_word_flagged(self):
        sample, _ = scene_sample()
        flagged = horizontal_flip(
            AugSample(image=sample.image, box=sample.box,
                      expression="box on the left"))
        assert any("spatial" in f for f in flagged.flags)
        punctuated = horizontal_flip(
            AugSample(image=sample.image, box=sample.box,
                      expression="it's on the LEFT!"))
        assert any("spatial" in f for f in punctuated.flags)
        plain = horizontal_flip(
            AugSample(image=sample.image, box=sample.box, expression="red box"))
        assert plain.flags == ()


class TestElasticTransform:
    def test_alpha_zero_identity(self):
        sample, _ = scene_sample()
        out = elastic_transform(sample, np.random.default_rng(0), alpha=0.0)
        np.testing.assert_array_equal(out.image, sample.image)
        assert out.box == sample.box

    def test_coverage_oracle(self):
        for seed in range(20):
            sample, color = scene_sample(seed=seed)
            out = elastic_transform(sample, np.random.default_rng(seed + 100))
            assert box_coverage(out.image, out.box, color) >= 0.90

    def test_fixed_seed_reproducible(self):
        sample, _ = scene_sample()
        a = elastic_transform(sample, np.random.default_rng(5))
        b = elastic_transform(sample, np.random.default_rng(5))
        np.testing.assert_array_equal(a.image, b.image)
        assert a.box == b.box


class TestRandAugment:
    def test_magnitude_zero_identity(self):
        sample, _ = scene_sample()
        out = rand_augment(sample, np.random.default_rng(0), magnitude=0)
        np.testing.assert_array_equal(out.image, sample.image)

    def test_box_untouched(self):
        sample, _ = scene_sample()
        rng = np.random.default_rng(1)
        for _ in range(10):
            out = rand_augment(sample, rng, n_ops=2, magnitude=9)
            assert out.box is sample.box

    def test_fixed_seed_reproducible(self):
        sample, _ = scene_sample()
        a = rand_augment(sample, np.random.default_rng(3), n_ops=3, magnitude=7)
        b = rand_augment(sample, np.random.default_rng(3), n_ops=3, magnitude=7)
        np.testing.assert_array_equal(a.image, b.image)

    def test_output_in_unit_range(self):
        sample, _ = scene_sample()
        rng = np.random.default_rng(2)
        for _ in range(20):
            out = rand_augment(sample, rng, n_ops=2, magnitude=10)
            assert out.image.min() >= 0.0 and out.image.max() <= 1.0


class TestRandomErasing:
    def test_box_and_referent_relation(self):
        # Erased pixels may cover referent area but never the center,
        # so every surviving referent pixel stays inside the box.
        for seed in range(10):
            sample, color = scene_sample(seed=seed)
            out = random_erasing(sample, np.random.default_rng(seed))
            assert out.box == sample.box
            assert box_coverage(out.image, out.box, color, tol=0.02) >= 0.90

    def test_center_never_erased(self):
        for seed in range(30):
            sample, _ = scene_sample(seed=seed)
            out = random_erasing(sample, np.random.default_rng(seed * 7))
            cy = int(sample.box.cy)
            cx = int(sample.box.cx)
            np.testing.assert_array_equal(out.image[cy, cx], sample.image[cy, cx])

    def test_erased_fraction_within_range(self):
        area_range = (0.05, 0.2)
        for seed in range(10):
            sample, _ = scene_sample(seed=seed)
            out = random_erasing(sample, np.random.default_rng(seed), area_range)
            changed = np.any(out.image != sample.image, axis=-1).mean()
            if changed == 0.0:
                continue  # placement budget exhausted, transform skipped
            assert area_range[0] <= changed <= area_range[1]


class TestMixup:
    def test_constant_blend_arithmetic(self):
        img_a = np.full((32, 32, 3), 0.2, dtype=np.float32)
        img_b = np.full((32, 32, 3), 0.6, dtype=np.float32)
        box = BoundingBox(16, 16, 8, 8)
        a = AugSample(image=img_a, box=box)
        b = AugSample(image=img_b, box=box)

        class HalfBeta:
            def beta(self, *_):
                return 0.5

        out = mixup(a, b, HalfBeta())
        np.testing.assert_allclose(out.image, 0.4, atol=1e-6)
        assert out.mix.lam == 0.5

    def test_lambda_one_is_sample_a(self):
        sample_a, _ = scene_sample(seed=0)
        sample_b, _ = scene_sample(seed=1)

        class OneBeta:
            def beta(self, *_):
                return 1.0

        out = mixup(sample_a, sample_b, OneBeta())
        np.testing.assert_allclose(out.image, sample_a.image, atol=1e-6)

    def test_beta_support(self):
        rng = np.random.default_rng(0)
        draws = rng.beta(1.5, 1.5, size=1000)
        assert np.all((draws >= 0) & (draws <= 1))

    def test_keeps_base_target(self):
        sample_a, _ = scene_sample(seed=0)
        sample_b, _ = scene_sample(seed=1)
        out = mixup(sample_a, sample_b, np.random.default_rng(2))
        assert out.box == sample_a.box
        assert out.expression == sample_a.expression
        assert out.mix.partner_box == sample_b.box


class TestCutmix:
    def test_lambda_matches_patch_area(self):
        # noise partner: every pasted pixel differs, so the changed-pixel
        # count is exactly the patch area
        for seed in range(10):
            sample_a, _ = scene_sample(seed=seed)
            noise = np.random.default_rng(seed + 50).uniform(
                0, 1, sample_a.image.shape).astype(np.float32)
            sample_b = AugSample(image=noise, box=sample_a.box)
            out = cutmix(sample_a, sample_b, np.random.default_rng(seed),
                         area_range=(0.1, 0.3))
            if out.mix is None:
                continue
            changed = np.any(out.image != sample_a.image, axis=-1).mean()
            assert out.mix.lam == pytest.approx(1.0 - changed, abs=1e-9)
            assert 0.7 <= out.mix.lam <= 0.9

    def test_box_center_untouched(self):
        for seed in range(30):
            sample_a, _ = scene_sample(seed=seed)
            sample_b, _ = scene_sample(seed=seed + 100)
            out = cutmix(sample_a, sample_b, np.random.default_rng(seed * 3))
            cy, cx = int(sample_a.box.cy), int(sample_a.box.cx)
            np.testing.assert_array_equal(out.image[cy, cx], sample_a.image[cy, cx])

    def test_target_stays_a(self):
        sample_a, _ = scene_sample(seed=0)
        sample_b, _ = scene_sample(seed=1)
        out = cutmix(sample_a, sample_b, np.random.default_rng(4))
        assert out.box == sample_a.box
        assert out.expression == sample_a.expression


class TestRandomCrop:
    def test_flags_truncation(self):
        sample, _ = scene_sample(seed=0)
        cropped_any = False
        for seed in range(40):
            out = random_crop(sample, np.random.default_rng(seed), scale_range=(0.5, 0.7))
            if "crop_truncates_referent" in out.flags:
                cropped_any = True
                assert out.box.area < sample.box.area
        assert cropped_any

    def test_box_inside_crop(self):
        sample, _ = scene_sample(seed=1)
        for seed in range(20):
            out = random_crop(sample, np.random.default_rng(seed))
            h, w = out.image.shape[:2]
            assert out.box.inside(w, h)


SINGLE_OPS = {
    "random_resize": random_resize,
    "random_crop": random_crop,
    "elastic_transform": elastic_transform,
    "rand_augment": rand_augment,
    "random_erasing": random_erasing,
}


class TestPurity:
    @pytest.mark.parametrize("name", sorted(SINGLE_OPS))
    def test_input_never_mutated(self, name):
        sample, _ = scene_sample(seed=4)
        before = sample.image.copy()
        SINGLE_OPS[name](sample, np.random.default_rng(0))
        np.testing.assert_array_equal(sample.image, before)

    @pytest.mark.parametrize("name", sorted(SINGLE_OPS))
    def test_same_rng_state_same_output(self, name):
        sample, _ = scene_sample(seed=5)
        a = SINGLE_OPS[name](sample, np.random.default_rng(11))
        b = SINGLE_OPS[name](sample, np.random.default_rng(11))
        np.testing.assert_array_equal(a.image, b.image)
        assert a.box == b.box

    def test_mixing_ops_pure(self):
        sample_a, _ = scene_sample(seed=6)
        sample_b, _ = scene_sample(seed=7)
        before = sample_a.image.copy()
        for op in (mixup, cutmix):
            x = op(sample_a, sample_b, np.random.default_rng(3))
            y = op(sample_a, sample_b, np.random.default_rng(3))
            np.testing.assert_array_equal(sample_a.image, before)
            np.testing.assert_array_equal(x.image, y.image)

    def test_mixup_resolution_mismatch_rejected(self):
        sample_a, _ = scene_sample(seed=0, size=128)
        sample_b, _ = scene_sample(seed=1, size=96)
        with pytest.raises(AugmentConfigError):
            mixup(sample_a, sample_b, np.random.default_rng(0))
        with pytest.raises(AugmentConfigError):
            cutmix(sample_a, sample_b, np.random.default_rng(0))


class TestPolicy:
    def test_empty_policy_identity(self):
        sample, _ = scene_sample()
        out = apply_policy(sample, AugmentPolicy(()), np.random.default_rng(0))
        assert out is sample

    def test_single_transform_matches_direct_call(self):
        sample, _ = scene_sample()
        policy = AugmentPolicy((TransformSpec("random_resize"),))
        via_policy = apply_policy(sample, policy, np.random.default_rng(7))
        direct = random_resize(sample, np.random.default_rng(7))
        np.testing.assert_array_equal(via_policy.image, direct.image)
        assert via_policy.box == direct.box

    def test_mixup_cutmix_exclusive(self):
        with pytest.raises(AugmentConfigError):
            AugmentPolicy((TransformSpec("mixup"), TransformSpec("cutmix")))

    def test_unknown_transform_rejected(self):
        with pytest.raises(AugmentConfigError):
            AugmentPolicy((TransformSpec("mosaic"),))

    def test_declared_order_applied(self):
        sample, color = scene_sample()
        policy = AugmentPolicy((
            TransformSpec("random_resize", params={"scale_range": (0.8, 1.2)}),
            TransformSpec("rand_augment", params={"n_ops": 1, "magnitude": 3}),
        ))
        out = apply_policy(sample, policy, np.random.default_rng(3))
        assert out.image.shape[0] % 32 == 0

    def test_mixing_skipped_without_partner(self):
        sample, _ = scene_sample()
        policy = AugmentPolicy((TransformSpec("mixup"),))
        out = apply_policy(sample, policy, np.random.default_rng(0), partner=None)
        assert out.mix is None
