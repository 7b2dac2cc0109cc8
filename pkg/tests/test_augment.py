import numpy as np
import pytest

from sinematch.augment import (
    DEFAULT_SPEC,
    AugmentationSpec,
    strong_augment,
    weak_augment,
)
from sinematch.rng import stream


@pytest.fixture
def images(rng):
    return np.clip(rng.standard_normal((6, 1, 32, 32)) * 0.5, -1, 1)


class TestRangeInvariant:
    def test_weak_stays_in_range(self, images):
        out = weak_augment(images, stream(0, 0))
        assert np.all((out >= -1.0) & (out <= 1.0))

    def test_strong_stays_in_range(self, images):
        out = strong_augment(images, stream(0, 1))
        assert np.all((out >= -1.0) & (out <= 1.0))

    def test_strong_in_range_even_for_saturated_input(self):
        out = strong_augment(np.ones((4, 1, 32, 32)), stream(3, 0))
        assert np.all((out >= -1.0) & (out <= 1.0))


class TestDeterminism:
    def test_same_stream_same_output(self, images):
        a = weak_augment(images, stream(5, 0))
        b = weak_augment(images, stream(5, 0))
        assert np.array_equal(a, b)
        c = strong_augment(images, stream(5, 1))
        d = strong_augment(images, stream(5, 1))
        assert np.array_equal(c, d)


class TestWeak:
    def test_identity_when_disabled(self, images):
        spec = AugmentationSpec(flip_prob=0.0, max_translate=0)
        out = weak_augment(images, stream(0, 0), spec)
        assert np.allclose(out, images, atol=1e-12)

    def test_always_flip(self, images):
        spec = AugmentationSpec(flip_prob=1.0, max_translate=0)
        out = weak_augment(images, stream(0, 0), spec)
        assert np.allclose(out, images[:, :, :, ::-1], atol=1e-12)

    def test_integer_translation_moves_content(self):
        img = np.zeros((1, 1, 32, 32))
        img[0, 0, 16, 16] = 1.0
        spec = AugmentationSpec(flip_prob=0.0, max_translate=2)
        moved = False
        for sid in range(8):
            out = weak_augment(img, stream(11, sid), spec)
            peak = np.unravel_index(np.argmax(out[0, 0]), (32, 32))
            assert out[0, 0][peak] == pytest.approx(1.0)
            assert abs(peak[0] - 16) <= 2 and abs(peak[1] - 16) <= 2
            if peak != (16, 16):
                moved = True
        assert moved


class TestStrong:
    def test_cutout_zeroes_a_patch(self, images):
        spec = AugmentationSpec(
            flip_prob=0.0, max_translate=0, max_rotate_deg=0.0, noise_sigma=0.0,
            contrast_range=(1.0, 1.0), cutout_size=8,
        )
        base = np.full((2, 1, 32, 32), 0.5)
        out = strong_augment(base, stream(2, 0), spec)
        for i in range(2):
            assert (out[i] == 0.0).sum() == 64

    def test_rotation_changes_image(self):
        img = np.zeros((1, 1, 32, 32))
        img[0, 0, 10:14, :] = 1.0  # horizontal band rotates visibly
        spec = AugmentationSpec(
            flip_prob=0.0, max_translate=0, max_rotate_deg=15.0, noise_sigma=0.0,
            contrast_range=(1.0, 1.0), cutout_size=1,
        )
        out = strong_augment(img, stream(0, 7), spec)
        assert np.abs(out - img).max() > 0.1

    def test_weak_pool_is_strict_subset_of_strong(self):
        spec = DEFAULT_SPEC
        assert spec.weak_transforms() < spec.strong_transforms()

    def test_noise_applied(self, images):
        spec = AugmentationSpec(
            flip_prob=0.0, max_translate=0, max_rotate_deg=0.0, noise_sigma=0.1,
            contrast_range=(1.0, 1.0), cutout_size=1,
        )
        out = strong_augment(images, stream(4, 0), spec)
        diff = out - images
        inner = diff[np.abs(out) < 0.999]  # ignore clipped pixels
        assert 0.05 < inner.std() < 0.2
