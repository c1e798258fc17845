import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cxrbench.exceptions import ValidationError
from cxrbench.transforms import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    AugmentConfig,
    PreprocessConfig,
    RandomFlipRotate,
    XrayPreprocessor,
    as_unit_float,
    augment,
    load_image,
    resize_bilinear,
    rotate_bilinear,
    sample_rotation,
    to_model_tensor,
)

from oracles import bilinear_pixel

IDENTITY = PreprocessConfig(224, "bilinear", (0, 0, 0), (1, 1, 1))
NO_AUG = AugmentConfig(0.0, 0.0, (0.0, 0.0))


class TestConfig:
    def test_defaults(self):
        c = PreprocessConfig()
        assert c.target_size == 224 and c.channel_mean == IMAGENET_MEAN and c.channel_std == IMAGENET_STD
        a = AugmentConfig()
        assert a.rotation_range_degrees == (-10.0, 10.0)
        assert a.horizontal_flip_probability == a.vertical_flip_probability == 0.5

    @pytest.mark.parametrize("kwargs", [{"target_size": 0}, {"channel_std": (1, 0, 1)}, {"interpolation": "nearest"}])
    def test_preprocess_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            PreprocessConfig(**kwargs)

    @pytest.mark.parametrize("kwargs", [{"rotation_range_degrees": (5, -5)}, {"horizontal_flip_probability": 1.2}])
    def test_augment_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            AugmentConfig(**kwargs)


class TestResize:
    def test_constant(self):
        img = np.full((100, 50), 0.37, dtype=np.float32)
        out = resize_bilinear(img, 224)
        assert out.shape == (224, 224, 1)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_xray_size(self, rng):
        out = resize_bilinear(rng.random((1024, 1024)), 224)
        assert out.shape == (224, 224, 1)

    def test_ramp_against_scalar_oracle(self):
        src = np.arange(16, dtype=np.float64).reshape(4, 4)
        out = resize_bilinear(src, 2)[..., 0]
        ref = [[bilinear_pixel(src.tolist(), 2, 2, i, j) for j in range(2)] for i in range(2)]
        np.testing.assert_allclose(out, ref, atol=1e-6)
        # half-pixel centres land midway between source pixels
        np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]], atol=1e-6)

    def test_upsample_against_scalar_oracle(self, rng):
        src = rng.random((5, 7))
        out = resize_bilinear(src, (9, 4))[..., 0]
        ref = [[bilinear_pixel(src.tolist(), 9, 4, i, j) for j in range(4)] for i in range(9)]
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_against_torch_interpolate(self, rng):
        import torch
        src = rng.random((37, 53)).astype(np.float32)
        ref = torch.nn.functional.interpolate(torch.from_numpy(src)[None, None], size=(224, 224),
                                              mode="bilinear", align_corners=False)[0, 0].numpy()
        np.testing.assert_allclose(resize_bilinear(src, 224)[..., 0], ref, atol=1e-5)


class TestModelTensor:
    def test_identity_normalization(self, rng):
        img = rng.random((224, 224))
        t = to_model_tensor(img, IDENTITY)
        assert t.shape == (3, 224, 224)
        assert np.array_equal(t[0], t[1]) and np.array_equal(t[1], t[2])
        assert t.min() >= 0 and t.max() <= 1

    def test_zero_image(self):
        t = to_model_tensor(np.zeros((64, 64), dtype=np.uint8), PreprocessConfig())
        for c in range(3):
            np.testing.assert_allclose(t[c], -IMAGENET_MEAN[c] / IMAGENET_STD[c], atol=1e-6)

    def test_standardization_oracle(self, rng):
        img = (rng.random((224, 224)) * 255).astype(np.uint8)
        mean, std = (0.2, 0.4, 0.6), (0.1, 0.3, 0.5)
        t = to_model_tensor(img, PreprocessConfig(224, "bilinear", mean, std))
        unit = img.astype(np.float64) / 255.0
        for c in range(3):
            ref = (unit - mean[c]) / std[c]
            np.testing.assert_allclose(t[c], ref, atol=1e-5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(8, 64), st.integers(0, 2**31 - 1))
    def test_inverse(self, size, seed):
        img = np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)
        cfg = PreprocessConfig(size)
        t = to_model_tensor(img, cfg)
        back = t * np.asarray(cfg.channel_std, np.float32)[:, None, None] + np.asarray(cfg.channel_mean, np.float32)[:, None, None]
        np.testing.assert_allclose(back.transpose(1, 2, 0), img, atol=1e-6)

    def test_rgb_passthrough(self, rng):
        img = rng.random((224, 224, 3))
        t = to_model_tensor(img, IDENTITY)
        np.testing.assert_allclose(t.transpose(1, 2, 0), img, atol=1e-6)


class TestAugment:
    def test_identity_config(self, rng):
        img = rng.random((32, 32, 1)).astype(np.float32)
        assert np.array_equal(augment(img, NO_AUG, rng), img)

    def test_hflip_involution(self, rng):
        img = rng.random((31, 17, 1)).astype(np.float32)
        cfg = AugmentConfig(1.0, 0.0, (0.0, 0.0))
        once = augment(img, cfg, rng)
        assert np.array_equal(once, img[:, ::-1])
        assert np.array_equal(augment(once, cfg, rng), img)

    def test_vflip_involution(self, rng):
        img = rng.random((12, 20, 1)).astype(np.float32)
        cfg = AugmentConfig(0.0, 1.0, (0.0, 0.0))
        assert np.array_equal(augment(augment(img, cfg, rng), cfg, rng), img)

    def test_angle_bound(self):
        rng = np.random.default_rng(0)
        cfg = AugmentConfig()
        angles = np.array([sample_rotation(cfg, rng) for _ in range(10_000)])
        assert angles.min() >= -10.0 and angles.max() <= 10.0
        # the interval is actually explored
        assert angles.min() < -9.9 and angles.max() > 9.9

    def test_deterministic(self):
        img = np.random.default_rng(1).random((40, 40, 1)).astype(np.float32)
        a = [augment(img, AugmentConfig(), np.random.default_rng(5)) for _ in range(2)]
        assert np.array_equal(a[0], a[1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(4, 48), st.integers(4, 48), st.integers(0, 2**31 - 1))
    def test_shape_preserved(self, h, w, seed):
        img = np.random.default_rng(seed).random((h, w, 1)).astype(np.float32)
        assert augment(img, AugmentConfig(), np.random.default_rng(seed)).shape == (h, w, 1)

    def test_three_draws_per_call(self):
        img = np.zeros((8, 8, 1), np.float32)
        a, b = np.random.default_rng(3), np.random.default_rng(3)
        augment(img, NO_AUG, a)
        b.random(3)
        assert a.random() == b.random()


class TestRotate:
    def test_quarter_turn_matches_rot90(self, rng):
        img = rng.random((9, 9, 1))
        np.testing.assert_allclose(rotate_bilinear(img, 90.0), np.rot90(img), atol=1e-9)

    def test_constant_image_stays_constant(self):
        img = np.full((20, 30, 1), 0.6)
        np.testing.assert_allclose(rotate_bilinear(img, 7.3), 0.6, atol=1e-12)

    def test_zero_angle_copies(self, rng):
        img = rng.random((5, 5, 1))
        out = rotate_bilinear(img, 0)
        assert np.array_equal(out, img) and out is not img


def test_load_image_modes(tmp_path):
    Image.fromarray(np.full((4, 6), 200, np.uint8)).save(tmp_path / "g.png")
    Image.fromarray(np.full((4, 6, 3), 10, np.uint8)).save(tmp_path / "c.jpg")
    Image.fromarray(np.full((4, 6), 40000, np.uint16)).save(tmp_path / "d.png")
    assert load_image(tmp_path / "g.png").shape[:2] == (4, 6)
    assert load_image(tmp_path / "c.jpg").shape == (4, 6, 3)
    np.testing.assert_allclose(as_unit_float(load_image(tmp_path / "d.png")), 40000 / 65535, atol=1e-6)


def test_sklearn_transformers(rng):
    images = [rng.random((30, 30)) for _ in range(3)]
    pre = XrayPreprocessor(target_size=32).fit(images)
    assert pre.transform(images).shape == (3, 3, 32, 32)
    assert pre.get_params()["target_size"] == 32
    aug = RandomFlipRotate(random_state=4).fit(images)
    again = RandomFlipRotate(random_state=4).fit(images)
    for x, y in zip(aug.transform(images), again.transform(images)):
        assert np.array_equal(x, y)
