"""Preprocessing and training-time augmentation on numpy images.

Images flow through the pipeline as ``H x W x C`` float arrays with
intensities in ``[0, 1]``. Only :func:`to_model_tensor` produces the
channel-major, standardized layout consumed by the networks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ValidationError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 224
    interpolation: str = "bilinear"
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        object.__setattr__(self, "channel_mean", tuple(float(v) for v in self.channel_mean))
        object.__setattr__(self, "channel_std", tuple(float(v) for v in self.channel_std))
        if int(self.target_size) != self.target_size or self.target_size <= 0:
            raise ValidationError(f"target_size must be a positive integer, got {self.target_size!r}")
        if self.interpolation != "bilinear":
            raise ValidationError(f"unsupported interpolation {self.interpolation!r}")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ValidationError("channel_mean and channel_std need three components")
        if any(not s > 0 for s in self.channel_std):
            raise ValidationError("channel_std components must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mean"] = list(self.channel_mean)
        d["channel_std"] = list(self.channel_std)
        return d


@dataclass(frozen=True)
class AugmentConfig:
    horizontal_flip_probability: float = 0.5
    vertical_flip_probability: float = 0.5
    rotation_range_degrees: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.rotation_range_degrees)
        object.__setattr__(self, "rotation_range_degrees", (lo, hi))
        if lo > hi:
            raise ValidationError(f"rotation range lower bound exceeds upper bound: {(lo, hi)}")
        for name in ("horizontal_flip_probability", "vertical_flip_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {p!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rotation_range_degrees"] = list(self.rotation_range_degrees)
        return d


def _as_hwc(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValidationError(f"expected a non-empty H x W or H x W x C image, got shape {image.shape}")
    return image


def as_unit_float(image: np.ndarray) -> np.ndarray:
    """Scale integer intensities to ``[0, 1]``; float images pass through."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    if image.dtype == np.uint16:
        return image.astype(np.float32) / 65535.0
    if np.issubdtype(image.dtype, np.integer):
        raise ValidationError(f"unsupported integer image dtype {image.dtype}")
    return image.astype(np.float32, copy=False)


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG/JPEG into an ``H x W x {1,3}`` float32 array in ``[0, 1]``."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L"):
            arr = np.asarray(im).astype(np.float32) / 65535.0
        elif im.mode == "I":
            arr = np.asarray(im).astype(np.float32)
            arr = arr / max(float(arr.max()), 1.0)
        elif im.mode in ("RGB", "RGBA", "P", "CMYK", "YCbCr"):
            arr = as_unit_float(np.asarray(im.convert("RGB")))
        else:
            arr = as_unit_float(np.asarray(im.convert("L")))
    return _as_hwc(arr)


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align_corners=False: source coordinate (i + 0.5) * scale - 0.5, clamped at 0
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(image: np.ndarray, target_size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize (no antialiasing) to ``target x target`` pixels."""
    img = _as_hwc(image)
    if isinstance(target_size, tuple):
        out_h, out_w = target_size
    else:
        out_h = out_w = int(target_size)
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target size must be positive, got {target_size!r}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32, copy=True)
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    src = img.astype(np.float64)
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None]
    return (top * (1 - fy) + bottom * fy).astype(np.float32)


def to_model_tensor(image: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Resize, expand grayscale to three channels and standardize per channel.

    Returns a ``3 x S x S`` float32 array where ``S = config.target_size``.
    """
    img = _as_hwc(as_unit_float(image))
    if img.shape[2] not in (1, 3):
        raise ValidationError(f"expected 1 or 3 channels, got {img.shape[2]}")
    if img.shape[:2] != (config.target_size, config.target_size):
        img = resize_bilinear(img, config.target_size)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    mean = np.asarray(config.channel_mean, dtype=np.float32)
    std = np.asarray(config.channel_std, dtype=np.float32)
    out = (img.astype(np.float32) - mean) / std
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def rotate_bilinear(image: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image center with edge replication."""
    img = _as_hwc(image)
    if angle_degrees == 0:
        return img.copy()
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: rotate each output coordinate back by -theta (rows grow downward)
    sx = cos_t * dx - sin_t * dy + cx
    sy = sin_t * dx + cos_t * dy + cy
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    src = img.astype(np.float64)
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(img.dtype if img.dtype.kind == "f" else np.float32)


def sample_rotation(config: AugmentConfig, rng: np.random.Generator) -> float:
    lo, hi = config.rotation_range_degrees
    # one draw even for a degenerate interval keeps the stream aligned
    return float(rng.uniform(lo, hi))


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, vertical flip, then rotation, in that order.

    Exactly three values are drawn from ``rng`` per call, so the stream
    position never depends on which transforms fired.
    """
    img = _as_hwc(image)
    hflip = rng.random() < config.horizontal_flip_probability
    vflip = rng.random() < config.vertical_flip_probability
    angle = sample_rotation(config, rng)
    if hflip:
        img = img[:, ::-1]
    if vflip:
        img = img[::-1]
    if angle != 0:
        return rotate_bilinear(img, angle)
    return np.ascontiguousarray(img)


def worker_rng(base_seed: int, worker: int) -> np.random.Generator:
    """Independent stream for data-loading worker ``worker``."""
    return np.random.default_rng(int(base_seed) ^ int(worker))


class XrayPreprocessor(BaseEstimator, TransformerMixin):
    """Stateless transformer: images -> ``N x 3 x S x S`` standardized array."""

    def __init__(self, target_size=224, channel_mean=IMAGENET_MEAN, channel_std=IMAGENET_STD):
        self.target_size = target_size
        self.channel_mean = channel_mean
        self.channel_std = channel_std

    def _config(self) -> PreprocessConfig:
        return PreprocessConfig(self.target_size, "bilinear", self.channel_mean, self.channel_std)

    def fit(self, X, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        config = getattr(self, "config_", None) or self._config()
        return np.stack([to_model_tensor(x, config) for x in X])


class RandomFlipRotate(BaseEstimator, TransformerMixin):
    """Seeded augmentation as a transformer; each ``transform`` call advances the stream."""

    def __init__(self, horizontal_flip_probability=0.5, vertical_flip_probability=0.5,
                 rotation_range_degrees=(-10.0, 10.0), random_state=None):
        self.horizontal_flip_probability = horizontal_flip_probability
        self.vertical_flip_probability = vertical_flip_probability
        self.rotation_range_degrees = rotation_range_degrees
        self.random_state = random_state

    def fit(self, X, y=None):
        self.config_ = AugmentConfig(
            self.horizontal_flip_probability,
            self.vertical_flip_probability,
            tuple(self.rotation_range_degrees),
        )
        self.rng_ = np.random.default_rng(self.random_state)
        return self

    def transform(self, X):
        if not hasattr(self, "rng_"):
            self.fit(X)
        return [augment(as_unit_float(x), self.config_, self.rng_) for x in X]
