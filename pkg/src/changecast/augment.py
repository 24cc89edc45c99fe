"""Paired geometric + photometric augmentation of patch samples.

Geometric transforms hit images and label maps identically (labels with
nearest-neighbour resampling); colour jitter touches images only, drawn
independently for each image of a pair.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform

from .dataset.labels import PatchSample


@dataclass
class AugmentConfig:
    crop: bool = True
    affine: bool = True
    mirror: bool = True
    jitter: bool = True
    crop_pad: int = 16
    rotation_deg: float = 5.0
    translate_frac: float = 0.02
    scale_frac: float = 0.05
    jitter_frac: float = 0.10

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(crop=False, affine=False, mirror=False, jitter=False)

    @property
    def enabled(self) -> bool:
        return self.crop or self.affine or self.mirror or self.jitter


def _affine_matrix(rng, cfg, size):
    angle = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    scale = 1.0 + rng.uniform(-cfg.scale_frac, cfg.scale_frac)
    shift = rng.uniform(-cfg.translate_frac, cfg.translate_frac, size=2) * size
    c, s = np.cos(angle), np.sin(angle)
    # maps output coords to input coords about the patch centre
    m = np.array([[c, -s], [s, c]]) / scale
    centre = (np.array([size, size]) - 1) / 2.0
    offset = centre - m @ (centre + shift)
    return m, offset


def _warp(arr, m, offset, order):
    if arr.ndim == 2:
        return affine_transform(arr, m, offset, order=order, mode="reflect")
    return np.stack([affine_transform(ch, m, offset, order=order, mode="reflect") for ch in arr])


def _jitter(img, rng, frac):
    b = 1.0 + rng.uniform(-frac, frac)
    c = 1.0 + rng.uniform(-frac, frac)
    s = 1.0 + rng.uniform(-frac, frac)
    img = img * b
    mean = img.mean()
    img = (img - mean) * c + mean
    grey = img.mean(axis=0, keepdims=True)
    img = (img - grey) * s + grey
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(sample: PatchSample, seed=None, cfg: AugmentConfig | None = None) -> PatchSample:
    cfg = cfg or AugmentConfig()
    if not cfg.enabled:
        return sample
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    size = sample.change_mask.shape[-1]
    images = [sample.image_t0] + ([sample.image_t1] if sample.image_t1 is not None else [])
    labels = [sample.change_mask, sample.first_change_month]

    def geo(fn):
        images[:] = [fn(a, 1) for a in images]
        labels[:] = [fn(a, 0) for a in labels]

    if cfg.crop and cfg.crop_pad > 0:
        p = cfg.crop_pad
        r, c = rng.integers(0, 2 * p + 1, size=2)

        def crop(a, _order):
            pad = ((0, 0),) * (a.ndim - 2) + ((p, p), (p, p))
            return np.pad(a, pad, mode="reflect")[..., r:r + size, c:c + size]
        geo(crop)
    if cfg.mirror:
        if rng.random() < 0.5:
            geo(lambda a, _o: a[..., :, ::-1])
        if rng.random() < 0.5:
            geo(lambda a, _o: a[..., ::-1, :])
    if cfg.affine:
        m, offset = _affine_matrix(rng, cfg, size)
        geo(lambda a, order: _warp(a, m, offset, order))
    if cfg.jitter:
        images[:] = [_jitter(a, rng, cfg.jitter_frac) for a in images]

    y_c = np.ascontiguousarray(labels[0])
    return dataclasses.replace(
        sample,
        image_t0=np.ascontiguousarray(images[0], dtype=np.float32),
        image_t1=np.ascontiguousarray(images[1], dtype=np.float32) if len(images) > 1 else None,
        change_mask=y_c,
        first_change_month=np.ascontiguousarray(labels[1]),
        n_change=int(y_c.sum()),
    )
