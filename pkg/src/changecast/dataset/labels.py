"""Change labels, date pairs and patch tiling for footprint-mask time series."""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PATCH_SIZE = 224
FORECAST_RANGES = (1, 3, 6, 9, 12, 15, 18, 21, 24)


def month_diff(a: dt.date, b: dt.date) -> int:
    """Calendar-month difference b - a."""
    return (b.year - a.year) * 12 + (b.month - a.month)


def parse_month(text: str) -> dt.date:
    y, m = text.split("-")[:2]
    return dt.date(int(y), int(m), 1)


def format_month(d: dt.date) -> str:
    return f"{d.year:04d}-{d.month:02d}"


@dataclass
class LocationSeries:
    location_id: str
    continent: str
    timestamps: list[dt.date]
    images: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    builtup_masks: np.ndarray  # (T, H, W) uint8 in {0, 1}
    # synthetic worlds only: where the construction texture is rendered
    construction_masks: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.timestamps) != len(self.images) or len(self.images) != len(self.builtup_masks):
            raise ValueError(f"{self.location_id}: timestamps/images/masks lengths differ")
        if any(month_diff(a, b) <= 0 for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError(f"{self.location_id}: timestamps must be strictly increasing")
        if self.images.shape[2:] != self.builtup_masks.shape[1:]:
            raise ValueError(f"{self.location_id}: image and mask sizes differ")
        if not np.isin(self.builtup_masks, (0, 1)).all():
            raise ValueError(f"{self.location_id}: masks must be binary")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.builtup_masks.shape[1:])


@dataclass
class PatchSample:
    location_id: str
    origin: tuple[int, int]
    t0: dt.date
    t1: dt.date
    delta_months: int
    image_t0: np.ndarray
    change_mask: np.ndarray
    first_change_month: np.ndarray
    n_change: int
    image_t1: np.ndarray | None = None
    continent: str = ""

    def meta(self) -> dict:
        return {
            "location_id": self.location_id,
            "continent": self.continent,
            "origin": list(self.origin),
            "t0": format_month(self.t0),
            "t1": format_month(self.t1),
            "delta_months": self.delta_months,
            "n_change": self.n_change,
            "patch_size": int(self.change_mask.shape[-1]),
        }


def _check_binary(a, name):
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return a.astype(bool)


def derive_change_mask(mask_t0, mask_t1) -> np.ndarray:
    """Construction-only difference: 1 where a pixel is built at t1 but not at t0.

    Removals (1 -> 0) are labelled 0.
    """
    m0 = np.asarray(mask_t0)
    m1 = np.asarray(mask_t1)
    if m0.shape != m1.shape:
        raise ValueError(f"mask shapes differ: {m0.shape} vs {m1.shape}")
    m0 = _check_binary(m0, "mask_t0")
    m1 = _check_binary(m1, "mask_t1")
    return (m1 & ~m0).astype(np.uint8)


def compute_first_change_map(builtup_masks, horizon: int, month_offsets=None) -> np.ndarray:
    """Month offset (1..horizon) at which each pixel is first seen newly built; 0 if never.

    `builtup_masks[0]` is the t0 mask. `month_offsets[i]` is the calendar-month
    offset of mask i from t0 (defaults to 0, 1, 2, ...). Months without a mask
    are skipped: a change is assigned the first available month showing it.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1 month")
    masks = np.asarray(builtup_masks)
    offsets = list(range(len(masks))) if month_offsets is None else list(month_offsets)
    if len(offsets) != len(masks) or offsets[0] != 0:
        raise ValueError("month_offsets must start at 0 and match the masks")
    base = _check_binary(masks[0], "mask_t0")
    usable = [i for i, k in enumerate(offsets) if 1 <= k <= horizon]
    if not usable:
        raise ValueError("need at least one mask within the horizon after t0")
    out = np.zeros(base.shape, dtype=np.int16)
    # walk backwards so the earliest month wins
    for i in reversed(usable):
        built = _check_binary(masks[i], "mask") & ~base
        out[built] = offsets[i]
    return out


def enumerate_pairs(timestamps, r: int) -> list[tuple[dt.date, dt.date]]:
    """All ordered date pairs exactly `r` calendar months apart."""
    if r < 1:
        raise ValueError("r must be >= 1")
    stamps = list(timestamps)
    present = set(stamps)
    pairs = []
    for t0 in stamps:
        y, m = divmod(t0.year * 12 + t0.month - 1 + r, 12)
        t1 = dt.date(y, m + 1, 1)
        if t1 in present:
            pairs.append((t0, t1))
    return pairs


def tile_origins(shape, patch_size: int = PATCH_SIZE) -> list[tuple[int, int]]:
    """Top-left corners of the non-overlapping grid anchored at (0, 0)."""
    h, w = shape
    return [(r * patch_size, c * patch_size)
            for r in range(h // patch_size) for c in range(w // patch_size)]


def pair_labels(series: LocationSeries, i0: int, i1: int, window=None) -> tuple[np.ndarray, np.ndarray]:
    """(change mask, first-change-month map) for one date pair, optionally cropped."""
    win = (slice(None), slice(None)) if window is None else tuple(window)
    t0 = series.timestamps[i0]
    delta = month_diff(t0, series.timestamps[i1])
    masks = series.builtup_masks[(slice(i0, i1 + 1),) + win]
    y_c = derive_change_mask(masks[0], masks[-1])
    offsets = [month_diff(t0, series.timestamps[i]) for i in range(i0, i1 + 1)]
    fcm = compute_first_change_map(masks, delta, offsets)
    # pixels built then removed again before t1 carry no change label
    fcm[y_c == 0] = 0
    return y_c, fcm


def tile_patches(series: LocationSeries, pairs, patch_size: int = PATCH_SIZE,
                 with_t1: bool = True) -> list[PatchSample]:
    h, w = series.shape
    if h < patch_size or w < patch_size:
        log.warning("skipping %s: %dx%d is smaller than one %d px patch", series.location_id, h, w, patch_size)
        return []
    index = {t: i for i, t in enumerate(series.timestamps)}
    out = []
    for t0, t1 in pairs:
        i0, i1 = index[t0], index[t1]
        y_c, fcm = pair_labels(series, i0, i1)
        for r, c in tile_origins((h, w), patch_size):
            win = (slice(r, r + patch_size), slice(c, c + patch_size))
            yc = y_c[win]
            out.append(PatchSample(
                location_id=series.location_id,
                origin=(r, c),
                t0=t0,
                t1=t1,
                delta_months=month_diff(t0, t1),
                image_t0=series.images[i0][(slice(None),) + win],
                image_t1=series.images[i1][(slice(None),) + win] if with_t1 else None,
                change_mask=yc,
                first_change_month=fcm[win],
                n_change=int(yc.sum()),
                continent=series.continent,
            ))
    return out
