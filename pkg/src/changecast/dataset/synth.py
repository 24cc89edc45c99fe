"""Procedural stand-in for a footprint-annotated monthly image series.

Each location is a vegetated background with some pre-existing buildings.
New buildings appear at random months; for `precursor_lead` months before a
building appears its site shows a bare-earth construction texture, which is
the visual cue a single-image forecaster can learn.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .labels import LocationSeries

CONTINENTS = ("Africa", "Asia", "Europe", "North America", "Oceania", "South America")

EARTH = np.array([0.62, 0.47, 0.32], dtype=np.float32)
PAVING = np.array([0.52, 0.52, 0.50], dtype=np.float32)
ROOFS = np.array([[0.85, 0.85, 0.82], [0.72, 0.32, 0.26], [0.40, 0.44, 0.55]], dtype=np.float32)


@dataclass
class SynthConfig:
    n_locations: int = 12
    image_size: int = 448
    n_months: int = 30
    # expected new buildings per month per 10,000 px of image area
    construction_rate: float = 0.12
    precursor_lead: int = 6
    building_size: tuple[int, int] = (5, 11)
    site_margin: tuple[int, int] = (1, 3)
    existing_density: float = 0.5  # pre-existing buildings per 10,000 px
    # new construction clusters around this many development centres (0: anywhere)
    n_zones: int = 0
    zone_radius: int = 48
    decoy_rate: float = 0.0  # bare-earth patches that never become buildings, per 10,000 px
    n_missing_months: int = 0
    start: str = "2018-01"
    continents: tuple[str, ...] = CONTINENTS

    def validate(self):
        lo, hi = self.building_size
        checks = [
            (self.n_locations >= 1, "n_locations must be >= 1"),
            (self.image_size >= 8, "image_size must be >= 8"),
            (self.n_months >= 2, "n_months must be >= 2"),
            (self.construction_rate >= 0, "construction_rate must be >= 0"),
            (self.precursor_lead >= 0, "precursor_lead must be >= 0"),
            (1 <= lo <= hi < self.image_size // 2, "building_size must satisfy 1 <= lo <= hi < image_size/2"),
            (0 <= self.site_margin[0] <= self.site_margin[1], "site_margin must be 0 <= lo <= hi"),
            (self.n_zones >= 0 and self.zone_radius >= 1, "n_zones must be >= 0 and zone_radius >= 1"),
            (self.existing_density >= 0 and self.decoy_rate >= 0, "densities must be >= 0"),
            (0 <= self.n_missing_months <= self.n_months - 2, "n_missing_months must leave >= 2 months"),
            (len(self.continents) >= 1, "need at least one continent"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["building_size"] = list(self.building_size)
        d["site_margin"] = list(self.site_margin)
        d["continents"] = list(self.continents)
        return d


def _background(rng, size):
    field = gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, 6, 6))
    field /= field.std() + 1e-8
    base = np.array([0.28, 0.42, 0.22])[:, None, None]
    tone = np.array([0.06, 0.05, 0.04])[:, None, None]
    return (base + tone * field).astype(np.float32)


def _place(rng, occupied, h, w, size, margin, zones=None, radius=0):
    """Random free rectangle; returns (footprint, site) slices or None.

    With `zones`, the rectangle is drawn around one of the given centres.
    """
    for _ in range(50):
        bh, bw = rng.integers(size[0], size[1] + 1, size=2)
        m = rng.integers(margin[0], margin[1] + 1, size=4)
        lo_r, hi_r = m[0] + 1, h - bh - m[1] - 1
        lo_c, hi_c = m[2] + 1, w - bw - m[3] - 1
        if zones is not None and len(zones):
            zr, zc = zones[rng.integers(len(zones))]
            lo_r, hi_r = max(lo_r, zr - radius), min(hi_r, zr + radius)
            lo_c, hi_c = max(lo_c, zc - radius), min(hi_c, zc + radius)
            if lo_r >= hi_r or lo_c >= hi_c:
                continue
        r0 = rng.integers(lo_r, hi_r)
        c0 = rng.integers(lo_c, hi_c)
        site = (slice(r0 - m[0], r0 + bh + m[1]), slice(c0 - m[2], c0 + bw + m[3]))
        guard = (slice(site[0].start - 1, site[0].stop + 1), slice(site[1].start - 1, site[1].stop + 1))
        if not occupied[guard].any():
            occupied[guard] = True
            return (slice(r0, r0 + bh), slice(c0, c0 + bw)), site
    return None


def _generate_location(cfg: SynthConfig, rng: np.random.Generator, loc: int):
    n, T = cfg.image_size, cfg.n_months
    area = n * n / 1e4
    bg = _background(rng, n)
    occupied = np.zeros((n, n), dtype=bool)

    existing = []
    for _ in range(rng.poisson(cfg.existing_density * area)):
        placed = _place(rng, occupied, n, n, cfg.building_size, (0, 0))
        if placed:
            existing.append((placed[0], ROOFS[rng.integers(len(ROOFS))]))

    zones = rng.integers(0, n, size=(cfg.n_zones, 2)) if cfg.n_zones else None
    buildings = []
    for _ in range(rng.poisson(cfg.construction_rate * area * (T - 1))):
        placed = _place(rng, occupied, n, n, cfg.building_size, cfg.site_margin, zones, cfg.zone_radius)
        if not placed:
            continue
        appear = int(rng.integers(1, T))
        buildings.append({
            "footprint": placed[0],
            "site": placed[1],
            "appear": appear,
            "precursor_start": max(0, appear - cfg.precursor_lead),
            "roof": ROOFS[rng.integers(len(ROOFS))],
            "earth": (EARTH[:, None, None] + 0.08 * rng.standard_normal((3,) + _shape(placed[1]))).astype(np.float32),
        })
    decoys = []
    for _ in range(rng.poisson(cfg.decoy_rate * area)):
        placed = _place(rng, occupied, n, n, cfg.building_size, cfg.site_margin)
        if placed:
            start = int(rng.integers(0, T))
            decoys.append((placed[1], start, min(T, start + max(cfg.precursor_lead, 1)),
                           (EARTH[:, None, None] + 0.08 * rng.standard_normal((3,) + _shape(placed[1]))).astype(np.float32)))

    images = np.empty((T, 3, n, n), dtype=np.float32)
    masks = np.zeros((T, n, n), dtype=np.uint8)
    construction = np.zeros((T, n, n), dtype=bool)
    for t in range(T):
        img = bg.copy()
        for fp, roof in existing:
            img[(slice(None),) + fp] = roof[:, None, None]
            masks[t][fp] = 1
        for site, start, stop, tex in decoys:
            if start <= t < stop:
                img[(slice(None),) + site] = tex
        for b in buildings:
            if b["precursor_start"] <= t < b["appear"]:
                img[(slice(None),) + b["site"]] = b["earth"]
                construction[t][b["site"]] = True
            elif t >= b["appear"]:
                img[(slice(None),) + b["site"]] = PAVING[:, None, None]
                img[(slice(None),) + b["footprint"]] = b["roof"][:, None, None]
                masks[t][b["footprint"]] = 1
        img *= np.float32(1.0 + 0.03 * rng.standard_normal())
        img += 0.015 * rng.standard_normal(img.shape).astype(np.float32)
        # quantise to 8 bit so PNG round trips are exact
        images[t] = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

    bookkeeping = [{
        "footprint": [b["footprint"][0].start, b["footprint"][0].stop, b["footprint"][1].start, b["footprint"][1].stop],
        "site": [b["site"][0].start, b["site"][0].stop, b["site"][1].start, b["site"][1].stop],
        "appear": b["appear"],
        "precursor_start": b["precursor_start"],
    } for b in buildings]
    return images, masks, construction, bookkeeping


def _shape(sl):
    return (sl[0].stop - sl[0].start, sl[1].stop - sl[1].start)


def synth_generate(config: SynthConfig | None = None, seed: int = 0) -> list[LocationSeries]:
    cfg = (config or SynthConfig()).validate()
    y0, m0 = (int(x) for x in cfg.start.split("-"))
    root = np.random.SeedSequence(seed)
    out = []
    for loc, child in enumerate(root.spawn(cfg.n_locations)):
        rng = np.random.default_rng(child)
        images, masks, construction, books = _generate_location(cfg, rng, loc)
        keep = np.arange(cfg.n_months)
        if cfg.n_missing_months:
            drop = rng.choice(np.arange(1, cfg.n_months), size=cfg.n_missing_months, replace=False)
            keep = np.setdiff1d(keep, drop)
        stamps = []
        for t in keep:
            y, m = divmod(y0 * 12 + m0 - 1 + int(t), 12)
            stamps.append(dt.date(y, m + 1, 1))
        out.append(LocationSeries(
            location_id=f"L{loc:03d}",
            continent=cfg.continents[loc % len(cfg.continents)],
            timestamps=stamps,
            images=images[keep],
            builtup_masks=masks[keep],
            construction_masks=construction[keep],
            extras={"buildings": books, "month_index": keep.tolist()},
        ))
    return out
