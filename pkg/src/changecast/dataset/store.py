"""On-disk layouts: location roots (PNG series + index.json) and derived patch archives."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import LocationSeries, PatchSample, format_month, parse_month

log = logging.getLogger(__name__)


class IndexFileError(ValueError):
    """Malformed or inconsistent index.json."""


def write_location(series: LocationSeries, root) -> Path:
    loc_dir = Path(root) / series.location_id
    (loc_dir / "images").mkdir(parents=True, exist_ok=True)
    (loc_dir / "masks").mkdir(parents=True, exist_ok=True)
    index = {"location_id": series.location_id, "continent": series.continent,
             "timestamps": [], "images": [], "masks": []}
    for t, img, mask in zip(series.timestamps, series.images, series.builtup_masks):
        stamp = format_month(t)
        rgb = np.round(np.transpose(img, (1, 2, 0)) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(loc_dir / "images" / f"{stamp}.png")
        Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(loc_dir / "masks" / f"{stamp}.png")
        index["timestamps"].append(stamp)
        index["images"].append(f"images/{stamp}.png")
        index["masks"].append(f"masks/{stamp}.png")
    (loc_dir / "index.json").write_text(json.dumps(index, indent=2))
    return loc_dir


def read_index(loc_dir) -> dict:
    """Parsed index.json of one location (no pixels loaded)."""
    loc_dir = Path(loc_dir)
    try:
        index = json.loads((loc_dir / "index.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IndexFileError(f"{loc_dir}: {e}") from e
    if not isinstance(index, dict) or "location_id" not in index:
        raise IndexFileError(f"{loc_dir}: index.json lacks location_id")
    return index


def read_location(loc_dir) -> LocationSeries:
    loc_dir = Path(loc_dir)
    index = read_index(loc_dir)
    try:
        stamps = [parse_month(s) for s in index["timestamps"]]
        files = list(zip(index["images"], index["masks"]))
        if len(files) != len(stamps):
            raise IndexFileError("images/masks/timestamps lengths differ")
        images, masks = [], []
        for img_path, mask_path in files:
            img = np.asarray(Image.open(loc_dir / img_path).convert("RGB"), dtype=np.float32) / 255.0
            images.append(np.transpose(img, (2, 0, 1)))
            masks.append((np.asarray(Image.open(loc_dir / mask_path).convert("L")) > 127).astype(np.uint8))
        return LocationSeries(index["location_id"], index.get("continent", "unknown"),
                              stamps, np.stack(images), np.stack(masks))
    except IndexFileError:
        raise
    except (KeyError, ValueError, OSError, json.JSONDecodeError) as e:
        raise IndexFileError(f"{loc_dir}: {e}") from e


def list_locations(root) -> list[Path]:
    return sorted(p.parent for p in Path(root).glob("*/index.json"))


def _to_u8(a):
    return np.round(np.asarray(a) * 255.0).astype(np.uint8)


def archive_name(s: PatchSample) -> str:
    return f"{s.location_id}_{format_month(s.t0)}_{format_month(s.t1)}_{s.origin[0]}_{s.origin[1]}"


def write_patch(sample: PatchSample, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    base = directory / archive_name(sample)
    arrays = {"image_t0": _to_u8(sample.image_t0),
              "change_mask": sample.change_mask.astype(np.uint8),
              "first_change_month": sample.first_change_month.astype(np.uint8)}
    if sample.image_t1 is not None:
        arrays["image_t1"] = _to_u8(sample.image_t1)
    np.savez_compressed(base.with_suffix(".npz"), **arrays)
    base.with_suffix(".json").write_text(json.dumps(sample.meta(), sort_keys=True))
    return base.with_suffix(".npz")


def read_patch(path) -> PatchSample:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with np.load(path) as z:
        img1 = z["image_t1"].astype(np.float32) / 255.0 if "image_t1" in z else None
        return PatchSample(
            location_id=meta["location_id"],
            origin=tuple(meta["origin"]),
            t0=parse_month(meta["t0"]),
            t1=parse_month(meta["t1"]),
            delta_months=meta["delta_months"],
            image_t0=z["image_t0"].astype(np.float32) / 255.0,
            image_t1=img1,
            change_mask=z["change_mask"],
            first_change_month=z["first_change_month"].astype(np.int16),
            n_change=meta["n_change"],
            continent=meta.get("continent", ""),
        )


def read_sidecar(path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text())


def files_hash(paths) -> str:
    """sha256 over the bytes of every archive and sidecar, in sorted path order."""
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
        side = p.with_suffix(".json")
        if side.exists():
            h.update(side.read_bytes())
    return h.hexdigest()
