from .labels import (
    FORECAST_RANGES,
    PATCH_SIZE,
    LocationSeries,
    PatchSample,
    compute_first_change_map,
    derive_change_mask,
    enumerate_pairs,
    format_month,
    month_diff,
    pair_labels,
    parse_month,
    tile_origins,
    tile_patches,
)
from .pairs import ArchiveSet, IndexedView, PairSet
from .split import SplitManifest, make_split
from .synth import SynthConfig, synth_generate

__all__ = [
    "FORECAST_RANGES", "PATCH_SIZE", "LocationSeries", "PatchSample", "compute_first_change_map",
    "derive_change_mask", "enumerate_pairs", "format_month", "month_diff", "pair_labels", "parse_month",
    "tile_origins", "tile_patches", "ArchiveSet", "IndexedView", "PairSet", "SplitManifest", "make_split",
    "SynthConfig", "synth_generate",
]
