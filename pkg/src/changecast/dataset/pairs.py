"""Indexable patch collections used by training and evaluation.

`PairSet` tiles in-memory series lazily; `ArchiveSet` reads derived archives
from disk. Both expose `n_change` (for the sampler), `deltas` and a content
hash for run manifests.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import store
from .labels import LocationSeries, PATCH_SIZE, PatchSample, month_diff, pair_labels, tile_origins


@dataclass(frozen=True)
class PatchRef:
    series: int
    i0: int
    i1: int
    origin: tuple[int, int]


class PairSet:
    """All tiles of all date pairs whose month gap is in `ranges` (None: every gap >= 1)."""

    def __init__(self, series: list[LocationSeries], ranges=None, patch_size: int = PATCH_SIZE,
                 with_t1: bool = True):
        self.series = list(series)
        self.patch_size = patch_size
        self.with_t1 = with_t1
        wanted = None if ranges is None else set(ranges)
        refs, counts, deltas = [], [], []
        for si, s in enumerate(self.series):
            origins = tile_origins(s.shape, patch_size)
            T = len(s.timestamps)
            for i0 in range(T):
                for i1 in range(i0 + 1, T):
                    d = month_diff(s.timestamps[i0], s.timestamps[i1])
                    if wanted is not None and d not in wanted:
                        continue
                    full = s.builtup_masks[i1].astype(bool) & ~s.builtup_masks[i0].astype(bool)
                    for r, c in origins:
                        refs.append(PatchRef(si, i0, i1, (r, c)))
                        counts.append(int(full[r:r + patch_size, c:c + patch_size].sum()))
                        deltas.append(d)
        self.refs = refs
        self.n_change = np.asarray(counts, dtype=np.int64)
        self.deltas = np.asarray(deltas, dtype=np.int64)

    def __len__(self):
        return len(self.refs)

    def __getitem__(self, i) -> PatchSample:
        ref = self.refs[i]
        s = self.series[ref.series]
        r, c = ref.origin
        p = self.patch_size
        win = (slice(r, r + p), slice(c, c + p))
        y_c, fcm = pair_labels(s, ref.i0, ref.i1, win)
        return PatchSample(
            location_id=s.location_id,
            origin=ref.origin,
            t0=s.timestamps[ref.i0],
            t1=s.timestamps[ref.i1],
            delta_months=month_diff(s.timestamps[ref.i0], s.timestamps[ref.i1]),
            image_t0=s.images[ref.i0][(slice(None),) + win],
            image_t1=s.images[ref.i1][(slice(None),) + win] if self.with_t1 else None,
            change_mask=y_c,
            first_change_month=fcm,
            n_change=int(self.n_change[i]),
            continent=s.continent,
        )

    def subset_by_delta(self, delta: int) -> "IndexedView":
        return IndexedView(self, np.flatnonzero(self.deltas == delta))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for s in self.series:
            h.update(s.location_id.encode())
            h.update(np.ascontiguousarray(s.images).tobytes())
            h.update(np.ascontiguousarray(s.builtup_masks).tobytes())
        h.update(np.asarray([(x.series, x.i0, x.i1) + x.origin for x in self.refs], dtype=np.int64).tobytes())
        return h.hexdigest()


class IndexedView:
    def __init__(self, base, indices):
        self.base = base
        self.indices = np.asarray(indices, dtype=np.int64)
        self.n_change = base.n_change[self.indices]
        self.deltas = base.deltas[self.indices]

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i) -> PatchSample:
        return self.base[int(self.indices[i])]

    def content_hash(self) -> str:
        h = hashlib.sha256(self.base.content_hash().encode())
        h.update(self.indices.tobytes())
        return h.hexdigest()


class ArchiveSet:
    """Derived patch archives (`*.npz` + JSON sidecar) from one or more directories."""

    def __init__(self, paths):
        self.paths = sorted(Path(p) for p in paths)
        metas = [store.read_sidecar(p) for p in self.paths]
        self.n_change = np.asarray([m["n_change"] for m in metas], dtype=np.int64)
        self.deltas = np.asarray([m["delta_months"] for m in metas], dtype=np.int64)

    @classmethod
    def from_dirs(cls, *dirs) -> "ArchiveSet":
        paths = []
        for d in dirs:
            paths.extend(Path(d).glob("*.npz"))
        return cls(paths)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i) -> PatchSample:
        return store.read_patch(self.paths[i])

    def content_hash(self) -> str:
        return store.files_hash(self.paths)
