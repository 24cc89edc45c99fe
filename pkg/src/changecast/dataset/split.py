"""Continent-stratified train/val/test split at location granularity."""
from __future__ import annotations

import json
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

SPLITS = ("train", "val", "test")
PROPORTIONS = (0.7, 0.1, 0.2)


@dataclass
class SplitManifest:
    assignment: dict[str, str]
    seed: int
    report: dict[str, dict[str, int]] = field(default_factory=dict)

    def locations(self, split: str) -> list[str]:
        return sorted(k for k, v in self.assignment.items() if v == split)

    def counts(self) -> dict[str, int]:
        return {s: sum(v == s for v in self.assignment.values()) for s in SPLITS}

    def to_json(self) -> dict:
        return {"seed": self.seed, "assignment": dict(sorted(self.assignment.items())), "report": self.report}

    @classmethod
    def from_json(cls, d: dict) -> "SplitManifest":
        return cls(dict(d["assignment"]), int(d["seed"]), d.get("report", {}))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def _apportion(n: int, props=PROPORTIONS) -> list[int]:
    """Largest-remainder rounding of n * props; ties go to the smaller split."""
    quotas = [n * p for p in props]
    counts = [math.floor(q + 1e-9) for q in quotas]
    rest = sorted(range(len(props)), key=lambda k: (-(quotas[k] - counts[k]), props[k]))
    for k in rest[: n - sum(counts)]:
        counts[k] += 1
    return counts


def make_split(locations, seed: int = 0) -> SplitManifest:
    """Assign (location_id, continent) pairs to train/val/test.

    Every continent first receives floor(n_c * p) locations per split. The
    leftover locations are then handed out so the global totals match the
    largest-remainder apportionment of the full location count, preferring the
    splits where each continent has the largest fractional remainder.
    """
    locations = list(locations)
    if len(locations) < 5:
        raise ValueError(f"need at least 5 locations to split, got {len(locations)}")
    ids = [loc for loc, _ in locations]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate location ids")

    by_cont = defaultdict(list)
    for loc, cont in locations:
        by_cont[cont].append(loc)
    conts = sorted(by_cont)

    totals = _apportion(len(locations))
    for k in (1, 2):  # val and test never empty
        if totals[k] == 0:
            totals[k] = 1
            totals[0] -= 1

    alloc = {c: [math.floor(len(by_cont[c]) * p + 1e-9) for p in PROPORTIONS] for c in conts}
    need = [totals[k] - sum(alloc[c][k] for c in conts) for k in range(3)]
    seats = []
    for c in conts:
        n = len(by_cont[c])
        for k, p in enumerate(PROPORTIONS):
            seats.append((-(n * p - alloc[c][k]), k, c))
    seats.sort()
    left = {c: len(by_cont[c]) - sum(alloc[c]) for c in conts}
    for _, k, c in seats:
        if left[c] > 0 and need[k] > 0:
            alloc[c][k] += 1
            left[c] -= 1
            need[k] -= 1
    for c in conts:
        while left[c] > 0:
            k = max(range(3), key=lambda j: need[j])
            alloc[c][k] += 1
            left[c] -= 1
            need[k] -= 1

    rng = random.Random(seed)
    assignment = {}
    report = {}
    for c in conts:
        locs = sorted(by_cont[c])
        rng.shuffle(locs)
        i = 0
        for split, n in zip(SPLITS, alloc[c]):
            for loc in locs[i:i + n]:
                assignment[loc] = split
            i += n
        report[c] = dict(zip(SPLITS, alloc[c]))
    return SplitManifest(assignment, seed, report)
