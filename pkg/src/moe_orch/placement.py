"""Expert popularity, fast-memory placement and hit-rate analytics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, TraceInvalidError, UndefinedRateError
from .moe_core import ModelShape, RoutingTrace


@dataclass(frozen=True, eq=False)
class PopularityProfile:
    counts: np.ndarray  # [num_layers, experts_per_layer]

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.ndim != 2:
            raise DataError("profile counts must be a 2-D matrix")
        if (c < 0).any():
            raise DataError("profile counts must be non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total_selections(self) -> int:
        return int(self.counts.sum())

    @property
    def num_layers(self) -> int:
        return self.counts.shape[0]

    @property
    def experts_per_layer(self) -> int:
        return self.counts.shape[1]

    def normalized(self) -> np.ndarray:
        """Counts divided by the most popular expert's count."""
        top = self.counts.max()
        if top == 0:
            raise UndefinedRateError("cannot normalise an all-zero profile")
        return self.counts / top

    def __eq__(self, other):
        return isinstance(other, PopularityProfile) and np.array_equal(self.counts, other.counts)

    __hash__ = None


def uniform_profile(num_layers: int, experts_per_layer: int, count: int = 1) -> PopularityProfile:
    return PopularityProfile(np.full((num_layers, experts_per_layer), count))


def profile_from_trace(trace: RoutingTrace, shape: ModelShape) -> PopularityProfile:
    counts = np.zeros((shape.num_layers, shape.experts_per_layer), dtype=np.int64)
    for step in trace.steps:
        if len(step.layers) > shape.num_layers:
            raise TraceInvalidError(f"step has {len(step.layers)} layers, shape has {shape.num_layers}")
        for l, sels in enumerate(step.layers):
            for s in sels:
                if not 0 <= s.expert < shape.experts_per_layer:
                    raise TraceInvalidError(f"layer {l}: expert id {s.expert} out of range")
                counts[l, s.expert] += s.token_count
    return PopularityProfile(counts)


@dataclass(frozen=True)
class Placement:
    resident: frozenset  # of (layer, expert)
    capacity: int

    def __post_init__(self):
        object.__setattr__(self, "resident", frozenset((int(l), int(e)) for l, e in self.resident))
        if self.capacity < 0:
            raise DataError("capacity must be non-negative")
        if len(self.resident) > self.capacity:
            raise DataError(f"{len(self.resident)} resident experts exceed capacity {self.capacity}")

    def is_resident(self, layer: int, expert: int) -> bool:
        return (layer, expert) in self.resident

    def layer_mask(self, layer: int, experts_per_layer: int) -> tuple[bool, ...]:
        return tuple((layer, e) in self.resident for e in range(experts_per_layer))

    def check_shape(self, shape: ModelShape) -> None:
        for l, e in self.resident:
            if not (0 <= l < shape.num_layers and 0 <= e < shape.experts_per_layer):
                raise DataError(f"resident expert ({l}, {e}) outside model shape")

    def to_json(self) -> str:
        return json.dumps({"capacity": self.capacity, "resident": sorted(map(list, self.resident))}) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Placement":
        data = json.loads(text)
        try:
            return cls(frozenset(tuple(p) for p in data["resident"]), int(data["capacity"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed placement JSON: {exc}") from exc


def _ranked(profile: PopularityProfile, most_popular: bool) -> list[tuple[int, int]]:
    L, E = profile.counts.shape
    pairs = [(l, e) for l in range(L) for e in range(E)]
    sign = -1 if most_popular else 1
    # stable sort keeps (layer, expert) lexicographic order among ties
    return sorted(pairs, key=lambda p: sign * int(profile.counts[p]))


def greedy_place(profile: PopularityProfile, capacity: int, per_layer: bool = False) -> Placement:
    """Most popular experts first until ``capacity`` is used up.

    The default pool is global across layers. With ``per_layer`` each layer
    gets ``capacity // num_layers`` slots and the remainder goes to the
    lowest-numbered layers.
    """
    if capacity < 0:
        raise DataError("capacity must be non-negative")
    if not per_layer:
        return Placement(frozenset(_ranked(profile, True)[:capacity]), capacity)
    L, E = profile.counts.shape
    base, extra = divmod(capacity, L) if L else (0, 0)
    resident = []
    for l in range(L):
        quota = min(E, base + (1 if l < extra else 0))
        order = sorted(range(E), key=lambda e: -int(profile.counts[l, e]))
        resident.extend((l, e) for e in order[:quota])
    return Placement(frozenset(resident), capacity)


def expected_hit_rate(placement: Placement, profile: PopularityProfile) -> float:
    total = profile.total_selections
    if total == 0:
        raise UndefinedRateError("hit rate undefined for an empty profile")
    hits = sum(int(profile.counts[l, e]) for l, e in placement.resident)
    return hits / total


def hit_rate_bounds(profile: PopularityProfile, capacity: int) -> tuple[float, float, float]:
    """(best, worst, random) expected hit rates for ``capacity`` resident experts."""
    best = expected_hit_rate(greedy_place(profile, capacity), profile)
    worst_set = frozenset(_ranked(profile, False)[:capacity])
    worst = expected_hit_rate(Placement(worst_set, capacity), profile)
    total_experts = profile.counts.size
    random = min(capacity, total_experts) / total_experts
    return best, worst, random


def popularity_summary(profile: PopularityProfile) -> dict:
    """Descriptive statistics of the max-normalised popularity matrix."""
    v = profile.normalized().ravel()
    return {
        "experts": int(v.size),
        "mean": float(v.mean()),
        "std": float(v.std()),
        "min": float(v.min()),
        "p25": float(np.percentile(v, 25)),
        "p75": float(np.percentile(v, 75)),
        "below_0.6": int((v < 0.6).sum()),
        "above_0.8": int((v > 0.8).sum()),
    }


def sparsity_histogram(activations: Iterable[float], thresholds: Sequence[float]) -> list[float]:
    """Fraction of values whose magnitude is strictly below each threshold."""
    a = np.abs(np.asarray(list(activations) if not isinstance(activations, np.ndarray) else activations, dtype=float))
    if a.size == 0:
        raise UndefinedRateError("no activations to summarise")
    t = list(thresholds)
    if any(b <= a_ for a_, b in zip(t, t[1:])):
        raise DataError("thresholds must be strictly increasing")
    return [float((a < th).sum() / a.size) for th in t]


def threshold_label(th: float) -> str:
    return f"lt_{float(th)!r}"


# -- CSV ----------------------------------------------------------------------


def write_profile_csv(profile: PopularityProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "expert", "count"])
        L, E = profile.counts.shape
        for l in range(L):
            for e in range(E):
                w.writerow([l, e, int(profile.counts[l, e])])


def load_profile_csv(path, shape: ModelShape | None = None) -> PopularityProfile:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["layer", "expert", "count"]:
            raise DataError("line 1: expected header layer,expert,count")
        for row in reader:
            if not row:
                continue
            try:
                l, e, c = (int(v) for v in row)
            except ValueError as exc:
                raise DataError(f"line {reader.line_num}: {exc}") from exc
            if l < 0 or e < 0:
                raise DataError(f"line {reader.line_num}: negative index")
            rows.append((l, e, c))
    if shape is not None:
        L, E = shape.num_layers, shape.experts_per_layer
    else:
        L = 1 + max((r[0] for r in rows), default=-1)
        E = 1 + max((r[1] for r in rows), default=-1)
    counts = np.zeros((L, E), dtype=np.int64)
    for l, e, c in rows:
        if l >= L or e >= E:
            raise DataError(f"profile entry ({l}, {e}) outside model shape")
        counts[l, e] = c
    return PopularityProfile(counts)


def write_sparsity_csv(per_layer: Sequence[Sequence[float]], thresholds: Sequence[float], path) -> None:
    """One row per layer; cells are percentages with two decimals."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer"] + [threshold_label(t) for t in thresholds])
        for l, fracs in enumerate(per_layer):
            w.writerow([l] + [f"{100 * f:.2f}" for f in fracs])


def load_placement(path) -> Placement:
    return Placement.from_json(Path(path).read_text())


def save_placement(placement: Placement, path) -> None:
    Path(path).write_text(placement.to_json())
