"""Per-expert latency model and its calibration from microbenchmark records.

Fast device: constant cost per expert invocation. Slow device: affine in the
number of tokens. Copies: one constant per expert weight transfer, one per
activation transfer. Everything is in milliseconds.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CalibrationIncompleteError, DataError


class Workload(str, enum.Enum):
    WEIGHT_COPY = "WeightCopy"
    ACTIVATION_COPY = "ActivationCopy"
    FAST_EXEC = "FastExec"
    SLOW_EXEC = "SlowExec"


@dataclass(frozen=True)
class MicrobenchRecord:
    workload: Workload
    batch_size: int
    latency_ms: float
    layer: int = 0

    def __post_init__(self):
        if not (self.latency_ms > 0 and math.isfinite(self.latency_ms)):
            raise DataError(f"latency_ms must be positive and finite, got {self.latency_ms}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.layer < 0:
            raise DataError(f"layer must be >= 0, got {self.layer}")


@dataclass(frozen=True)
class CostModel:
    weight_copy_ms: float = 50.0
    activation_copy_ms: float = 0.02
    fast_exec_ms: float = 5.0
    slow_ms_per_token: float = 3.0
    slow_intercept_ms: float = 0.0
    nonexpert_ms_per_step: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise DataError(f"{f.name} must be finite and >= 0, got {v}")

    def slow_cost(self, n_tokens: int) -> float:
        return self.slow_intercept_ms + self.slow_ms_per_token * n_tokens

    @property
    def fast_miss_ms(self) -> float:
        """Fast-device cost of a non-resident expert: bring the weights, then run."""
        return self.weight_copy_ms + self.fast_exec_ms

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CostModel":
        data = json.loads(text)
        names = {f.name for f in fields(cls)}
        missing = names - data.keys()
        if missing:
            raise DataError(f"cost model JSON missing fields: {sorted(missing)}")
        return cls(**{k: float(data[k]) for k in names})


DEFAULT_COST_MODEL = CostModel()


def slow_cost(model: CostModel, n_tokens: int) -> float:
    return model.slow_cost(n_tokens)


def decode_assumption_check(model: CostModel) -> bool:
    """True when one token on the slow device (plus activations out and back)
    beats copying the expert in and running it on the fast device."""
    return model.slow_cost(1) + 2 * model.activation_copy_ms < model.weight_copy_ms + model.fast_exec_ms


def ols(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Ordinary least squares line through (x, y); returns (intercept, slope)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(np.unique(x)) < 2:
        raise CalibrationIncompleteError("SlowExec needs at least two distinct batch sizes")
    xm, ym = x.mean(), y.mean()
    slope = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    return float(ym - slope * xm), slope


def fit(records: Iterable[MicrobenchRecord], nonexpert_ms_per_step: float | None = None) -> CostModel:
    by_kind: dict[Workload, list[MicrobenchRecord]] = {w: [] for w in Workload}
    for r in records:
        by_kind[Workload(r.workload)].append(r)
    missing = [w.value for w in Workload if not by_kind[w]]
    if missing:
        raise CalibrationIncompleteError("calibration incomplete: " + ", ".join(missing))

    def mean(kind):
        return float(np.mean([r.latency_ms for r in by_kind[kind]]))

    slow = by_kind[Workload.SLOW_EXEC]
    intercept, slope = ols([r.batch_size for r in slow], [r.latency_ms for r in slow])
    return CostModel(
        weight_copy_ms=mean(Workload.WEIGHT_COPY),
        activation_copy_ms=mean(Workload.ACTIVATION_COPY),
        fast_exec_ms=mean(Workload.FAST_EXEC),
        slow_ms_per_token=max(slope, 0.0),
        slow_intercept_ms=max(intercept, 0.0),
        nonexpert_ms_per_step=(
            DEFAULT_COST_MODEL.nonexpert_ms_per_step if nonexpert_ms_per_step is None else nonexpert_ms_per_step
        ),
    )


def records_from_model(
    model: CostModel, batch_sizes: Sequence[int] = (1, 2, 4, 8, 16, 32, 64, 128), num_layers: int = 32
) -> list[MicrobenchRecord]:
    """Noise-free records that ``fit`` maps back onto ``model``."""
    recs = []
    for layer in range(num_layers):
        recs.append(MicrobenchRecord(Workload.WEIGHT_COPY, 1, model.weight_copy_ms, layer))
        recs.append(MicrobenchRecord(Workload.ACTIVATION_COPY, 1, model.activation_copy_ms, layer))
        for b in batch_sizes:
            recs.append(MicrobenchRecord(Workload.FAST_EXEC, b, model.fast_exec_ms, layer))
            recs.append(MicrobenchRecord(Workload.SLOW_EXEC, b, model.slow_cost(b), layer))
    return recs


# -- CSV ----------------------------------------------------------------------

CSV_HEADER = ("workload", "batch_size", "latency_ms", "layer")


def parse_records_csv(lines: Iterable[str]) -> list[MicrobenchRecord]:
    """Parse ``workload,batch_size,latency_ms,layer``; errors name the line."""
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        raise DataError("line 1: empty file")
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise DataError(f"line 1: duplicate column in header {header}")
    if tuple(header) != CSV_HEADER:
        raise DataError(f"line 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
    records = []
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise DataError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            records.append(
                MicrobenchRecord(Workload(row[0].strip()), int(row[1]), float(row[2]), int(row[3]))
            )
        except (ValueError, DataError) as exc:
            raise DataError(f"line {lineno}: {exc}") from exc
    return records


def load_records_csv(path) -> list[MicrobenchRecord]:
    with open(path, newline="") as fh:
        return parse_records_csv(fh)


def write_records_csv(records: Iterable[MicrobenchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([Workload(r.workload).value, r.batch_size, repr(float(r.latency_ms)), r.layer])


def load_cost_model(path) -> CostModel:
    return CostModel.from_json(Path(path).read_text())


def save_cost_model(model: CostModel, path) -> None:
    Path(path).write_text(model.to_json())
