"""Minute-bar ingestion, validation and relative (percent-of-open) encoding.

Relative values are stored as plain ratios (0.02 means +2%).  The open
price itself is not a feature: under this encoding it is identically zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import (
    EmptySeries,
    InvariantViolation,
    MalformedRow,
    NonMonotonicTimestamp,
    ValidationError,
)

CSV_FORMAT_VERSION = 1


@dataclass(frozen=True, slots=True)
class Bar:
    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume: float

    def violations(self) -> list[str]:
        problems = []
        if not self.open > 0:
            problems.append("open must be > 0")
        if not self.low <= self.high:
            problems.append("low must be <= high")
        if not self.low <= self.open <= self.high:
            problems.append("open must lie within [low, high]")
        if not self.low <= self.close <= self.high:
            problems.append("close must lie within [low, high]")
        if not self.volume >= 0:
            problems.append("volume must be >= 0")
        return problems


@dataclass(frozen=True, slots=True)
class RelativeBar:
    rel_high: float
    rel_low: float
    rel_close: float
    norm_volume: float


@dataclass(frozen=True, slots=True)
class BarFormat:
    """Header names of the six required columns (matched case-insensitively)."""

    timestamp: str = "timestamp"
    open: str = "open"
    high: str = "high"
    low: str = "low"
    close: str = "close"
    volume: str = "volume"

    def columns(self) -> tuple[str, ...]:
        return (self.timestamp, self.open, self.high, self.low, self.close, self.volume)


def _parse_iso(text: str) -> int:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _is_int(text: str) -> bool:
    t = text.lstrip("+-")
    return t.isdigit()


def parse_bars(stream: Iterable[str], fmt: BarFormat | None = None) -> list[Bar]:
    """Parse a CSV stream with a header row into validated bars.

    Errors carry the 1-based physical line number (the header is line 1).
    The timestamp column may hold integer epoch seconds or ISO-8601 strings;
    the first data row fixes the mode for the whole file.
    """
    fmt = fmt or BarFormat()
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow(1, "missing header") from None
    names = [h.strip().lower() for h in header]
    try:
        idx = [names.index(col.lower()) for col in fmt.columns()]
    except ValueError:
        missing = [c for c in fmt.columns() if c.lower() not in names]
        raise MalformedRow(1, f"missing columns {missing}") from None

    bars: list[Bar] = []
    epoch_mode: bool | None = None
    prev_ts: int | None = None
    for row in reader:
        line_no = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < len(names):
            raise MalformedRow(line_no, f"expected {len(names)} fields, got {len(row)}")
        cells = [row[i].strip() for i in idx]
        ts_text = cells[0]
        row_is_epoch = _is_int(ts_text)
        if epoch_mode is None:
            epoch_mode = row_is_epoch
        elif row_is_epoch != epoch_mode:
            raise MalformedRow(line_no, "timestamp format differs from earlier rows")
        try:
            ts = int(ts_text) if epoch_mode else _parse_iso(ts_text)
            o, h, lo, c, v = (float(x) for x in cells[1:])
        except ValueError as exc:
            raise MalformedRow(line_no, str(exc)) from None
        if not all(math.isfinite(x) for x in (o, h, lo, c, v)):
            raise MalformedRow(line_no, "non-finite value")
        bar = Bar(ts, o, h, lo, c, v)
        problems = bar.violations()
        if problems:
            raise InvariantViolation(line_no, "; ".join(problems))
        if prev_ts is not None and ts <= prev_ts:
            raise NonMonotonicTimestamp(line_no, f"timestamp {ts} does not increase")
        prev_ts = ts
        bars.append(bar)
    return bars


def read_bars(path, fmt: BarFormat | None = None) -> list[Bar]:
    with open(path, newline="", encoding="utf-8") as f:
        return parse_bars(f, fmt)


def write_bars(bars: Sequence[Bar], stream: TextIO, fmt: BarFormat | None = None) -> None:
    """Inverse of :func:`parse_bars`; timestamps are written as epoch seconds."""
    fmt = fmt or BarFormat()
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(fmt.columns())
    for b in bars:
        writer.writerow([int(b.timestamp)] + [repr(float(x)) for x in (b.open, b.high, b.low, b.close, b.volume)])


def encode_relative(bar: Bar, volume_scale: float) -> RelativeBar:
    o = bar.open
    return RelativeBar(
        rel_high=(bar.high - o) / o,
        rel_low=(bar.low - o) / o,
        rel_close=(bar.close - o) / o,
        norm_volume=bar.volume / volume_scale,
    )


def volume_scale_of(bars: Sequence[Bar]) -> float:
    if not bars:
        raise EmptySeries("cannot compute volume scale of an empty series")
    mean = math.fsum(b.volume for b in bars) / len(bars)
    return mean if mean > 0 else 1.0


@dataclass(frozen=True)
class PriceSeries:
    """Validated bars together with their relative encoding.

    ``closes`` and ``rel_array`` (columns: high, low, close, volume) are
    numpy views used by the environment's hot path.
    """

    bars: tuple[Bar, ...]
    rel: tuple[RelativeBar, ...]
    source_id: str = ""
    closes: np.ndarray = field(init=False, repr=False, compare=False)
    rel_array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.bars) != len(self.rel):
            raise ValidationError("bars and rel must have equal length")
        for i in range(1, len(self.bars)):
            if self.bars[i].timestamp <= self.bars[i - 1].timestamp:
                raise NonMonotonicTimestamp(i + 1, "timestamps must strictly increase")
        closes = np.array([b.close for b in self.bars], dtype=np.float64)
        rel = np.array(
            [(r.rel_high, r.rel_low, r.rel_close, r.norm_volume) for r in self.rel],
            dtype=np.float64,
        ).reshape(len(self.rel), 4)
        closes.flags.writeable = False
        rel.flags.writeable = False
        object.__setattr__(self, "closes", closes)
        object.__setattr__(self, "rel_array", rel)

    def __len__(self) -> int:
        return len(self.bars)

    @classmethod
    def from_bars(cls, bars: Sequence[Bar], source_id: str = "", volume_scale: float | None = None) -> "PriceSeries":
        if volume_scale is None:
            volume_scale = volume_scale_of(bars) if bars else 1.0
        return cls(tuple(bars), tuple(encode_relative(b, volume_scale) for b in bars), source_id)


def split_series(series: PriceSeries, boundary_timestamp: int) -> tuple[PriceSeries, PriceSeries]:
    """Partition into bars strictly before the boundary and the rest."""
    cut = 0
    while cut < len(series.bars) and series.bars[cut].timestamp < boundary_timestamp:
        cut += 1
    left = PriceSeries(series.bars[:cut], series.rel[:cut], series.source_id)
    right = PriceSeries(series.bars[cut:], series.rel[cut:], series.source_id)
    return left, right


def boundary_for_fraction(series: PriceSeries, test_fraction: float) -> int:
    """Timestamp that leaves the last ``test_fraction`` of rows on the right."""
    n = len(series)
    if n == 0:
        raise EmptySeries("empty series")
    cut = min(n - 1, max(0, int(round(n * (1.0 - test_fraction)))))
    return series.bars[cut].timestamp


def load_series(path, fmt: BarFormat | None = None, source_id: str | None = None) -> PriceSeries:
    bars = read_bars(path, fmt)
    if not bars:
        raise EmptySeries(f"{path}: no data rows")
    return PriceSeries.from_bars(bars, source_id=str(path) if source_id is None else source_id)


def synthetic_bars(
    n: int,
    period: int = 20,
    amplitude: float = 0.01,
    noise: float = 0.0,
    base_price: float = 100.0,
    seed: int = 0,
    start: int = 1514885400,
) -> list[Bar]:
    """Minute bars whose close follows a sine wave plus optional noise.

    Each bar opens at the previous close, so ``rel_close`` is the one-bar
    return and a window of bars reveals the phase of the wave.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n + 1)
    closes = base_price * (1.0 + amplitude * np.sin(2.0 * np.pi * t / period))
    if noise > 0:
        closes = closes * (1.0 + noise * rng.standard_normal(n + 1))
    wick = np.abs(rng.normal(0.0, amplitude / 10.0, size=(n, 2)))
    volumes = rng.integers(500, 1500, size=n)
    bars = []
    for i in range(n):
        o, c = float(closes[i]), float(closes[i + 1])
        bars.append(
            Bar(
                timestamp=start + 60 * i,
                open=o,
                high=max(o, c) * (1.0 + float(wick[i, 0])),
                low=min(o, c) * (1.0 - float(wick[i, 1])),
                close=c,
                volume=float(volumes[i]),
            )
        )
    return bars
