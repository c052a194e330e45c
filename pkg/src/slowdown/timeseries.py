"""Minute-resolution speed traces, slowdown intervals, and their CSV formats.

Everything downstream (window extraction, detection, evaluation) works on the
types defined here.  Time is kept as integer minutes since a corpus epoch;
index ``i`` of a series corresponds to absolute minute ``t0 + i``.  All

containers are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

#: Length of the analysis window: ten hours of one-minute samples.
WINDOW_MINUTES = 600

#: Hard ceiling applied to stored speeds; anything above is a sensor artifact.
SPEED_CEILING_MPH = 120.0

#: Duration bounds (minutes) for labeled slowdown events.
MIN_EVENT_MINUTES = 60
MAX_EVENT_MINUTES = 360

SOURCE_LABEL = "label"
SOURCE_ML = "ml_detector"
SOURCE_RULE = "rule_detector"
_SOURCES = (SOURCE_LABEL, SOURCE_ML, SOURCE_RULE)

SPEED_CSV_HEADER = ("segment_id", "timestamp_min", "speed_mph")
LABEL_CSV_HEADER = ("segment_id", "start_min", "end_min")


class SeriesTooShort(ValueError):
    """Series has fewer samples than one analysis window."""


class NonUniformSampling(ValueError):
    """Timestamps do not advance in exact one-minute steps."""


class AllGaps(ValueError):
    """Gap filling is impossible because no sample survived validation."""


class OutOfRange(IndexError):
    """Requested window extends past the series bounds."""


class CorpusError(ValueError):
    """A labeled corpus violates one of its structural invariants."""


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SpeedSeries:
    """One segment's speed trace, sampled at exactly one-minute intervals.

    ``gap_mask`` marks samples that were missing (or invalid) in the source
    data; it is preserved through gap filling for audit.
    """

    segment_id: str
    t0: int
    speeds: np.ndarray
    gap_mask: np.ndarray

    def __post_init__(self) -> None:
        speeds = _frozen_array(self.speeds, np.float64)
        gaps = _frozen_array(self.gap_mask, bool)
        if speeds.ndim != 1:
            raise ValueError("speeds must be one-dimensional")
        if gaps.shape != speeds.shape:
            raise ValueError("gap_mask length must equal speeds length")
        object.__setattr__(self, "speeds", speeds)
        object.__setattr__(self, "gap_mask", gaps)
        object.__setattr__(self, "t0", int(self.t0))

    def __len__(self) -> int:
        return self.speeds.size

    @property
    def end_min(self) -> int:
        """Absolute minute one past the last sample."""
        return self.t0 + len(self)


@dataclass(frozen=True)
class SlowdownEvent:
    """A labeled or detected slowdown interval, ``[start_min, end_min)``."""

    segment_id: str
    start_min: int
    end_min: int
    source: str = SOURCE_LABEL

    def __post_init__(self) -> None:
        object.__setattr__(self, "start_min", int(self.start_min))
        object.__setattr__(self, "end_min", int(self.end_min))
        if self.start_min >= self.end_min:
            raise ValueError(
                f"event start {self.start_min} must precede end {self.end_min}"
            )
        if self.source not in _SOURCES:
            raise ValueError(f"unknown event source {self.source!r}")

    @property
    def duration(self) -> int:
        return self.end_min - self.start_min


@dataclass(frozen=True)
class NormalizationSpec:
    """Linear speed scale mapping mph into the unit interval."""

    v_max: float = 100.0

    def __post_init__(self) -> None:
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")

    def normalize(self, values) -> np.ndarray:
        """Map speeds to [0, 1]: ``clamp(x / v_max, 0, 1)``."""
        return np.clip(np.asarray(values, dtype=np.float64) / self.v_max, 0.0, 1.0)

    def denormalize(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.v_max


@dataclass(frozen=True)
class LabeledCorpus:
    """A set of speed series with their ground-truth slowdown labels.

    Construction validates the structural invariants: every event lies fully
    inside its series' time range, per-segment events are pairwise disjoint,
    and labeled durations fall within the one-to-six-hour band.
    """

    series: tuple[SpeedSeries, ...]
    events: tuple[SlowdownEvent, ...]

    def __post_init__(self) -> None:
        series = tuple(self.series)
        events = tuple(
            sorted(self.events, key=lambda e: (e.segment_id, e.start_min))
        )
        object.__setattr__(self, "series", series)
        object.__setattr__(self, "events", events)
        self._validate()

    def _validate(self) -> None:
        by_id = {}
        for s in self.series:
            if s.segment_id in by_id:
                raise CorpusError(f"duplicate segment_id {s.segment_id!r}")
            by_id[s.segment_id] = s
        prev: SlowdownEvent | None = None
        for ev in self.events:
            s = by_id.get(ev.segment_id)
            if s is None:
                raise CorpusError(f"event references unknown segment {ev.segment_id!r}")
            if ev.start_min < s.t0 or ev.end_min > s.end_min:
                raise CorpusError(
                    f"event [{ev.start_min}, {ev.end_min}) outside series "
                    f"range [{s.t0}, {s.end_min}) on {ev.segment_id}"
                )
            if ev.source == SOURCE_LABEL and not (
                MIN_EVENT_MINUTES <= ev.duration <= MAX_EVENT_MINUTES
            ):
                raise CorpusError(
                    f"labeled event duration {ev.duration} min outside "
                    f"[{MIN_EVENT_MINUTES}, {MAX_EVENT_MINUTES}]"
                )
            if (
                prev is not None
                and prev.segment_id == ev.segment_id
                and ev.start_min < prev.end_min
            ):
                raise CorpusError(
                    f"overlapping events on {ev.segment_id}: "
                    f"[{prev.start_min}, {prev.end_min}) and "
                    f"[{ev.start_min}, {ev.end_min})"
                )
            prev = ev

    def events_for(self, segment_id: str) -> tuple[SlowdownEvent, ...]:
        """Events on one segment, sorted by start minute."""
        return tuple(e for e in self.events if e.segment_id == segment_id)

    @property
    def total_hours(self) -> float:
        return sum(len(s) for s in self.series) / 60.0


def validate_series(raw: SpeedSeries) -> SpeedSeries:
    """Mark invalid samples as gaps and clamp speeds to the physical range.

    Non-finite and negative samples join the gap mask (their stored value is
    a placeholder until :func:`fill_gaps` runs); everything is clamped to
    ``[0, SPEED_CEILING_MPH]``.
    """
    if len(raw) < WINDOW_MINUTES:
        raise SeriesTooShort(
            f"{raw.segment_id}: {len(raw)} samples < window of {WINDOW_MINUTES}"
        )
    speeds = np.array(raw.speeds, dtype=np.float64)
    bad = ~np.isfinite(speeds) | (speeds < 0)
    speeds[bad] = 0.0
    np.clip(speeds, 0.0, SPEED_CEILING_MPH, out=speeds)
    return SpeedSeries(raw.segment_id, raw.t0, speeds, raw.gap_mask | bad)


def fill_gaps(series: SpeedSeries) -> SpeedSeries:
    """Replace gap-masked samples by linear interpolation between neighbors.

    Leading and trailing gaps take the nearest surviving value.  The gap mask
    is kept unchanged so filled samples remain auditable.  Idempotent.
    """
    mask = series.gap_mask
    if not mask.any():
        return series
    if mask.all():
        raise AllGaps(f"{series.segment_id}: no non-gap sample to interpolate from")
    known = np.flatnonzero(~mask)
    filled = np.interp(np.arange(len(series)), known, series.speeds[known])
    return SpeedSeries(series.segment_id, series.t0, filled, mask)


def slice_window(series: SpeedSeries, start: int) -> np.ndarray:
    """Return the 600 contiguous samples beginning at offset ``start``."""
    if not 0 <= start <= len(series) - WINDOW_MINUTES:
        raise OutOfRange(
            f"window at offset {start} exceeds series of length {len(series)}"
        )
    return series.speeds[start : start + WINDOW_MINUTES]


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------


def _format_speed(value: float) -> str:
    # repr of the Python float is the shortest exact round-trip form
    return repr(float(value))


def write_speed_csv(series: SpeedSeries, path: str | Path) -> None:
    """Write one segment's trace; gap samples get an empty speed field."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SPEED_CSV_HEADER)
        for i in range(len(series)):
            speed = "" if series.gap_mask[i] else _format_speed(series.speeds[i])
            writer.writerow([series.segment_id, series.t0 + i, speed])


def read_speed_csv(path: str | Path) -> SpeedSeries:
    """Read one segment's trace as written by :func:`write_speed_csv`.

    The returned series is raw: gaps are masked but nothing is validated,
    clamped, or filled.
    """
    path = Path(path)
    segment_id: str | None = None
    t0: int | None = None
    prev_ts: int | None = None
    speeds: list[float] = []
    gaps: list[bool] = []
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SPEED_CSV_HEADER:
            raise ValueError(f"{path}: bad speed CSV header {header!r}")
        for row in reader:
            if not row:
                continue
            seg, ts_field, speed_field = row
            ts = int(ts_field)
            if segment_id is None:
                segment_id, t0 = seg, ts
            elif seg != segment_id:
                raise ValueError(f"{path}: mixed segment ids {segment_id!r}/{seg!r}")
            if prev_ts is not None and ts != prev_ts + 1:
                raise NonUniformSampling(
                    f"{path}: timestamp {ts} follows {prev_ts}; expected 1-minute steps"
                )
            prev_ts = ts
            if speed_field == "":
                speeds.append(0.0)
                gaps.append(True)
            else:
                speeds.append(float(speed_field))
                gaps.append(False)
    if segment_id is None or t0 is None:
        raise ValueError(f"{path}: no data rows")
    return SpeedSeries(segment_id, t0, np.array(speeds), np.array(gaps))


def write_label_csv(events: Iterable[SlowdownEvent], path: str | Path) -> None:
    """Write events in the shared label/detection CSV format."""
    ordered = sorted(events, key=lambda e: (e.segment_id, e.start_min))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABEL_CSV_HEADER)
        for ev in ordered:
            writer.writerow([ev.segment_id, ev.start_min, ev.end_min])


def read_label_csv(path: str | Path, source: str = SOURCE_LABEL) -> list[SlowdownEvent]:
    """Read events from a label/detection CSV, tagging them with ``source``."""
    events: list[SlowdownEvent] = []
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != LABEL_CSV_HEADER:
            raise ValueError(f"{path}: bad label CSV header {header!r}")
        for row in reader:
            if not row:
                continue
            seg, start, end = row
            events.append(SlowdownEvent(seg, int(start), int(end), source))
    events.sort(key=lambda e: (e.segment_id, e.start_min))
    return events


def write_corpus(corpus: LabeledCorpus, out_dir: str | Path) -> None:
    """Write a corpus as ``speeds/<segment_id>.csv`` plus ``labels.csv``."""
    out_dir = Path(out_dir)
    speeds_dir = out_dir / "speeds"
    speeds_dir.mkdir(parents=True, exist_ok=True)
    for series in corpus.series:
        write_speed_csv(series, speeds_dir / f"{series.segment_id}.csv")
    write_label_csv(corpus.events, out_dir / "labels.csv")


def read_corpus(corpus_dir: str | Path, fill: bool = True) -> LabeledCorpus:
    """Load a corpus directory, validating (and by default gap-filling) it."""
    corpus_dir = Path(corpus_dir)
    paths = sorted((corpus_dir / "speeds").glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no speed CSVs under {corpus_dir / 'speeds'}")
    series = []
    for p in paths:
        s = validate_series(read_speed_csv(p))
        series.append(fill_gaps(s) if fill else s)
    events = read_label_csv(corpus_dir / "labels.csv")
    return LabeledCorpus(tuple(series), tuple(events))
