"""Synthetic labeled speed corpora.

The generator produces a diurnal free-flow baseline (24 h sinusoid plus white
noise) and injects trapezoidal slowdown dips whose sustained interval becomes
the ground-truth label.  Every random draw flows from ``GenConfig.rng_seed``
through per-segment ``SeedSequence`` streams, so regeneration is bit-exact and
per-segment work could run in any order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .timeseries import (
    MAX_EVENT_MINUTES,
    MIN_EVENT_MINUTES,
    SPEED_CEILING_MPH,
    LabeledCorpus,
    SlowdownEvent,
    SpeedSeries,
)

#: Minimum sustained speed reduction that qualifies as a major slowdown.
MIN_DROP_MPH = 15.0

MINUTES_PER_DAY = 1440

# spawn_key tags deriving independent per-segment RNG streams from the seed
_STREAM_TRACE = 1
_STREAM_EVENTS = 2

_PLACEMENT_RETRIES = 200


class Overlap(ValueError):
    """Injected interval (including ramps) intersects an existing event."""


class PlacementFailure(RuntimeError):
    """Could not place all requested events disjointly after bounded retries."""


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic corpus generator.

    Defaults target the acceptance-scale corpus: 20 segments x 240 h with an
    event density of ~9.6 per 1000 h, and dips deep enough that the measured
    drop stays above the 15 mph floor despite diurnal swing and noise.
    """

    rng_seed: int = 0
    n_segments: int = 20
    hours_per_segment: float = 240.0
    free_flow_mean: float = 65.0
    free_flow_daily_amplitude: float = 7.0
    noise_std: float = 3.0
    events_per_1000h: float = 9.6
    drop_range: tuple[float, float] = (18.0, 35.0)
    duration_range: tuple[int, int] = (60, 300)
    ramp_minutes_range: tuple[int, int] = (5, 25)

    def __post_init__(self) -> None:
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.hours_per_segment <= 0:
            raise ValueError("hours_per_segment must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.events_per_1000h < 0:
            raise ValueError("events_per_1000h must be >= 0")
        lo, hi = self.drop_range
        if not (MIN_DROP_MPH <= lo <= hi):
            raise ValueError(
                f"drop_range must satisfy {MIN_DROP_MPH} <= min <= max, got {self.drop_range}"
            )
        dlo, dhi = self.duration_range
        if not (MIN_EVENT_MINUTES <= dlo <= dhi <= MAX_EVENT_MINUTES):
            raise ValueError(
                f"duration_range must lie within [{MIN_EVENT_MINUTES}, "
                f"{MAX_EVENT_MINUTES}], got {self.duration_range}"
            )
        rlo, rhi = self.ramp_minutes_range
        if not (0 <= rlo <= rhi):
            raise ValueError(f"bad ramp_minutes_range {self.ramp_minutes_range}")

    @property
    def minutes_per_segment(self) -> int:
        return int(round(self.hours_per_segment * 60))


def _segment_rng(seed: int, stream: int, segment_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(stream, segment_index))
    )


def _segment_id(segment_index: int) -> str:
    return f"seg{segment_index:03d}"


def generate_trace(cfg: GenConfig, segment_index: int) -> SpeedSeries:
    """Event-free baseline trace for one segment.

    ``free_flow_mean`` plus a 24 h sinusoid of the configured amplitude plus
    independent Gaussian noise, clamped to the physical speed range.
    """
    n = cfg.minutes_per_segment
    t = np.arange(n)
    baseline = cfg.free_flow_mean + cfg.free_flow_daily_amplitude * np.sin(
        2.0 * np.pi * t / MINUTES_PER_DAY
    )
    rng = _segment_rng(cfg.rng_seed, _STREAM_TRACE, segment_index)
    if cfg.noise_std > 0:
        baseline = baseline + rng.normal(0.0, cfg.noise_std, n)
    speeds = np.clip(baseline, 0.0, SPEED_CEILING_MPH)
    return SpeedSeries(_segment_id(segment_index), 0, speeds, np.zeros(n, dtype=bool))


def slowdown_depth_profile(
    n: int, start: int, duration: int, drop: float, ramp: int
) -> np.ndarray:
    """Per-minute speed reduction of a trapezoidal slowdown.

    The reduction equals ``drop`` exactly on ``[start, start + duration)`` and
    is strictly smaller on the linear ramps on either side, so the sustained
    interval is sharply identifiable on a noiseless trace.
    """
    depth = np.zeros(n)
    depth[start : start + duration] = drop
    if ramp > 0:
        j = np.arange(ramp)
        depth[start - ramp : start] = drop * j / ramp
        depth[start + duration : start + duration + ramp] = (
            drop * (ramp - 1 - j) / ramp
        )
    return depth


def inject_slowdown(
    series: SpeedSeries,
    start: int,
    duration: int,
    drop: float,
    ramp: int,
    existing: Sequence[SlowdownEvent] = (),
) -> tuple[SpeedSeries, SlowdownEvent]:
    """Superimpose one trapezoidal slowdown; ``start`` is a series offset.

    Returns the modified series and the label marking the sustained interval
    ``[start, start + duration)`` in absolute minutes.
    """
    if drop < MIN_DROP_MPH:
        raise ValueError(f"drop {drop} mph below the {MIN_DROP_MPH} mph floor")
    if not MIN_EVENT_MINUTES <= duration <= MAX_EVENT_MINUTES:
        raise ValueError(f"duration {duration} min outside "
                         f"[{MIN_EVENT_MINUTES}, {MAX_EVENT_MINUTES}]")
    if ramp < 0:
        raise ValueError("ramp must be >= 0")
    if start - ramp < 0 or start + duration + ramp > len(series):
        raise ValueError("event plus ramps does not fit in the series")
    lo = series.t0 + start - ramp
    hi = series.t0 + start + duration + ramp
    for ev in existing:
        if ev.segment_id == series.segment_id and lo < ev.end_min and ev.start_min < hi:
            raise Overlap(
                f"injected interval [{lo}, {hi}) intersects existing event "
                f"[{ev.start_min}, {ev.end_min})"
            )
    depth = slowdown_depth_profile(len(series), start, duration, drop, ramp)
    speeds = np.clip(series.speeds - depth, 0.0, SPEED_CEILING_MPH)
    event = SlowdownEvent(
        series.segment_id, series.t0 + start, series.t0 + start + duration
    )
    return SpeedSeries(series.segment_id, series.t0, speeds, series.gap_mask), event


def generate_corpus(cfg: GenConfig) -> LabeledCorpus:
    """Generate ``n_segments`` traces with Poisson-placed labeled slowdowns."""
    all_series: list[SpeedSeries] = []
    all_events: list[SlowdownEvent] = []
    for k in range(cfg.n_segments):
        series = generate_trace(cfg, k)
        rng = _segment_rng(cfg.rng_seed, _STREAM_EVENTS, k)
        lam = cfg.events_per_1000h * cfg.hours_per_segment / 1000.0
        count = int(rng.poisson(lam))
        events: list[SlowdownEvent] = []
        footprints: list[tuple[int, int]] = []
        for _ in range(count):
            duration = int(rng.integers(cfg.duration_range[0], cfg.duration_range[1] + 1))
            drop = float(rng.uniform(*cfg.drop_range))
            ramp = int(
                rng.integers(cfg.ramp_minutes_range[0], cfg.ramp_minutes_range[1] + 1)
            )
            placed = False
            for _ in range(_PLACEMENT_RETRIES):
                start = int(rng.integers(ramp, len(series) - duration - ramp + 1))
                lo, hi = start - ramp, start + duration + ramp
                if all(hi <= flo or fhi <= lo for flo, fhi in footprints):
                    placed = True
                    break
            if not placed:
                raise PlacementFailure(
                    f"{series.segment_id}: could not place event of {duration} min "
                    f"after {_PLACEMENT_RETRIES} attempts (density too high?)"
                )
            series, event = inject_slowdown(series, start, duration, drop, ramp, events)
            events.append(event)
            footprints.append((lo, hi))
        all_series.append(series)
        all_events.extend(events)
    return LabeledCorpus(tuple(all_series), tuple(all_events))
