"""Rule-based comparison detector.

Flags stretches where the smoothed speed falls below a fixed fraction of the
segment's free-flow speed, merges nearby stretches, and keeps those lasting
at least an hour.  Parameters were tuned once on a synthetic validation
corpus and then frozen; the point of the baseline is precisely that such
thresholds do not transfer across datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .timeseries import SOURCE_RULE, SlowdownEvent, SpeedSeries


class EmptySeries(ValueError):
    """Series has no samples."""


@dataclass(frozen=True)
class RuleConfig:
    free_flow_percentile: float = 0.85
    threshold_fraction: float = 0.75
    min_duration: int = 60
    merge_gap: int = 15
    smoothing_window: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.free_flow_percentile < 1.0:
            raise ValueError("free_flow_percentile must be in (0, 1)")
        if not 0.0 < self.threshold_fraction < 1.0:
            raise ValueError("threshold_fraction must be in (0, 1)")
        if self.min_duration < 1:
            raise ValueError("min_duration must be >= 1")
        if self.merge_gap < 0 or self.smoothing_window < 1:
            raise ValueError("bad merge_gap or smoothing_window")


def estimate_free_flow(series: SpeedSeries, cfg: RuleConfig) -> float:
    """Free-flow speed as a nearest-rank high quantile.

    Convention: the k-th largest speed with ``k = ceil((1 - p) * n)``, i.e.
    the speed exceeded by roughly a ``1 - p`` share of samples.
    """
    n = len(series)
    if n == 0:
        raise EmptySeries(series.segment_id)
    k = max(1, math.ceil((1.0 - cfg.free_flow_percentile) * n))
    return float(np.partition(series.speeds, n - k)[n - k])


def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    """Centered moving average; shrinks near the edges."""
    left = (width - 1) // 2
    right = width - 1 - left
    n = len(values)
    csum = np.concatenate(([0.0], np.cumsum(values)))
    lo = np.clip(np.arange(n) - left, 0, n)
    hi = np.clip(np.arange(n) + right + 1, 0, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def detect_rule_based(series: SpeedSeries, cfg: RuleConfig) -> list[SlowdownEvent]:
    """Threshold-crossing detection with gap merging and a duration floor."""
    if len(series) == 0:
        raise EmptySeries(series.segment_id)
    threshold = cfg.threshold_fraction * estimate_free_flow(series, cfg)
    below = _smooth(series.speeds, cfg.smoothing_window) < threshold
    edges = np.flatnonzero(np.diff(np.concatenate(([0], below.view(np.int8), [0]))))
    runs = list(zip(edges[0::2], edges[1::2]))  # half-open [start, end) offsets
    merged: list[list[int]] = []
    for start, end in runs:
        if merged and start - merged[-1][1] < cfg.merge_gap:
            merged[-1][1] = end
        else:
            merged.append([start, end])
    return [
        SlowdownEvent(series.segment_id, series.t0 + a, series.t0 + b, SOURCE_RULE)
        for a, b in merged
        if b - a >= cfg.min_duration
    ]
