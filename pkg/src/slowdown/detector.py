"""Two-stage slowdown detection over full speed traces.

Stage one slides the ten-hour window along a series; every window the
classifier flags gets a start-time and an end-time estimate from the two
regressors, and those estimates are tallied into per-minute vote histograms.
Because the window advances one minute at a time, a real event collects
hundreds of coincident votes while spurious detections scatter.  Stage two
extracts high-vote peaks from each histogram and pairs start peaks with end
peaks to form candidate events.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import MlpModel
from .timeseries import (
    SOURCE_ML,
    WINDOW_MINUTES,
    NormalizationSpec,
    SeriesTooShort,
    SlowdownEvent,
    SpeedSeries,
)

_CHUNK_ROWS = 4096


@dataclass(frozen=True)
class DetectorConfig:
    """Stage-one and stage-two thresholds.

    ``min_votes`` (60) is about 11% of the 541 votes a one-hour event can
    collect, loose enough to keep real events and strict enough to drop
    scattered noise.
    """

    stride: int = 1
    detection_threshold: float = 0.5
    vote_bucket: int = 15
    min_votes: int = 60
    min_duration: int = 60
    max_duration: int = 360

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0.0 < self.detection_threshold < 1.0:
            raise ValueError("detection_threshold must be in (0, 1)")
        if self.vote_bucket < 1:
            raise ValueError("vote_bucket must be >= 1")
        if self.min_votes < 1:
            raise ValueError("min_votes must be >= 1")
        if not 0 < self.min_duration < self.max_duration:
            raise ValueError("need 0 < min_duration < max_duration")


@dataclass(frozen=True)
class DetectorModels:
    """The classifier plus the start/end regressors used by one detector."""

    detection: MlpModel
    start: MlpModel
    end: MlpModel


@dataclass
class VoteHistogram:
    """Per-minute counts of predicted start/end times for one segment.

    Index ``i`` corresponds to absolute minute ``t0 + i``; the arrays span
    one minute past the series end because an end estimate may land there.
    """

    segment_id: str
    t0: int
    start_votes: np.ndarray
    end_votes: np.ndarray


def slide_and_classify(
    series: SpeedSeries,
    det: MlpModel,
    start_nn: MlpModel,
    end_nn: MlpModel,
    cfg: DetectorConfig,
    spec: NormalizationSpec,
) -> VoteHistogram:
    """Stage one: classify every window and tally boundary votes.

    A window starting at offset ``s`` whose slowdown probability reaches the
    detection threshold votes for a start at ``round(s + 600 * f_start)`` and
    an end at ``round(s + 600 * f_end)``; windows whose estimates are not
    ordered are discarded whole.
    """
    n = len(series)
    if n < WINDOW_MINUTES:
        raise SeriesTooShort(f"{series.segment_id}: {n} < {WINDOW_MINUTES} samples")
    start_votes = np.zeros(n + 1, dtype=np.int64)
    end_votes = np.zeros(n + 1, dtype=np.int64)
    normalized = spec.normalize(series.speeds)
    views = sliding_window_view(normalized, WINDOW_MINUTES)[:: cfg.stride]
    offsets = np.arange(0, n - WINDOW_MINUTES + 1, cfg.stride)
    for lo in range(0, len(offsets), _CHUNK_ROWS):
        chunk = views[lo : lo + _CHUNK_ROWS]
        offs = offsets[lo : lo + _CHUNK_ROWS]
        probs = det.predict_proba(chunk)
        hit = probs[:, 1] >= cfg.detection_threshold
        if not hit.any():
            continue
        hit_windows = chunk[hit]
        hit_offs = offs[hit]
        f_start = start_nn.predict_fraction(hit_windows)
        f_end = end_nn.predict_fraction(hit_windows)
        s_idx = np.rint(hit_offs + WINDOW_MINUTES * f_start).astype(np.int64)
        e_idx = np.rint(hit_offs + WINDOW_MINUTES * f_end).astype(np.int64)
        # sigmoid range keeps votes inside the originating window; assert it
        assert (s_idx >= hit_offs).all() and (s_idx <= hit_offs + WINDOW_MINUTES).all()
        assert (e_idx >= hit_offs).all() and (e_idx <= hit_offs + WINDOW_MINUTES).all()
        ordered = e_idx > s_idx
        np.add.at(start_votes, s_idx[ordered], 1)
        np.add.at(end_votes, e_idx[ordered], 1)
    return VoteHistogram(series.segment_id, series.t0, start_votes, end_votes)


def extract_peaks(votes: np.ndarray, cfg: DetectorConfig) -> list[tuple[int, int]]:
    """Stage two, half one: high-vote peaks as ``(minute_offset, votes)``.

    Votes are summed over sliding buckets of ``vote_bucket`` minutes; buckets
    reaching ``min_votes`` are selected greedily by total with non-maximum
    suppression, and each peak sits at the vote-weighted mean minute of its
    bucket.
    """
    votes = np.asarray(votes, dtype=np.int64)
    if len(votes) < cfg.vote_bucket or not votes.any():
        return []
    kernel = np.ones(cfg.vote_bucket, dtype=np.int64)
    sums = np.convolve(votes, kernel, mode="valid")
    candidates = np.flatnonzero(sums >= cfg.min_votes)
    if candidates.size == 0:
        return []
    radius = max(cfg.vote_bucket, 30)
    order = candidates[np.lexsort((candidates, -sums[candidates]))]
    minutes = np.arange(len(votes))
    taken: list[int] = []
    peaks: list[tuple[int, int]] = []
    for t in order:
        if any(abs(int(t) - s) < radius for s in taken):
            continue
        taken.append(int(t))
        window = slice(t, t + cfg.vote_bucket)
        weight = votes[window].sum()
        pos = int(np.rint((minutes[window] * votes[window]).sum() / weight))
        peaks.append((pos, int(sums[t])))
    peaks.sort()
    return peaks


def pair_events(
    starts: Sequence[tuple[int, int]],
    ends: Sequence[tuple[int, int]],
    cfg: DetectorConfig,
    segment_id: str = "",
) -> list[SlowdownEvent]:
    """Stage two, half two: pair start and end peaks into candidate events.

    Start peaks are consumed in descending vote order; each takes the nearest
    free end peak at an admissible duration.  Overlapping candidates keep the
    higher combined vote count.  Peak minutes must already be absolute.
    """
    by_votes = sorted(starts, key=lambda p: (-p[1], p[0]))
    free = list(ends)
    raw: list[tuple[int, int, int]] = []  # (start, end, combined votes)
    for s_min, s_votes in by_votes:
        best = None
        for e_min, e_votes in free:
            span = e_min - s_min
            if cfg.min_duration <= span <= cfg.max_duration:
                if best is None or span < best[0] - s_min:
                    best = (e_min, e_votes)
        if best is None:
            continue
        free.remove(best)
        raw.append((s_min, best[0], s_votes + best[1]))
    kept: list[tuple[int, int, int]] = []
    for s_min, e_min, votes in sorted(raw, key=lambda r: (-r[2], r[0])):
        if all(e_min <= ks or ke <= s_min for ks, ke, _ in kept):
            kept.append((s_min, e_min, votes))
    kept.sort()
    return [
        SlowdownEvent(segment_id, s_min, e_min, SOURCE_ML) for s_min, e_min, _ in kept
    ]


def detect_series(
    series: SpeedSeries,
    models: DetectorModels,
    cfg: DetectorConfig,
    spec: NormalizationSpec,
) -> tuple[list[SlowdownEvent], VoteHistogram]:
    """Full two-stage detection on one gap-filled series."""
    hist = slide_and_classify(
        series, models.detection, models.start, models.end, cfg, spec
    )
    start_peaks = [(series.t0 + m, v) for m, v in extract_peaks(hist.start_votes, cfg)]
    end_peaks = [(series.t0 + m, v) for m, v in extract_peaks(hist.end_votes, cfg)]
    events = pair_events(start_peaks, end_peaks, cfg, series.segment_id)
    return events, hist


def detect(
    series_list: Iterable[SpeedSeries],
    models: DetectorModels,
    cfg: DetectorConfig,
    spec: NormalizationSpec,
    threads: int = 1,
) -> tuple[list[SlowdownEvent], list[VoteHistogram]]:
    """Detect over many segments; output order follows the input order."""
    series_list = list(series_list)
    if threads > 1 and len(series_list) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda s: detect_series(s, models, cfg, spec), series_list)
            )
    else:
        results = [detect_series(s, models, cfg, spec) for s in series_list]
    events: list[SlowdownEvent] = []
    histograms: list[VoteHistogram] = []
    for evs, hist in results:
        events.extend(evs)
        histograms.append(hist)
    return events, histograms


def write_vote_diagnostics(
    histograms: Iterable[VoteHistogram], path: str | Path
) -> None:
    """Per-minute vote counts in CSV form, one row per timeline minute."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["segment_id", "minute", "start_votes", "end_votes"])
        for hist in histograms:
            for i in range(len(hist.start_votes)):
                writer.writerow(
                    [
                        hist.segment_id,
                        hist.t0 + i,
                        int(hist.start_votes[i]),
                        int(hist.end_votes[i]),
                    ]
                )
