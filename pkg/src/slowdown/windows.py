"""Sliding-window dataset construction.

A ten-hour window slid one minute at a time over each segment turns every
labeled slowdown into hundreds of training examples.  A window is positive
("sd included") only when at least one event lies completely inside it, and
its regression targets come from the earliest such event, expressed as
fractions of the window length.  Windows that only clip an event stay
negative.
"""

from __future__ import annotations

import struct
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .timeseries import (
    MIN_EVENT_MINUTES,
    WINDOW_MINUTES,
    LabeledCorpus,
    NormalizationSpec,
    SlowdownEvent,
)

_CACHE_MAGIC = b"SDWC"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIId Q")  # magic, version, window, v_max, count


class ClassMissing(ValueError):
    """Balancing requires at least one sample of each class."""


class TooFewSamples(ValueError):
    """Not enough samples to produce a meaningful train/validation split."""


class BadCacheFile(ValueError):
    """Dataset cache file is corrupt or has an unsupported version."""


@dataclass(frozen=True)
class WindowSample:
    """One normalized 600-minute window with its label and targets.

    ``features`` may be a read-only view into the segment's normalized trace.
    ``start_target``/``end_target`` are minutes-from-window-start divided by
    the window length; they are present exactly when the window is positive.
    """

    features: np.ndarray
    sd_included: bool
    start_target: float | None
    end_target: float | None
    segment_id: str
    window_start: int

    def __post_init__(self) -> None:
        if self.features.shape != (WINDOW_MINUTES,):
            raise ValueError(f"features must have shape ({WINDOW_MINUTES},)")
        has_targets = self.start_target is not None and self.end_target is not None
        if self.sd_included != has_targets:
            raise ValueError("targets must be present iff the window is sd-included")
        if has_targets:
            s, e = self.start_target, self.end_target
            if not (0.0 <= s < e <= 1.0):
                raise ValueError(f"bad targets ({s}, {e})")
            if e - s < MIN_EVENT_MINUTES / WINDOW_MINUTES - 1e-12:
                raise ValueError(f"target span {e - s} below minimum event duration")


@dataclass(frozen=True)
class DatasetSplit:
    """Stratified train/validation partition of window samples."""

    train: tuple[WindowSample, ...]
    val: tuple[WindowSample, ...]
    split_seed: int


def label_window(
    window_start: int, events: Sequence[SlowdownEvent]
) -> tuple[bool, float | None, float | None]:
    """Label the window ``[window_start, window_start + 600)``.

    Positive iff some event is completely captured (start and end inside the
    window); targets come from the earliest such event.  ``events`` must be
    sorted by start and pairwise disjoint.
    """
    window_end = window_start + WINDOW_MINUTES
    starts = [e.start_min for e in events]
    for i in range(bisect_left(starts, window_start), len(events)):
        ev = events[i]
        if ev.start_min > window_end - MIN_EVENT_MINUTES:
            break
        if ev.end_min <= window_end:
            return (
                True,
                (ev.start_min - window_start) / WINDOW_MINUTES,
                (ev.end_min - window_start) / WINDOW_MINUTES,
            )
    return (False, None, None)


def extract_training_windows(
    corpus: LabeledCorpus, spec: NormalizationSpec
) -> list[WindowSample]:
    """All admissible windows of every segment, stepped one minute apart.

    The corpus must already be validated and gap-filled.  Per segment the
    sample count is ``len(series) - 600 + 1``; features are read-only views
    into one normalized array per segment.
    """
    samples: list[WindowSample] = []
    for series in corpus.series:
        normalized = spec.normalize(series.speeds)
        normalized.setflags(write=False)
        events = corpus.events_for(series.segment_id)
        starts = [e.start_min for e in events]
        n_windows = len(series) - WINDOW_MINUTES + 1
        for i in range(n_windows):
            ws = series.t0 + i
            window_end = ws + WINDOW_MINUTES
            sd, st, et = False, None, None
            for j in range(bisect_left(starts, ws), len(events)):
                ev = events[j]
                if ev.start_min > window_end - MIN_EVENT_MINUTES:
                    break
                if ev.end_min <= window_end:
                    sd = True
                    st = (ev.start_min - ws) / WINDOW_MINUTES
                    et = (ev.end_min - ws) / WINDOW_MINUTES
                    break
            samples.append(
                WindowSample(
                    features=normalized[i : i + WINDOW_MINUTES],
                    sd_included=sd,
                    start_target=st,
                    end_target=et,
                    segment_id=series.segment_id,
                    window_start=ws,
                )
            )
    return samples


def balance_dataset(
    samples: Sequence[WindowSample], ratio_tolerance: float = 0.05, seed: int = 0
) -> list[WindowSample]:
    """Subsample negatives to roughly one per positive.

    Every positive sample is kept.  When negatives outnumber positives by
    more than ``ratio_tolerance``, a seeded uniform subsample of exactly one
    negative per positive is retained; input order is preserved.
    """
    pos_idx = [i for i, s in enumerate(samples) if s.sd_included]
    neg_idx = [i for i, s in enumerate(samples) if not s.sd_included]
    if not pos_idx or not neg_idx:
        raise ClassMissing("balance_dataset needs both classes present")
    if len(neg_idx) <= len(pos_idx) * (1.0 + ratio_tolerance):
        return list(samples)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(neg_idx), size=len(pos_idx), replace=False)
    keep = set(pos_idx)
    keep.update(neg_idx[i] for i in chosen)
    return [s for i, s in enumerate(samples) if i in keep]


def split_train_val(
    samples: Sequence[WindowSample], fraction: float = 0.8, seed: int = 0
) -> DatasetSplit:
    """Seeded stratified split keeping ``fraction`` of samples for training."""
    n = len(samples)
    if n < 5:
        raise TooFewSamples(f"need at least 5 samples, got {n}")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    pos = [i for i, s in enumerate(samples) if s.sd_included]
    neg = [i for i, s in enumerate(samples) if not s.sd_included]
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    n_train = int(round(fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    n_pos_train = min(int(round(fraction * len(pos))), len(pos))
    n_neg_train = n_train - n_pos_train
    if n_neg_train > len(neg):  # rebalance when one class is tiny
        n_pos_train += n_neg_train - len(neg)
        n_neg_train = len(neg)
    elif n_neg_train < 0:
        n_pos_train += n_neg_train
        n_neg_train = 0
    train_idx = pos[:n_pos_train] + neg[:n_neg_train]
    val_idx = pos[n_pos_train:] + neg[n_neg_train:]
    train_idx = [train_idx[i] for i in rng.permutation(len(train_idx))]
    val_idx = [val_idx[i] for i in rng.permutation(len(val_idx))]
    return DatasetSplit(
        train=tuple(samples[i] for i in train_idx),
        val=tuple(samples[i] for i in val_idx),
        split_seed=seed,
    )


def save_window_cache(
    samples: Sequence[WindowSample], spec: NormalizationSpec, path: str | Path
) -> None:
    """Write features and class labels to the binary dataset cache."""
    feats = np.stack([s.features for s in samples]).astype("<f4") if samples else (
        np.zeros((0, WINDOW_MINUTES), dtype="<f4")
    )
    labels = np.array([1 if s.sd_included else 0 for s in samples], dtype=np.uint8)
    with Path(path).open("wb") as fh:
        fh.write(
            _CACHE_HEADER.pack(
                _CACHE_MAGIC, _CACHE_VERSION, WINDOW_MINUTES, spec.v_max, len(samples)
            )
        )
        fh.write(feats.tobytes())
        fh.write(labels.tobytes())


def load_window_cache(path: str | Path) -> tuple[np.ndarray, np.ndarray, float]:
    """Read a dataset cache; returns ``(features, labels, v_max)``.

    Rejects files whose magic, version, or window length disagree with this
    build.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise BadCacheFile(f"{path}: truncated header")
    magic, version, window, v_max, count = _CACHE_HEADER.unpack_from(raw)
    if magic != _CACHE_MAGIC:
        raise BadCacheFile(f"{path}: bad magic {magic!r}")
    if version != _CACHE_VERSION:
        raise BadCacheFile(f"{path}: unsupported cache version {version}")
    if window != WINDOW_MINUTES:
        raise BadCacheFile(f"{path}: window length {window} != {WINDOW_MINUTES}")
    body = raw[_CACHE_HEADER.size :]
    feat_bytes = count * WINDOW_MINUTES * 4
    if len(body) != feat_bytes + count:
        raise BadCacheFile(f"{path}: payload size mismatch")
    feats = np.frombuffer(body[:feat_bytes], dtype="<f4").reshape(count, WINDOW_MINUTES)
    labels = np.frombuffer(body[feat_bytes:], dtype=np.uint8)
    return feats, labels, float(v_max)
