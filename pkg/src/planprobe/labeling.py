"""Backward dynamic-programming supervision for probe targets.

Two recurrences, both running from the end of a span toward its start,
seeded by a boundary bootstrap y_{T+1}:

    milestone:   y_t = max(gamma * y_{t+1}, x_t)     x_t in {0, 1}
    reward sum:  y_t = gamma * y_{t+1} + x_t         x_t any finite scalar

The bootstrap is the prediction made at the frame just past the span
(0 for terminal frames, a probe head's own output at a slice boundary).
Milestone labels stay inside [0, 1] whenever the bootstrap does; a label
of gamma**T then means "the event fires T frames ahead".

Win supervision is the milestone recurrence with gamma = 1: the label is
simply carried back undampened from the winning frame (or the bootstrap).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class EventTrack:
    """Binary per-frame event indicator for one milestone kind."""

    values: np.ndarray
    kind: str = "event"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError(f"event track must be 1-D, got shape {v.shape}")
        if not np.isin(v, (0.0, 1.0)).all():
            raise DomainError(f"event track {self.kind!r} has values outside {{0,1}}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class RewardTrack:
    """Scalar per-frame reward stream for one reward component."""

    values: np.ndarray
    kind: str = "reward"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError(f"reward track must be 1-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise DomainError(f"reward track {self.kind!r} has non-finite values")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class LabelSeries:
    values: np.ndarray
    gamma: float
    bootstrap: float

    def __len__(self) -> int:
        return len(self.values)


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not (0.0 < gamma <= 1.0):
        raise DomainError(f"decay gamma must be in (0, 1], got {gamma}")
    return gamma


def milestone_labels(track: EventTrack, bootstrap: float, gamma: float) -> LabelSeries:
    """Discounted time-to-event labels, backward max recurrence."""
    gamma = _check_gamma(gamma)
    bootstrap = float(bootstrap)
    if not (0.0 <= bootstrap <= 1.0):
        raise DomainError(f"milestone bootstrap must be in [0, 1], got {bootstrap}")
    x = track.values
    y = np.empty_like(x)
    carry = bootstrap
    for t in range(len(x) - 1, -1, -1):
        carry = max(gamma * carry, x[t])
        y[t] = carry
    return LabelSeries(y, gamma, bootstrap)


def reward_labels(track: RewardTrack, bootstrap: float, gamma: float) -> LabelSeries:
    """Discounted future-reward-sum labels, backward sum recurrence."""
    gamma = _check_gamma(gamma)
    bootstrap = float(bootstrap)
    if not np.isfinite(bootstrap):
        raise DomainError("reward bootstrap must be finite")
    x = track.values
    y = np.empty_like(x)
    carry = bootstrap
    for t in range(len(x) - 1, -1, -1):
        carry = gamma * carry + x[t]
        y[t] = carry
    return LabelSeries(y, gamma, bootstrap)


def full_episode_labels(track, gamma: float) -> LabelSeries:
    """Reference labels over a complete episode: one backward pass with
    terminal bootstrap 0. The oracle that sliced computation must match."""
    if isinstance(track, EventTrack):
        return milestone_labels(track, 0.0, gamma)
    if isinstance(track, RewardTrack):
        return reward_labels(track, 0.0, gamma)
    raise DomainError(f"unsupported track type {type(track).__name__}")


def sliced_labels(track, cuts: list[int], gamma: float) -> LabelSeries:
    """Labels computed slice by slice with exact oracle bootstraps.

    cuts are interior boundaries (sorted, unique, within (0, T)). Each
    slice's bootstrap is the oracle label at the first frame of the next
    slice; the last slice bootstraps 0. Composes to the full-episode
    labels exactly; exists as the test-side half of that equivalence.
    """
    full = full_episode_labels(track, gamma)
    T = len(track.values)
    bounds = [0] + sorted(cuts) + [T]
    if len(set(bounds)) != len(bounds) or any(not 0 <= b <= T for b in bounds):
        raise DomainError(f"bad cut points {cuts} for length {T}")
    make = milestone_labels if isinstance(track, EventTrack) else reward_labels
    pieces = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        boot = float(full.values[hi]) if hi < T else 0.0
        sub = type(track)(track.values[lo:hi], track.kind)
        pieces.append(make(sub, boot, gamma).values)
    return LabelSeries(np.concatenate(pieces), gamma, 0.0)
