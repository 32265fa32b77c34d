"""Piecewise-constant current load profiles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CurrentProfile:
    """Segment values (A) held over half-open intervals ``[prev_end, end)``.

    The last entry of ``segment_end_times`` is the horizon.
    """

    segment_values: np.ndarray
    segment_end_times: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.segment_values, dtype=np.float64)
        ends = np.asarray(self.segment_end_times, dtype=np.float64)
        if values.ndim != 1 or ends.ndim != 1 or len(values) != len(ends):
            raise ValueError(
                f"segment arrays must be 1-D and of equal length, got {values.shape} and {ends.shape}"
            )
        if len(values) == 0:
            raise ValueError("profile needs at least one segment")
        if ends[-1] <= 0:
            raise ValueError(f"profile horizon must be positive, got {ends[-1]}")
        if np.any(np.diff(ends) <= 0):
            raise ValueError("segment_end_times must be strictly increasing")
        object.__setattr__(self, "segment_values", values)
        object.__setattr__(self, "segment_end_times", ends)

    @classmethod
    def constant(cls, current: float, horizon: float) -> "CurrentProfile":
        return cls(np.array([current]), np.array([horizon]))

    @classmethod
    def from_samples(cls, samples, period: float) -> "CurrentProfile":
        """Zero-order hold of ``samples``; sample ``j`` covers ``[j*period, (j+1)*period)``.

        The horizon is ``(len(samples) - 1) * period`` so that ``to_samples``
        returns the same number of samples (one period is used for a single sample).
        """
        samples = np.asarray(samples, dtype=np.float64)
        n = len(samples)
        if n == 0:
            raise ValueError("no samples")
        horizon = max(n - 1, 1) * period
        change = np.flatnonzero(np.diff(samples) != 0) + 1
        values = np.concatenate([samples[:1], samples[change]])
        ends = np.concatenate([change * period, [horizon]])
        # a change at the final sample would sit exactly on the horizon
        if len(ends) > 1 and ends[-2] >= horizon:
            values = values[:-1]
            ends = np.concatenate([ends[:-2], [horizon]])
        return cls(values, ends)

    @property
    def horizon(self) -> float:
        return float(self.segment_end_times[-1])

    @property
    def n_transitions(self) -> int:
        return len(self.segment_values) - 1

    def __eq__(self, other):
        if not isinstance(other, CurrentProfile):
            return NotImplemented
        return np.array_equal(self.segment_values, other.segment_values) and np.array_equal(
            self.segment_end_times, other.segment_end_times
        )

    __hash__ = None


@dataclass
class ProfileSamplerConfig:
    i_min: float = 0.5
    i_max: float = 3.0
    n_transitions_min: int = 0
    n_transitions_max: int = 5
    horizon_max: float = 20000.0

    def __post_init__(self):
        if not 0 < self.i_min < self.i_max:
            raise ValueError(f"need 0 < i_min < i_max, got {self.i_min}, {self.i_max}")
        if not 0 <= self.n_transitions_min <= self.n_transitions_max:
            raise ValueError("need 0 <= n_transitions_min <= n_transitions_max")
        if self.horizon_max <= 0:
            raise ValueError("horizon_max must be positive")


def sample_profile(rng: np.random.Generator, cfg: ProfileSamplerConfig) -> CurrentProfile:
    k = int(rng.integers(cfg.n_transitions_min, cfg.n_transitions_max + 1))
    times = np.empty(0)
    while len(times) < k:
        # distinctness: continuous draws collide with probability ~0, redraw if they do
        times = np.unique(rng.uniform(0.0, cfg.horizon_max, size=k))
        times = times[times > 0]
    values = rng.uniform(cfg.i_min, cfg.i_max, size=k + 1)
    return CurrentProfile(values, np.concatenate([np.sort(times), [cfg.horizon_max]]))


def current_at(profile: CurrentProfile, t: float) -> float:
    h = profile.horizon
    if not 0 <= t <= h:
        raise ValueError(f"t={t} outside [0, {h}]")
    idx = int(np.searchsorted(profile.segment_end_times, t, side="right"))
    return float(profile.segment_values[min(idx, len(profile.segment_values) - 1)])


def crop_extend(profile: CurrentProfile, factor: float) -> CurrentProfile:
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    if factor == 1.0:
        return profile
    new_h = factor * profile.horizon
    ends = profile.segment_end_times
    values = profile.segment_values
    if factor > 1:
        return CurrentProfile(values.copy(), np.concatenate([ends[:-1], [new_h]]))
    keep = int(np.searchsorted(ends, new_h, side="left")) + 1
    new_ends = ends[:keep].copy()
    new_ends[-1] = new_h
    return CurrentProfile(values[:keep].copy(), new_ends)


def to_samples(profile: CurrentProfile, period: float) -> np.ndarray:
    if period <= 0:
        raise ValueError("period must be positive")
    n = math.floor(profile.horizon / period + 1e-9) + 1
    t = np.arange(n) * period
    idx = np.searchsorted(profile.segment_end_times, t, side="right")
    idx = np.minimum(idx, len(profile.segment_values) - 1)
    return profile.segment_values[idx]
