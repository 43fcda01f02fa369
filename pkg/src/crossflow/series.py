"""Traffic flow series: a (time x node x channel) tensor with clock metadata."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class TrafficTensor:
    """Flow values over a road network, sampled on a fixed interval.

    ``values`` has shape (T, N, C); missing observations are NaN in raw
    (pre-normalization) form. ``start_timestamp`` is the wall-clock time of
    step 0.
    """

    values: np.ndarray
    interval_minutes: int
    start_timestamp: datetime

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise DataError(
                f"values must be (T,N,C) with positive extents, got {self.values.shape}")
        if self.interval_minutes < 1 or 1440 % self.interval_minutes != 0:
            raise ConfigError(
                f"interval_minutes must divide 1440, got {self.interval_minutes}")

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def num_channels(self) -> int:
        return self.values.shape[2]

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.interval_minutes

    def time_at(self, step: int) -> datetime:
        return self.start_timestamp + timedelta(minutes=step * self.interval_minutes)

    def slice_steps(self, start: int, length: int) -> "TrafficTensor":
        """Contiguous window as a new series whose clock starts at ``start``."""
        if start < 0 or start + length > self.num_steps:
            raise DataError(
                f"slice [{start}, {start + length}) outside 0..{self.num_steps}")
        return TrafficTensor(values=self.values[start:start + length],
                             interval_minutes=self.interval_minutes,
                             start_timestamp=self.time_at(start))
