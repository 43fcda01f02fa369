"""Input embedding: raw-feature projection, spectral node coordinates,
trainable weekly/daily period tables, and sinusoidal positions, broadcast-
summed into one (T, N, d) representation."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .series import TrafficTensor

WEEK_TABLE_ROWS = 7
DAY_TABLE_ROWS = 1440


class TemporalIndex(NamedTuple):
    """1-based calendar indices: Monday=1..Sunday=7 and minute-of-day 1..1440."""

    week_index: int
    day_index: int


@dataclass
class EmbeddingParams:
    """Trainable pieces of the embedding layer.

    ``table_week`` and ``table_day`` are indexed by the 1-based calendar
    convention (row 0 holds index 1).
    """

    w_data: Tensor    # C x d
    w_spe: Tensor     # k x d
    table_week: Tensor  # 7 x d
    table_day: Tensor   # 1440 x d


def temporal_indices(t0: datetime, step: int, interval_minutes: int) -> TemporalIndex:
    """Calendar indices of ``t0 + step * interval``."""
    if interval_minutes < 1 or 1440 % interval_minutes != 0:
        raise ConfigError(
            f"interval_minutes must divide 1440, got {interval_minutes}")
    ts = t0 + timedelta(minutes=step * interval_minutes)
    return TemporalIndex(week_index=ts.weekday() + 1,
                         day_index=ts.hour * 60 + ts.minute + 1)


def temporal_index_arrays(t0: datetime, steps: int,
                          interval_minutes: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``temporal_indices`` for steps 0..steps-1."""
    pairs = [temporal_indices(t0, s, interval_minutes) for s in range(steps)]
    week = np.array([p.week_index for p in pairs], dtype=np.int64)
    day = np.array([p.day_index for p in pairs], dtype=np.int64)
    return week, day


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal position codes for positions 1..length.

    Even feature i carries sin(t / 10000^(2i/d)); odd i carries
    cos(t / 10000^(2(i-1)/d)), so consecutive pairs share a wavelength.
    """
    if d < 2:
        raise ContractError(f"positional encoding needs d >= 2, got {d}")
    t = np.arange(1, length + 1, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)
    exponent = np.where(i % 2 == 0, i, i - 1) / d
    angle = t / np.power(10000.0, exponent)[None, :]
    out = np.empty((length, d))
    out[:, 0::2] = np.sin(angle[:, 0::2])
    out[:, 1::2] = np.cos(angle[:, 1::2])
    return out


def embed(x_raw: TrafficTensor, spe_input: np.ndarray,
          params: EmbeddingParams) -> Tensor:
    """Embedding of one window, shape (T, N, d).

    Sums the projected raw features with the projected spectral coordinates
    (broadcast over time), the week/day table rows, and the positional
    encoding (each broadcast over nodes).
    """
    week, day = temporal_index_arrays(
        x_raw.start_timestamp, x_raw.num_steps, x_raw.interval_minutes)
    out = embed_batch(x_raw.values[None], week[None], day[None], spe_input, params)
    return ad.reshape(out, out.shape[1:])


def embed_batch(x: np.ndarray, week_idx: np.ndarray, day_idx: np.ndarray,
                spe_input: np.ndarray, params: EmbeddingParams) -> Tensor:
    """Batched embedding: (B, T, N, C) values plus per-window calendar indices."""
    b, t, n, c = x.shape
    if params.w_data.shape[0] != c:
        raise DimensionError(
            f"w_data expects {params.w_data.shape[0]} channels, data has {c}")
    if spe_input.shape[0] != n or spe_input.shape[1] != params.w_spe.shape[0]:
        raise DimensionError(
            f"spatial embedding input {spe_input.shape} does not match "
            f"N={n}, k={params.w_spe.shape[0]}")
    d = params.w_data.shape[1]

    data = ad.reshape(
        ad.matmul(ad.reshape(Tensor(x), (b * t * n, c)), params.w_data),
        (b, t, n, d))
    spe = ad.reshape(ad.matmul(Tensor(spe_input), params.w_spe), (1, 1, n, d))
    week = ad.reshape(
        ad.gather_rows(params.table_week, week_idx.ravel() - 1), (b, t, 1, d))
    day = ad.reshape(
        ad.gather_rows(params.table_day, day_idx.ravel() - 1), (b, t, 1, d))
    tpe = Tensor(positional_encoding(t, d)[None, :, None, :])
    return data + spe + week + day + tpe


def init_embedding_params(channels: int, k: int, d: int,
                          rng: np.random.Generator) -> EmbeddingParams:
    """Glorot-uniform projections; period tables uniform in +-1/sqrt(d)."""
    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    lim = 1.0 / np.sqrt(d)
    return EmbeddingParams(
        w_data=Tensor(glorot(channels, d), requires_grad=True),
        w_spe=Tensor(glorot(k, d), requires_grad=True),
        table_week=Tensor(rng.uniform(-lim, lim, size=(WEEK_TABLE_ROWS, d)),
                          requires_grad=True),
        table_day=Tensor(rng.uniform(-lim, lim, size=(DAY_TABLE_ROWS, d)),
                         requires_grad=True),
    )
