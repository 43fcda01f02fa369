"""Training and evaluation harness: z-score normalization, chronological
splits, sliding windows, masked-MAE loss, Adam, and MAE/MAPE/RMSE metrics
with the grid-flow filter."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, find_first_nonfinite
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import (ModelConfig, ModelParams, ModelStatics, ParameterStore,
                    build_params, model_forward_batch)
from .rng import split_rng
from .series import TrafficTensor

MAPE_FLOOR = 1.0        # |truth| below this is excluded from MAPE
GRID_FLOW_FLOOR = 10.0  # grid points with true flow below this are dropped
STD_FLOOR = 1e-8


@dataclass
class Normalizer:
    """Per-channel z-score statistics, fit on the training split only.

    NaN observations are ignored while fitting and imputed with the training
    mean (i.e. normalized to 0) when applying. Near-constant channels get a
    unit scale so apply/invert stay exact inverses.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            raise DataError("cannot fit a normalizer on an empty split")
        flat = values.reshape(-1, values.shape[-1])
        if np.isnan(flat).all(axis=0).any():
            raise DataError("a channel has no observed values to fit on")
        mean = np.nanmean(flat, axis=0)
        std = np.nanstd(flat, axis=0)
        std = np.where(std < STD_FLOOR, 1.0, std)
        return cls(mean=mean, std=std)

    def apply(self, values: np.ndarray) -> np.ndarray:
        x = np.where(np.isnan(values), self.mean, values)
        return (x - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass
class SplitSpec:
    """Chronological, contiguous train/val/test fractions."""

    train: float
    val: float
    test: float

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ConfigError("split ratios must be nonnegative")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ConfigError(
                f"split ratios must sum to 1, got {self.train}+{self.val}+{self.test}")

    def boundaries(self, num_steps: int) -> tuple[int, int]:
        t1 = int(np.floor(num_steps * self.train))
        t2 = int(np.floor(num_steps * (self.train + self.val)))
        return t1, t2

    def split(self, series: TrafficTensor
              ) -> tuple[TrafficTensor, TrafficTensor, TrafficTensor]:
        t1, t2 = self.boundaries(series.num_steps)
        return (series.slice_steps(0, t1),
                series.slice_steps(t1, t2 - t1),
                series.slice_steps(t2, series.num_steps - t2))


GRAPH_SPLIT = SplitSpec(0.6, 0.2, 0.2)
GRID_SPLIT = SplitSpec(0.7, 0.1, 0.2)


class Window(NamedTuple):
    """One training example: ``input`` (h,N,C), ``target`` (h',N,C), and the
    offset of the input's first step within its split."""

    input: np.ndarray
    target: np.ndarray
    start_step: int


def make_windows(series: TrafficTensor, input_len: int, horizon: int,
                 stride: int = 1) -> list[Window]:
    """Sliding windows over one split; call per split so none cross a boundary."""
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    t = series.num_steps
    if t < input_len + horizon:
        raise DataError(
            f"split of {t} steps cannot fit input_len={input_len} + "
            f"horizon={horizon}")
    out = []
    for start in range(0, t - input_len - horizon + 1, stride):
        out.append(Window(
            input=series.values[start:start + input_len],
            target=series.values[start + input_len:start + input_len + horizon],
            start_step=start))
    return out


def masked_mae_loss(pred: Tensor, target: np.ndarray,
                    valid_mask: np.ndarray) -> Tensor:
    """Mean absolute error over entries where ``valid_mask`` is 1."""
    if pred.shape != target.shape or pred.shape != valid_mask.shape:
        raise ContractError(
            f"loss shapes differ: pred {pred.shape}, target {target.shape}, "
            f"mask {valid_mask.shape}")
    count = float(valid_mask.sum())
    if count == 0:
        warnings.warn("masked_mae_loss saw an all-invalid batch; loss is 0",
                      stacklevel=2)
        return Tensor(0.0)
    diff = ad.absval(pred - Tensor(np.where(valid_mask > 0, target, 0.0)))
    return (diff * Tensor(valid_mask)).sum() * (1.0 / count)


@dataclass
class AdamState:
    """First/second-moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def init(cls, store: ParameterStore) -> "AdamState":
        return cls(m={n: np.zeros_like(p.data) for n, p in store.trainable()},
                   v={n: np.zeros_like(p.data) for n, p in store.trainable()})

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{n}": a for n, a in self.m.items()}
        out.update({f"adam.v.{n}": a for n, a in self.v.items()})
        out["adam.t"] = np.array([float(self.t)])
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        m = {n[len("adam.m."):]: a for n, a in arrays.items() if n.startswith("adam.m.")}
        v = {n[len("adam.v."):]: a for n, a in arrays.items() if n.startswith("adam.v.")}
        t = int(arrays["adam.t"][0]) if "adam.t" in arrays else 0
        return cls(m=m, v=v, t=t)


def adam_step(store: ParameterStore, state: AdamState,
              grads: dict[str, np.ndarray] | None = None, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over the trainable parameters.

    Gradients default to what ``backward`` accumulated; a missing gradient
    counts as zero.
    """
    state.t += 1
    for name, p in store.trainable():
        if grads is not None:
            g = grads.get(name)
        else:
            g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ContractError(
                f"gradient for {name!r} has shape {g.shape}, "
                f"parameter has {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** state.t)
        v_hat = v / (1.0 - beta2 ** state.t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class MetricReport:
    mae: float
    mape: float  # percent
    rmse: float
    count: int


def evaluate(preds: np.ndarray, targets: np.ndarray,
             mode: str = "graph") -> MetricReport:
    """MAE / MAPE / RMSE on denormalized values.

    Missing targets (NaN) never contribute. Graph mode keeps every observed
    point but excludes |truth| < 1 from MAPE. Grid mode drops points with
    true flow below 10 entirely and averages the per-channel (inflow /
    outflow) metrics.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ContractError(
            f"preds {preds.shape} and targets {targets.shape} differ")
    if mode not in ("graph", "grid"):
        raise ConfigError(f"mode must be graph or grid, got {mode!r}")

    def base_metrics(p, y, keep):
        if keep.sum() == 0:
            raise DataError("no contributing points for metric computation")
        err = p[keep] - y[keep]
        mae = float(np.abs(err).mean())
        rmse = float(np.sqrt((err ** 2).mean()))
        mape_keep = keep & (np.abs(y) >= MAPE_FLOOR)
        if mape_keep.sum() == 0:
            mape = 0.0
        else:
            mape = float((np.abs(p[mape_keep] - y[mape_keep])
                          / np.abs(y[mape_keep])).mean() * 100.0)
        return mae, mape, rmse, int(keep.sum())

    if mode == "graph":
        keep = np.isfinite(targets)
        mae, mape, rmse, count = base_metrics(preds, targets, keep)
        return MetricReport(mae=mae, mape=mape, rmse=rmse, count=count)

    flat_p = preds.reshape(-1, preds.shape[-1])
    flat_y = targets.reshape(-1, targets.shape[-1])
    per_channel = []
    total = 0
    for c in range(flat_y.shape[-1]):
        keep = np.isfinite(flat_y[:, c]) & (flat_y[:, c] >= GRID_FLOW_FLOOR)
        mae, mape, rmse, count = base_metrics(flat_p[:, c], flat_y[:, c], keep)
        per_channel.append((mae, mape, rmse))
        total += count
    means = np.mean(per_channel, axis=0)
    return MetricReport(mae=float(means[0]), mape=float(means[1]),
                        rmse=float(means[2]), count=total)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Desk-scale defaults; ``paper_scale`` restores the published settings."""

    batch_size: int = 8
    epochs: int = 30
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    max_steps: int | None = None
    mode: str | None = None        # graph | grid; default from network layout
    split: SplitSpec | None = None

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        return cls(**{"batch_size": 16, "epochs": 200, **overrides})


@dataclass
class TraceRow:
    epoch: int
    step: int
    train_loss: float
    val_mae: float | None = None
    val_mape: float | None = None
    val_rmse: float | None = None


@dataclass
class TrainResult:
    store: ParameterStore
    params: ModelParams
    best_values: dict[str, np.ndarray]
    best_val_mae: float
    adam: AdamState
    normalizer: Normalizer
    statics: ModelStatics
    trace: list[TraceRow]
    test_report: MetricReport
    mode: str
    steps_done: int


def _window_arrays(windows: list[Window], series: TrafficTensor,
                   base_step: int = 0):
    """Stack windows plus their calendar indices (computed from the split clock)."""
    from .embedding import temporal_index_arrays
    x = np.stack([w.input for w in windows])
    y = np.stack([w.target for w in windows])
    h = x.shape[1]
    weeks, days = [], []
    full_week, full_day = temporal_index_arrays(
        series.start_timestamp, series.num_steps, series.interval_minutes)
    for w in windows:
        s = base_step + w.start_step
        weeks.append(full_week[s:s + h])
        days.append(full_day[s:s + h])
    return x, y, np.stack(weeks), np.stack(days)


def predict_windows(x: np.ndarray, week: np.ndarray, day: np.ndarray,
                    statics: ModelStatics, cfg: ModelConfig,
                    params: ModelParams, batch_size: int = 64) -> np.ndarray:
    """Forward in inference chunks; returns normalized predictions."""
    outs = []
    for lo in range(0, x.shape[0], batch_size):
        hi = lo + batch_size
        outs.append(model_forward_batch(
            x[lo:hi], week[lo:hi], day[lo:hi], statics, cfg, params).data)
    return np.concatenate(outs, axis=0)


def last_value_baseline(x: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat each window's final observation across the horizon."""
    return np.repeat(x[:, -1:], horizon, axis=1)


def train_loop(net, series: TrafficTensor, cfg: ModelConfig,
               tcfg: TrainConfig | None = None) -> TrainResult:
    """Seeded training with per-epoch validation and best-checkpoint tracking.

    The series is raw (NaNs allowed); splitting, normalization, and mask
    construction happen here. Aborts with diagnostics if the loss goes
    non-finite.
    """
    tcfg = tcfg or TrainConfig()
    mode = tcfg.mode or ("grid" if net.layout == "grid" else "graph")
    split = tcfg.split or (GRID_SPLIT if mode == "grid" else GRAPH_SPLIT)
    train_s, val_s, test_s = split.split(series)

    norm = Normalizer.fit(train_s.values)
    statics = ModelStatics.build(net, train_s, cfg)

    def norm_series(s):
        return TrafficTensor(values=norm.apply(s.values),
                             interval_minutes=s.interval_minutes,
                             start_timestamp=s.start_timestamp)

    t1, t2 = split.boundaries(series.num_steps)
    train_w = make_windows(norm_series(train_s), cfg.input_len, cfg.horizon)
    val_w = make_windows(norm_series(val_s), cfg.input_len, cfg.horizon)
    test_w = make_windows(norm_series(test_s), cfg.input_len, cfg.horizon)
    raw_val = make_windows(val_s, cfg.input_len, cfg.horizon)
    raw_test = make_windows(test_s, cfg.input_len, cfg.horizon)

    x_tr, y_tr, wk_tr, dy_tr = _window_arrays(train_w, series, 0)
    x_va, _, wk_va, dy_va = _window_arrays(val_w, series, t1)
    x_te, _, wk_te, dy_te = _window_arrays(test_w, series, t2)
    y_va_raw = np.stack([w.target for w in raw_val])
    y_te_raw = np.stack([w.target for w in raw_test])
    # Loss masks come from the raw targets: NaN means unobserved.
    m_tr = np.isfinite(np.stack([w.target for w in
                                 make_windows(train_s, cfg.input_len, cfg.horizon)])
                       ).astype(np.float64)

    init_rng, shuffle_rng = split_rng(cfg.seed, 2)
    store, params = build_params(cfg, series.num_channels, init_rng)
    adam = AdamState.init(store)

    trace: list[TraceRow] = []
    best_values = store.values_dict()
    best_val = np.inf
    stagnant = 0
    step = 0
    done = False

    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(len(train_w))
        for lo in range(0, len(order), tcfg.batch_size):
            sel = order[lo:lo + tcfg.batch_size]
            pred = model_forward_batch(x_tr[sel], wk_tr[sel], dy_tr[sel],
                                       statics, cfg, params)
            loss = masked_mae_loss(pred, y_tr[sel], m_tr[sel])
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                culprit = find_first_nonfinite(loss) or "unknown tensor"
                raise NumericError(
                    f"non-finite loss at step {step}; first bad tensor: {culprit}")
            store.zero_grad()
            backward(loss)
            adam_step(store, adam, lr=tcfg.lr, beta1=tcfg.beta1,
                      beta2=tcfg.beta2, eps=tcfg.adam_eps)
            step += 1
            trace.append(TraceRow(epoch=epoch, step=step, train_loss=loss_val))
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                done = True
                break

        val_pred = norm.invert(predict_windows(x_va, wk_va, dy_va, statics,
                                               cfg, params))
        report = evaluate(val_pred, y_va_raw, mode)
        trace.append(TraceRow(epoch=epoch, step=step,
                              train_loss=trace[-1].train_loss,
                              val_mae=report.mae, val_mape=report.mape,
                              val_rmse=report.rmse))
        if report.mae < best_val:
            best_val = report.mae
            best_values = store.values_dict()
            stagnant = 0
        else:
            stagnant += 1
        if done or stagnant > tcfg.patience:
            break

    # Test metrics come from the best validation checkpoint.
    final_values = store.values_dict()
    store.load_values(best_values)
    test_pred = norm.invert(predict_windows(x_te, wk_te, dy_te, statics,
                                            cfg, params))
    test_report = evaluate(test_pred, y_te_raw, mode)
    store.load_values(final_values)

    return TrainResult(store=store, params=params, best_values=best_values,
                       best_val_mae=float(best_val), adam=adam,
                       normalizer=norm, statics=statics, trace=trace,
                       test_report=test_report, mode=mode, steps_done=step)


def trace_csv_lines(trace: list[TraceRow]) -> list[str]:
    lines = ["epoch,step,train_loss,val_mae,val_mape,val_rmse"]
    for r in trace:
        tail = (f"{r.val_mae!r},{r.val_mape!r},{r.val_rmse!r}"
                if r.val_mae is not None else ",,")
        lines.append(f"{r.epoch},{r.step},{r.train_loss!r},{tail}")
    return lines
