"""Rectified attention heads.

The core block rectifies scaled dot-product scores with ReLU (masked scores
stay exactly zero, so the weight matrix is genuinely sparse), normalizes the
weighted values with a gained RMS statistic, and adds a 3x3 convolution of
the value matrix to re-inject local structure. Three flavors share it:

* spatial: per time-slice over nodes, geographically masked;
* temporal: per node-slice over time, unmasked;
* delay-aware: per time-slice with keys enriched by a gated mean of the
  recent past, semantically masked.

A softmax path is kept solely for the ablation that swaps rectification out.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

EPS_DEFAULT = 1e-8


@dataclass
class AttentionHeadParams:
    """Projections and extras for one head.

    ``w_q/w_k/w_v`` map the head input to the per-head width d0; ``g`` is the
    RMS-norm gain; ``encov_kernel`` is the head's 3x3 value-convolution kernel
    (shape (1,1,3,3)); ``delay_gate`` exists only on delay-aware heads.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    g: Tensor
    encov_kernel: Tensor | None = None
    delay_gate: Tensor | None = None


@dataclass
class DelayConfig:
    """Look-back window (in steps) feeding the delay-aware keys."""

    tau: int = 3

    def __post_init__(self):
        if self.tau < 0:
            raise ContractError(f"tau must be >= 0, got {self.tau}")


def project_qkv(x: Tensor, p: AttentionHeadParams) -> tuple[Tensor, Tensor, Tensor]:
    """Query/key/value projections of one slice (L x d_in -> L x d0 each)."""
    return ad.matmul(x, p.w_q), ad.matmul(x, p.w_k), ad.matmul(x, p.w_v)


def scaled_scores(q: Tensor, k: Tensor, d0: int | None = None) -> Tensor:
    """Score matrix Q K^T / sqrt(d0)."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"score inner dims differ: {q.shape} vs {k.shape}")
    if d0 is None:
        d0 = q.shape[-1]
    return ad.matmul(q, ad.transpose(k, (1, 0))) * (1.0 / np.sqrt(d0))


def vanilla_attention(q: Tensor, k: Tensor, v: Tensor,
                      mask: np.ndarray | None = None) -> Tensor:
    """Softmax attention (the ablation baseline).

    Masked score cells are driven to -inf before the softmax so they carry
    exactly zero weight; a fully masked row has no distribution to offer and
    comes back as a zero row (with a warning).
    """
    a = scaled_scores(q, k)
    if mask is None:
        probs = ad.softmax_rows(a)
    else:
        if np.broadcast_shapes(mask.shape, a.shape) != a.shape:
            raise DimensionError(
                f"mask shape {mask.shape} does not broadcast to scores {a.shape}")
        if not (np.asarray(mask) > 0).any(axis=-1).all():
            warnings.warn("fully masked attention row; emitting a zero row",
                          stacklevel=2)
        probs = ad.masked_softmax_rows(a, mask)
    return ad.matmul(probs, v)


def relsa(a: Tensor, v: Tensor, mask: np.ndarray | None,
          g: Tensor, eps: float = EPS_DEFAULT) -> Tensor:
    """Rectified linear self-attention: RMS-normalized ReLU(A o M) V.

    Rows whose rectified masked scores are all zero stay exactly zero in the
    output (the eps inside the RMS guards the division).
    """
    weights = ad.relu(a if mask is None else a * Tensor(mask))
    return ad.rms_norm(_weights_apply(weights, v), g, eps)


def _weights_apply(weights: Tensor, v: Tensor) -> Tensor:
    return ad.bmm(weights, v) if weights.data.ndim == 3 else ad.matmul(weights, v)


def encov(v: Tensor, kernel: Tensor) -> Tensor:
    """3x3 same-shape convolution of the value matrix viewed as one image."""
    L, d0 = v.shape
    out = ad.conv2d(ad.reshape(v, (1, L, d0)), kernel, padding=1)
    return ad.reshape(out, (L, d0))


def _encov_batch(v3: Tensor, kernel: Tensor) -> Tensor:
    b, L, d0 = v3.shape
    out = ad.conv2d(ad.reshape(v3, (b, 1, L, d0)), kernel, padding=1)
    return ad.reshape(out, (b, L, d0))


def ressa_forward(x_t: Tensor, p: AttentionHeadParams, m_geo: np.ndarray,
                  eps: float = EPS_DEFAULT) -> Tensor:
    """Spatial head on one time-slice (N x d_in): EnCov(V) + geo-masked ReLSA."""
    q, k, v = project_qkv(x_t, p)
    a = scaled_scores(q, k)
    return encov(v, p.encov_kernel) + relsa(a, v, m_geo, p.g, eps)


def retsa_forward(x_n: Tensor, p: AttentionHeadParams,
                  eps: float = EPS_DEFAULT) -> Tensor:
    """Temporal head on one node-slice (T x d_in); same block, no mask."""
    q, k, v = project_qkv(x_n, p)
    a = scaled_scores(q, k)
    return encov(v, p.encov_kernel) + relsa(a, v, None, p.g, eps)


def delay_aware_keys(x: Tensor, p: AttentionHeadParams, cfg: DelayConfig) -> Tensor:
    """Keys enriched with recent history, one matrix per time step.

    K_hat_t = (x_t + sigmoid(gate) * mean(x_{t-tau .. t-1})) W_K, with the
    mean taken over whatever history exists (none at the first step).
    """
    t, n, d = x.shape
    lag = ad.lagged_mean(x, cfg.tau, axis=0)
    gate = ad.sigmoid(p.delay_gate)
    enriched = x + gate * lag
    return ad.reshape(ad.matmul(ad.reshape(enriched, (t * n, d)), p.w_k),
                      (t, n, p.w_k.shape[1]))


def redasa_forward(x: Tensor, t: int, p: AttentionHeadParams,
                   m_sem: np.ndarray, cfg: DelayConfig,
                   eps: float = EPS_DEFAULT) -> Tensor:
    """Delay-aware head at time-slice ``t`` of a (T, N, d) window.

    Scores come from the delay-enriched keys; the rectified path is masked
    by the semantic similarity matrix.
    """
    x_t = x[t]
    q = ad.matmul(x_t, p.w_q)
    v = ad.matmul(x_t, p.w_v)
    k_hat = delay_aware_keys(x, p, cfg)[t]
    a_hat = scaled_scores(q, k_hat)
    return encov(v, p.encov_kernel) + relsa(a_hat, v, m_sem, p.g, eps)


# ---------------------------------------------------------------------------
# batched paths used by the encoder (same math over stacked slices)
# ---------------------------------------------------------------------------

def _project_flat(x4: Tensor, w: Tensor) -> Tensor:
    b, t, n, d = x4.shape
    return ad.reshape(ad.matmul(ad.reshape(x4, (b * t * n, d)), w),
                      (b * t, n, w.shape[1]))


def _rectified_block(q3: Tensor, k3: Tensor, v3: Tensor,
                     head: AttentionHeadParams, mask: np.ndarray | None,
                     eps: float, use_softmax: bool, use_encov: bool,
                     capture: list | None) -> Tensor:
    d0 = q3.shape[-1]
    scores = ad.bmm(q3, ad.transpose(k3, (0, 2, 1))) * (1.0 / np.sqrt(d0))
    if use_softmax:
        weights = (ad.softmax_rows(scores) if mask is None
                   else ad.masked_softmax_rows(scores, mask))
    else:
        weights = ad.relu(scores if mask is None else scores * Tensor(mask))
    if capture is not None:
        capture.append(weights.data.mean(axis=0))
    attended = ad.bmm(weights, v3)
    if not use_softmax:
        attended = ad.rms_norm(attended, head.g, eps)
    if use_encov:
        attended = _encov_batch(v3, head.encov_kernel) + attended
    return attended


def spatial_head_batch(x4: Tensor, head: AttentionHeadParams,
                       mask: np.ndarray | None, eps: float,
                       use_softmax: bool = False, use_encov: bool = True,
                       capture: list | None = None) -> Tensor:
    """All (batch, time) slices of a spatial head at once: (B,T,N,din) -> (B,T,N,d0)."""
    b, t, n, _ = x4.shape
    q3 = _project_flat(x4, head.w_q)
    k3 = _project_flat(x4, head.w_k)
    v3 = _project_flat(x4, head.w_v)
    out = _rectified_block(q3, k3, v3, head, mask, eps, use_softmax,
                           use_encov, capture)
    return ad.reshape(out, (b, t, n, out.shape[-1]))


def temporal_head_batch(x4: Tensor, head: AttentionHeadParams, eps: float,
                        use_softmax: bool = False, use_encov: bool = True,
                        capture: list | None = None) -> Tensor:
    """All (batch, node) slices of a temporal head: (B,T,N,din) -> (B,T,N,d0)."""
    b, t, n, _ = x4.shape
    xt = ad.transpose(x4, (0, 2, 1, 3))
    out = spatial_head_batch(xt, head, None, eps, use_softmax, use_encov, capture)
    return ad.transpose(out, (0, 2, 1, 3))


def delay_head_batch(x4: Tensor, head: AttentionHeadParams, m_sem: np.ndarray,
                     delay: DelayConfig, eps: float,
                     use_softmax: bool = False, use_encov: bool = True,
                     capture: list | None = None) -> Tensor:
    """Delay-aware heads over all (batch, time) slices."""
    b, t, n, d = x4.shape
    lag = ad.lagged_mean(x4, delay.tau, axis=1)
    enriched = x4 + ad.sigmoid(head.delay_gate) * lag
    q3 = _project_flat(x4, head.w_q)
    k3 = _project_flat(enriched, head.w_k)
    v3 = _project_flat(x4, head.w_v)
    out = _rectified_block(q3, k3, v3, head, m_sem, eps, use_softmax,
                           use_encov, capture)
    return ad.reshape(out, (b, t, n, out.shape[-1]))


def init_head_params(d_in: int, d0: int, rng: np.random.Generator,
                     with_delay_gate: bool = False,
                     encov_zeroed: bool = False) -> AttentionHeadParams:
    """Glorot-uniform projections, unit gain, Glorot 3x3 kernel.

    ``encov_zeroed`` creates the kernel frozen at zero (the no-EnCov
    ablation keeps the parameter slot but never trains or applies it).
    """
    def glorot(fan_in, fan_out, shape=None):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))

    kernel = (np.zeros((1, 1, 3, 3)) if encov_zeroed
              else glorot(9, 9, shape=(1, 1, 3, 3)))
    return AttentionHeadParams(
        w_q=Tensor(glorot(d_in, d0), requires_grad=True),
        w_k=Tensor(glorot(d_in, d0), requires_grad=True),
        w_v=Tensor(glorot(d_in, d0), requires_grad=True),
        g=Tensor(np.ones(d0), requires_grad=True),
        encov_kernel=Tensor(kernel, requires_grad=not encov_zeroed),
        delay_gate=Tensor(np.zeros(1), requires_grad=True) if with_delay_gate else None,
    )
