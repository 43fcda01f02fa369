"""Road-network graphs: adjacency, normalized Laplacian, spectral embedding
inputs, and the binary geographic / semantic attention masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, NumericError

TRIVIAL_EIGENVALUE_CUTOFF = 1e-8


@dataclass
class RoadNetwork:
    """Node set plus undirected edges; ``layout`` is "graph" or "grid".

    Grid networks take their 4-neighborhood structure from (rows, cols);
    edge costs are kept but the adjacency used by the model is binary.
    """

    node_count: int
    edges: list[tuple[int, int, float]] = field(default_factory=list)
    layout: str = "graph"
    rows: int | None = None
    cols: int | None = None

    def __post_init__(self):
        if self.node_count < 1:
            raise DataError(f"node_count must be >= 1, got {self.node_count}")
        if self.layout not in ("graph", "grid"):
            raise DataError(f"unknown layout {self.layout!r}")
        if self.layout == "grid":
            if not self.rows or not self.cols:
                raise DataError("grid layout needs rows and cols")
            if self.rows * self.cols != self.node_count:
                raise DataError(
                    f"grid {self.rows}x{self.cols} does not match "
                    f"node_count {self.node_count}")
        for s, d, cost in self.edges:
            if cost < 0:
                raise DataError(f"edge ({s},{d}) has negative cost {cost}")


def build_adjacency(net: RoadNetwork) -> np.ndarray:
    """Symmetric binary adjacency with a zero diagonal.

    Graph layout binarizes the edge list; grid layout uses the
    4-neighborhood stencil over (rows, cols). Self-loops are dropped.
    """
    n = net.node_count
    a = np.zeros((n, n))
    if net.layout == "grid":
        for r in range(net.rows):
            for c in range(net.cols):
                i = r * net.cols + c
                if r + 1 < net.rows:
                    j = (r + 1) * net.cols + c
                    a[i, j] = a[j, i] = 1.0
                if c + 1 < net.cols:
                    j = r * net.cols + c + 1
                    a[i, j] = a[j, i] = 1.0
        return a
    for s, d, _cost in net.edges:
        if not (0 <= s < n and 0 <= d < n):
            raise DataError(f"edge ({s},{d}) references a node outside 0..{n - 1}")
        if s == d:
            continue
        a[s, d] = a[d, s] = 1.0
    return a


def normalized_laplacian(a: np.ndarray) -> np.ndarray:
    """Symmetric normalized Laplacian ``I - D^{-1/2} A D^{-1/2}``.

    Degree-zero nodes get a zero inverse-root degree, so their rows and
    columns reduce to the identity row.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"adjacency must be square, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        raise ContractError("adjacency must be symmetric")
    if (a < 0).any():
        raise ContractError("adjacency must be nonnegative")
    deg = a.sum(axis=1)
    dinv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(a.shape[0]) - dinv[:, None] * a * dinv[None, :]


@dataclass
class LaplacianDecomposition:
    """Eigendecomposition of the normalized Laplacian.

    Eigenvalues ascend; eigenvectors sit in the columns of ``vectors`` with
    each column's largest-magnitude component made positive so decompositions
    are reproducible despite the sign ambiguity.
    """

    delta: np.ndarray
    eigenvalues: np.ndarray
    vectors: np.ndarray


def symmetric_eigen(delta: np.ndarray, max_sweeps: int = 100,
                    tol: float = 1e-10) -> LaplacianDecomposition:
    """Cyclic Jacobi eigensolver for a symmetric matrix.

    Rotates away off-diagonal mass sweep by sweep until its Frobenius norm
    drops below ``tol``; raises if that does not happen within
    ``max_sweeps`` sweeps.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 2 or delta.shape[0] != delta.shape[1]:
        raise ContractError(f"matrix must be square, got {delta.shape}")
    if not np.allclose(delta, delta.T, rtol=0.0, atol=1e-12):
        raise ContractError("matrix must be symmetric")
    n = delta.shape[0]
    b = delta.copy()
    u = np.eye(n)

    def offdiag(m):
        od = m - np.diag(np.diag(m))
        return np.sqrt((od ** 2).sum())

    converged = n == 1 or offdiag(b) < tol
    for _ in range(max_sweeps):
        if converged:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = b[p, q]
                if abs(apq) == 0.0:
                    continue
                theta = (b[q, q] - b[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e10:
                    t = 0.5 / theta  # asymptotic small root of t^2 + 2t*theta = 1
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # Rotate columns p,q then rows p,q: B <- J^T B J.
                bp, bq = b[:, p].copy(), b[:, q].copy()
                b[:, p] = c * bp - s * bq
                b[:, q] = s * bp + c * bq
                bp, bq = b[p, :].copy(), b[q, :].copy()
                b[p, :] = c * bp - s * bq
                b[q, :] = s * bp + c * bq
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
        converged = offdiag(b) < tol
    if not converged:
        raise NumericError(
            f"Jacobi sweep did not converge within {max_sweeps} sweeps")

    vals = np.diag(b).copy()
    order = np.argsort(vals, kind="stable")
    vals = vals[order]
    vecs = u[:, order]
    for j in range(n):
        lead = np.argmax(np.abs(vecs[:, j]))
        if vecs[lead, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return LaplacianDecomposition(delta=delta, eigenvalues=vals, vectors=vecs)


def laplacian_embedding(dec: LaplacianDecomposition, k: int) -> np.ndarray:
    """Eigenvectors of the k smallest nontrivial eigenvalues, as columns.

    Trivial directions (eigenvalue below the cutoff; one per connected
    component) are skipped.
    """
    nontrivial = np.nonzero(dec.eigenvalues > TRIVIAL_EIGENVALUE_CUTOFF)[0]
    if k > nontrivial.size:
        raise DataError(
            f"only {nontrivial.size} nontrivial eigenvalues available; "
            f"use k <= {nontrivial.size}")
    return dec.vectors[:, nontrivial[:k]].copy()


def geo_mask(a: np.ndarray, max_hops: int) -> np.ndarray:
    """Binary N x N mask: 1 where BFS hop distance <= max_hops (diag is 1)."""
    if max_hops < 0:
        raise ContractError(f"max_hops must be >= 0, got {max_hops}")
    adj = np.asarray(a) > 0
    reach = np.eye(adj.shape[0], dtype=bool)
    for _ in range(max_hops):
        grown = reach | (reach @ adj)
        if (grown == reach).all():
            break
        reach = grown
    return reach.astype(np.float64)


def sem_mask(history, top_k: int) -> np.ndarray:
    """Binary N x N mask of historically similar nodes.

    Row i marks node i plus the top_k - 1 nodes whose mean daily profiles
    correlate best with node i's (Pearson, ties to the lower index).
    ``history`` is a TrafficTensor covering the training split only.
    """
    if top_k < 1:
        raise ContractError(f"top_k must be >= 1, got {top_k}")
    values = history.values
    spd = history.steps_per_day
    t, n, c = values.shape
    if t < spd:
        raise DataError(
            f"history has {t} steps but one period needs {spd}")

    slots = np.arange(t) % spd
    profiles = np.empty((n, spd * c))
    for node in range(n):
        prof = np.empty((spd, c))
        for slot in range(spd):
            chunk = values[slots == slot, node, :]
            with np.errstate(invalid="ignore"):
                prof[slot] = np.nanmean(chunk, axis=0)
        profiles[node] = np.nan_to_num(prof, nan=0.0).ravel()

    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(profiles)
    corr = np.nan_to_num(corr, nan=-1.0)  # zero-variance profiles rank last

    k = min(top_k, n)
    mask = np.zeros((n, n))
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        ranked = others[np.argsort(-corr[i, others], kind="stable")]
        mask[i, i] = 1.0
        mask[i, ranked[:k - 1]] = 1.0
    return mask


@dataclass
class AttentionMasks:
    """The geographic and semantic node-pair masks used by the attention heads."""

    m_geo: np.ndarray
    m_sem: np.ndarray

    def __post_init__(self):
        for name, m in (("m_geo", self.m_geo), ("m_sem", self.m_sem)):
            if not np.isin(m, (0.0, 1.0)).all():
                raise DataError(f"{name} must be binary")
            if not np.diag(m).all():
                raise DataError(f"{name} must include self-connections")


def build_masks(net: RoadNetwork, history, geo_hops: int, sem_topk: int) -> AttentionMasks:
    a = build_adjacency(net)
    return AttentionMasks(m_geo=geo_mask(a, geo_hops),
                          m_sem=sem_mask(history, sem_topk))
