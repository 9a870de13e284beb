"""Bipartite graph construction, symmetric normalization, and layer propagation.

Users and items share one node space: node u in [0, M) is a user, node M + i is
an item. Embeddings are propagated L times through the degree-normalized
adjacency and averaged across all layer outputs, the raw table included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .numeric import Rng, ShapeError, as_csr, spmm


@dataclass
class BipartiteGraph:
    n_users: int
    n_items: int
    adjacency: sp.csr_matrix   # (M+N) x (M+N), binary
    normalized: sp.csr_matrix  # D^-1/2 A D^-1/2

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items


def build_adjacency(r: sp.csr_matrix) -> sp.csr_matrix:
    """Square block adjacency [[0, R], [R^T, 0]] over user+item nodes."""
    return as_csr(sp.bmat([[None, r], [r.T, None]], format="csr"))


def normalize(a: sp.csr_matrix) -> sp.csr_matrix:
    """Symmetric degree normalization; isolated nodes keep all-zero rows."""
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a.shape}")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    return as_csr(d @ a @ d)


def build_graph(r: sp.csr_matrix) -> BipartiteGraph:
    adj = build_adjacency(r)
    return BipartiteGraph(r.shape[0], r.shape[1], adj, normalize(adj))


def drop_edges(a: sp.csr_matrix, rate: float, rng: Rng) -> sp.csr_matrix:
    """Message dropout on stored values, rescaled by 1/(1-rate).

    The sparsity pattern is preserved (dropped entries become stored zeros),
    so repeated training steps never pay for re-canonicalization.
    """
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = rng.random(a.nnz) >= rate
    out = a.copy()
    out.data = a.data * (keep / (1.0 - rate))
    return out


def propagate(a_norm: sp.csr_matrix, e: np.ndarray, n_layers: int) -> list[np.ndarray]:
    """All propagation stages [E, A E, A^2 E, ...], n_layers + 1 entries."""
    if a_norm.shape[1] != e.shape[0]:
        raise ShapeError(f"node count mismatch: {a_norm.shape} vs embeddings {e.shape}")
    layers = [e]
    h = e
    for _ in range(n_layers):
        h = spmm(a_norm, h)
        layers.append(h)
    return layers


def pool(layers: list[np.ndarray]) -> np.ndarray:
    """Average over propagation stages."""
    return np.mean(layers, axis=0)


def propagate_pool_backward(
    a_used: sp.csr_matrix, grad_pooled: np.ndarray, n_layers: int
) -> np.ndarray:
    """Gradient of pooled output w.r.t. the raw embedding table.

    Given d(loss)/d(pooled), returns d(loss)/dE where
    pooled = mean_{l=0..L} (A_used)^l E. Uses A^T applied iteratively.
    """
    at = as_csr(a_used.T)
    acc = grad_pooled
    total = grad_pooled.copy()
    for _ in range(n_layers):
        acc = spmm(at, acc)
        total += acc
    total /= n_layers + 1
    return total


def split_embeddings(pooled: np.ndarray, n_users: int) -> tuple[np.ndarray, np.ndarray]:
    return pooled[:n_users], pooled[n_users:]


def score_matrix(e_u: np.ndarray, e_v: np.ndarray) -> np.ndarray:
    """Dense user-item preference scores, inner product of pooled embeddings."""
    if e_u.shape[1] != e_v.shape[1]:
        raise ShapeError(f"embedding widths differ: {e_u.shape} vs {e_v.shape}")
    return e_u @ e_v.T


def score_pairs(e_u: np.ndarray, e_v: np.ndarray, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Preference scores for aligned (user, item) index arrays."""
    return np.sum(e_u[users] * e_v[items], axis=1)
