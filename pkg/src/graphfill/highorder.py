"""Factorization head and the similarity constraint between observed and
predicted co-occurrence structure.

The head scores every user-item pair through a weighted elementwise product of
pooled embeddings squashed to (0, 1). Those dense predictions induce low-rank
user-user and item-item similarity surrogates, which a row-wise KL divergence
pulls toward the co-occurrence counts of the interaction matrix.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .numeric import ShapeError, sigmoid, softplus

SMOOTH_EPS = 1e-8


# ---------------------------------------------------------------------------
# factorization head
# ---------------------------------------------------------------------------


def interaction_head_logits(e_u: np.ndarray, e_v: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Pre-squash pair scores h . (e_u * e_v), computed as (e_u * h) @ e_v^T."""
    if h.shape != (e_u.shape[1],) or e_u.shape[1] != e_v.shape[1]:
        raise ShapeError(
            f"head weight {h.shape} incompatible with embeddings {e_u.shape}, {e_v.shape}"
        )
    return (e_u * h) @ e_v.T


def interaction_head(e_u: np.ndarray, e_v: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Dense predicted interaction matrix in (0, 1), users by items."""
    return sigmoid(interaction_head_logits(e_u, e_v, h))


def interaction_head_backward(
    e_u: np.ndarray,
    e_v: np.ndarray,
    h: np.ndarray,
    rhat: np.ndarray,
    grad_rhat: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d e_u, d e_v, d h) given d loss / d rhat.

    `rhat` must be the forward output for the same inputs; the sigmoid
    derivative is recovered from it as rhat * (1 - rhat).
    """
    gz = grad_rhat * rhat * (1.0 - rhat)
    weighted_u = e_u * h
    g_weighted_u = gz @ e_v
    g_e_v = gz.T @ weighted_u
    g_e_u = g_weighted_u * h
    g_h = np.einsum("md,md->d", g_weighted_u, e_u)
    return g_e_u, g_e_v, g_h


# ---------------------------------------------------------------------------
# similarity surrogates
# ---------------------------------------------------------------------------


def predicted_similarity(
    e_u: np.ndarray,
    e_v: np.ndarray,
    rhat: np.ndarray,
    user_rows: np.ndarray | None = None,
    item_rows: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Model-side similarity rows: users against all users, items against all items.

    W_user = E_u (rhat E_v)^T restricted to `user_rows` (all rows when None),
    and symmetrically W_item = E_v (rhat^T E_u)^T restricted to `item_rows`.
    """
    c = rhat @ e_v
    d = rhat.T @ e_u
    wu = (e_u if user_rows is None else e_u[user_rows]) @ c.T
    wv = (e_v if item_rows is None else e_v[item_rows]) @ d.T
    return wu, wv


def cooccurrence(r: sp.csr_matrix) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Observed co-occurrence counts R R^T (users) and R^T R (items)."""
    rt = r.T.tocsr()
    return (r @ rt).tocsr(), (rt @ r).tocsr()


def cooccurrence_rows(r: sp.csr_matrix, rows: np.ndarray, side: str) -> np.ndarray:
    """Dense co-occurrence rows for a subset of users ('user') or items ('item')."""
    if side == "user":
        block = r[rows] @ r.T
    elif side == "item":
        rt = r.T.tocsr()
        block = rt[rows] @ r
    else:
        raise ValueError("side must be 'user' or 'item'")
    return block.toarray()


# ---------------------------------------------------------------------------
# constraint loss
# ---------------------------------------------------------------------------


def constraint_loss(
    w_obs: np.ndarray,
    w_pred: np.ndarray,
    eps: float = SMOOTH_EPS,
    with_grad: bool = False,
):
    """Row-wise KL(observed rows || predicted rows), summed over rows.

    Both inputs must be nonnegative; each row is smoothed by `eps` and
    normalized to a distribution, so zero rows and zero entries are safe.
    Returns the scalar loss, or `(loss, grad_w_pred)` when `with_grad`.
    The gradient is taken w.r.t. the raw `w_pred` entries.
    """
    w_obs = np.asarray(w_obs, dtype=np.float64)
    w_pred = np.asarray(w_pred, dtype=np.float64)
    if w_obs.shape != w_pred.shape:
        raise ShapeError(f"similarity shapes differ: {w_obs.shape} vs {w_pred.shape}")
    if w_obs.min() < 0 or w_pred.min() < 0:
        raise ValueError("constraint_loss requires nonnegative inputs")

    p_raw = w_obs + eps
    p = p_raw / p_raw.sum(axis=1, keepdims=True)
    t = w_pred + eps
    t_sum = t.sum(axis=1, keepdims=True)
    q = t / t_sum
    loss = float(np.sum(p * (np.log(p) - np.log(q))))
    if not with_grad:
        return loss
    grad = (1.0 - p / q) / t_sum
    return loss, grad


def smoothed_constraint(
    w_obs: np.ndarray, w_pred_raw: np.ndarray, with_grad: bool = False
):
    """Constraint loss with the predicted side mapped through softplus first.

    Raw predicted similarities can be negative; softplus makes them a valid
    nonnegative mass before smoothing. Gradient is w.r.t. the raw values.
    """
    t = softplus(w_pred_raw)
    if not with_grad:
        return constraint_loss(w_obs, t)
    loss, g_t = constraint_loss(w_obs, t, with_grad=True)
    return loss, g_t * sigmoid(w_pred_raw)
