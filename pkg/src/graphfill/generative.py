"""Variational completion branch: encoder, gated fusion, multinomial decoder.

Each user's preference row is encoded into a Gaussian posterior. A gate blends
the posterior statistics (optionally enriched with a projection of the user's
graph embedding) before sampling, and the decoder emits a distribution over
the full item catalog. A sorted-difference transport penalty keeps the
factorization head's predictions consistent with the inner-product scores.

All backward methods accumulate parameter gradients into the store and return
gradients w.r.t. their inputs, so the training loop can chain them freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, xlogy

from .numeric import NonFiniteError, ParamStore, Rng, glorot_uniform, sigmoid, softplus

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
SIGMA_FLOOR = 1e-6
NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# distribution helpers
# ---------------------------------------------------------------------------


def reparameterize(mu: np.ndarray, sigma: np.ndarray, eps: np.ndarray | None = None) -> np.ndarray:
    """mu + sigma * eps with externally supplied noise; just mu when eps is None.

    Keeping the noise an explicit argument makes training steps replayable:
    the same eps gives the same sample, which the gradient checker relies on.
    """
    if eps is None:
        return mu.copy()
    return mu + sigma * eps


def sample_latent(mu: np.ndarray, sigma: np.ndarray, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw eps and return (z, eps)."""
    eps = rng.standard_normal(mu.shape)
    return mu + sigma * eps, eps


def gaussian_kl(mu: np.ndarray, sigma: np.ndarray, with_grad: bool = False):
    """KL(N(mu, diag sigma^2) || N(0, I)).

    1-D inputs give a scalar; 2-D inputs give one value per row. Gradients,
    when requested, are for the plain sum over every element.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    per = 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma))
    val = per.sum(axis=-1)
    if not with_grad:
        return val
    return val, mu.copy(), sigma - 1.0 / sigma


def multinomial_loglik(probs: np.ndarray, counts: np.ndarray) -> float:
    """sum_i counts_i * log(probs_i), rows treated jointly.

    Each probability row must sum to 1 within 1e-6; counts must be
    nonnegative. Zero counts contribute zero regardless of the probability.
    """
    probs = np.asarray(probs, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")
    if counts.min() < 0:
        raise ValueError("counts must be nonnegative")
    return float(xlogy(counts, probs).sum())


def loglik_from_logits(logits: np.ndarray, counts: np.ndarray, with_grad: bool = False):
    """Row log-likelihoods under softmax(logits); stable log-sum-exp form.

    Gradient, when requested, is d(sum of row log-likelihoods)/d logits.
    """
    lse = logsumexp(logits, axis=1, keepdims=True)
    log_probs = logits - lse
    rows = np.sum(counts * log_probs, axis=1)
    if not with_grad:
        return rows
    probs = np.exp(log_probs)
    grad = counts - counts.sum(axis=1, keepdims=True) * probs
    return rows, grad, probs


def wasserstein_align(a: np.ndarray, b: np.ndarray, with_grad: bool = False):
    """Mean 1-D transport distance between corresponding rows of a and b.

    Each row pair is compared as an empirical distribution of equal weight,
    which reduces to the mean absolute difference of sorted values.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"row shapes differ: {a.shape} vs {b.shape}")
    ia = np.argsort(a, axis=1)
    ib = np.argsort(b, axis=1)
    diff = np.take_along_axis(a, ia, axis=1) - np.take_along_axis(b, ib, axis=1)
    loss = float(np.mean(np.abs(diff)))
    if not with_grad:
        return loss
    scale = np.sign(diff) / diff.size
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    np.put_along_axis(ga, ia, scale, axis=1)
    np.put_along_axis(gb, ib, -scale, axis=1)
    return loss, ga, gb


# ---------------------------------------------------------------------------
# network blocks
# ---------------------------------------------------------------------------


@dataclass
class EncoderCache:
    x_raw: np.ndarray
    norm: np.ndarray      # row L2 norms, (B, 1)
    y: np.ndarray         # normalized rows
    drop_mask: np.ndarray | None
    xd: np.ndarray
    hidden: np.ndarray
    logvar_pre: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray


class Encoder:
    """Preference row -> Gaussian posterior (mu, logvar), one tanh hidden layer."""

    def __init__(self, n_items: int, hidden_dim: int, latent_dim: int):
        self.n_items = n_items
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim

    def init_params(self, store: ParamStore, rng: Rng) -> None:
        store.add("enc_w1", glorot_uniform(rng.child("enc_w1"), (self.n_items, self.hidden_dim)))
        store.add("enc_b1", np.zeros(self.hidden_dim))
        store.add("enc_w_mu", glorot_uniform(rng.child("enc_w_mu"), (self.hidden_dim, self.latent_dim)))
        store.add("enc_b_mu", np.zeros(self.latent_dim))
        store.add("enc_w_logvar", glorot_uniform(rng.child("enc_w_logvar"), (self.hidden_dim, self.latent_dim)))
        store.add("enc_b_logvar", np.zeros(self.latent_dim))

    def forward(
        self, store: ParamStore, x: np.ndarray, drop_mask: np.ndarray | None = None
    ) -> EncoderCache:
        """Encode rows x (already nonnegative preference mass or raw scores).

        Rows are L2-normalized first; `drop_mask` is a pre-scaled inverted
        dropout mask (entries 0 or 1/(1-rate)) or None outside training.
        """
        norm = np.linalg.norm(x, axis=1, keepdims=True)
        y = x / (norm + NORM_EPS)
        xd = y * drop_mask if drop_mask is not None else y
        hidden = np.tanh(xd @ store["enc_w1"] + store["enc_b1"])
        mu = hidden @ store["enc_w_mu"] + store["enc_b_mu"]
        logvar_pre = hidden @ store["enc_w_logvar"] + store["enc_b_logvar"]
        logvar = np.clip(logvar_pre, LOGVAR_MIN, LOGVAR_MAX)
        if not (np.isfinite(mu).all() and np.isfinite(logvar).all()):
            raise NonFiniteError("non-finite activation in encoder posterior")
        return EncoderCache(x, norm, y, drop_mask, xd, hidden, logvar_pre, mu, logvar)

    def backward(
        self, store: ParamStore, cache: EncoderCache, g_mu: np.ndarray, g_logvar: np.ndarray
    ) -> np.ndarray:
        """Accumulate parameter grads, return gradient w.r.t. the raw input rows."""
        clip_mask = (cache.logvar_pre > LOGVAR_MIN) & (cache.logvar_pre < LOGVAR_MAX)
        g_lv_pre = g_logvar * clip_mask
        store.accumulate("enc_w_mu", cache.hidden.T @ g_mu)
        store.accumulate("enc_b_mu", g_mu.sum(axis=0))
        store.accumulate("enc_w_logvar", cache.hidden.T @ g_lv_pre)
        store.accumulate("enc_b_logvar", g_lv_pre.sum(axis=0))
        g_hidden = g_mu @ store["enc_w_mu"].T + g_lv_pre @ store["enc_w_logvar"].T
        g_pre = g_hidden * (1.0 - cache.hidden**2)
        store.accumulate("enc_w1", cache.xd.T @ g_pre)
        store.accumulate("enc_b1", g_pre.sum(axis=0))
        g_xd = g_pre @ store["enc_w1"].T
        g_y = g_xd * cache.drop_mask if cache.drop_mask is not None else g_xd
        s = cache.norm + NORM_EPS
        dot = np.sum(g_y * cache.x_raw, axis=1, keepdims=True)
        safe_norm = np.where(cache.norm > 0, cache.norm, 1.0)
        g_x = g_y / s - (dot / (s * s * safe_norm)) * cache.x_raw
        return g_x


@dataclass
class GateCache:
    x_mu: np.ndarray
    x_sigma: np.ndarray
    h_mu: np.ndarray
    h_sigma: np.ndarray
    concat: np.ndarray
    gate: np.ndarray
    s_raw: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray


class GateUnit:
    """Blend two latent statistics streams with a learned convex gate.

    mu = g * tanh(x_mu W_mu), sigma = softplus((1 - g) * tanh(x_sigma W_sigma)),
    with g = sigmoid([x_mu, x_sigma] W_mix) deciding how much of the final
    location vs spread each stream controls.
    """

    def __init__(self, latent_dim: int):
        self.latent_dim = latent_dim

    def init_params(self, store: ParamStore, rng: Rng) -> None:
        k = self.latent_dim
        store.add("gate_w_mu", glorot_uniform(rng.child("gate_w_mu"), (k, k)))
        store.add("gate_w_sigma", glorot_uniform(rng.child("gate_w_sigma"), (k, k)))
        store.add("gate_w_mix", glorot_uniform(rng.child("gate_w_mix"), (2 * k, k)))

    def forward(self, store: ParamStore, x_mu: np.ndarray, x_sigma: np.ndarray) -> GateCache:
        h_mu = np.tanh(x_mu @ store["gate_w_mu"])
        h_sigma = np.tanh(x_sigma @ store["gate_w_sigma"])
        concat = np.concatenate([x_mu, x_sigma], axis=1)
        gate = sigmoid(concat @ store["gate_w_mix"])
        mu = gate * h_mu
        s_raw = (1.0 - gate) * h_sigma
        sigma = softplus(s_raw) + SIGMA_FLOOR
        if not np.isfinite(sigma).all():
            raise NonFiniteError("non-finite activation in gate unit")
        return GateCache(x_mu, x_sigma, h_mu, h_sigma, concat, gate, s_raw, sigma, mu)

    def backward(
        self, store: ParamStore, cache: GateCache, g_mu: np.ndarray, g_sigma: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        k = self.latent_dim
        g_sraw = g_sigma * sigmoid(cache.s_raw)
        g_gate = g_mu * cache.h_mu - g_sraw * cache.h_sigma
        g_hmu = g_mu * cache.gate
        g_hsigma = g_sraw * (1.0 - cache.gate)
        g_mix_pre = g_gate * cache.gate * (1.0 - cache.gate)
        store.accumulate("gate_w_mix", cache.concat.T @ g_mix_pre)
        g_concat = g_mix_pre @ store["gate_w_mix"].T
        g_x_mu = g_concat[:, :k].copy()
        g_x_sigma = g_concat[:, k:].copy()
        pre_mu_grad = g_hmu * (1.0 - cache.h_mu**2)
        store.accumulate("gate_w_mu", cache.x_mu.T @ pre_mu_grad)
        g_x_mu += pre_mu_grad @ store["gate_w_mu"].T
        pre_sig_grad = g_hsigma * (1.0 - cache.h_sigma**2)
        store.accumulate("gate_w_sigma", cache.x_sigma.T @ pre_sig_grad)
        g_x_sigma += pre_sig_grad @ store["gate_w_sigma"].T
        return g_x_mu, g_x_sigma


@dataclass
class DecoderCache:
    z: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray


class Decoder:
    """Latent sample -> logits over the item catalog, one tanh hidden layer."""

    def __init__(self, latent_dim: int, hidden_dim: int, n_items: int):
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.n_items = n_items

    def init_params(self, store: ParamStore, rng: Rng) -> None:
        store.add("dec_w1", glorot_uniform(rng.child("dec_w1"), (self.latent_dim, self.hidden_dim)))
        store.add("dec_b1", np.zeros(self.hidden_dim))
        store.add("dec_w2", glorot_uniform(rng.child("dec_w2"), (self.hidden_dim, self.n_items)))
        store.add("dec_b2", np.zeros(self.n_items))

    def forward(self, store: ParamStore, z: np.ndarray) -> DecoderCache:
        hidden = np.tanh(z @ store["dec_w1"] + store["dec_b1"])
        logits = hidden @ store["dec_w2"] + store["dec_b2"]
        if not np.isfinite(logits).all():
            raise NonFiniteError("non-finite activation in decoder logits")
        return DecoderCache(z, hidden, logits)

    def probs(self, cache: DecoderCache) -> np.ndarray:
        lse = logsumexp(cache.logits, axis=1, keepdims=True)
        return np.exp(cache.logits - lse)

    def backward(self, store: ParamStore, cache: DecoderCache, g_logits: np.ndarray) -> np.ndarray:
        store.accumulate("dec_w2", cache.hidden.T @ g_logits)
        store.accumulate("dec_b2", g_logits.sum(axis=0))
        g_hidden = g_logits @ store["dec_w2"].T
        g_pre = g_hidden * (1.0 - cache.hidden**2)
        store.accumulate("dec_w1", cache.z.T @ g_pre)
        store.accumulate("dec_b1", g_pre.sum(axis=0))
        return g_pre @ store["dec_w1"].T
