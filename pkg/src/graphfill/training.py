"""Joint training loop: ranking loss, similarity constraint, generative branch.

One optimization step propagates the embedding table through the (dropout-
perturbed) normalized adjacency, scores a batch of positive/negative pairs,
evaluates the similarity constraint on sampled co-occurrence rows, runs the
batch users through the variational branch, and backpropagates everything by
hand into a shared parameter store. No autodiff anywhere; every loss term here
is covered by the finite-difference checker in the test suite.
"""

from __future__ import annotations

import dataclasses
import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import evaluation
from .generative import (
    Decoder,
    Encoder,
    GateUnit,
    gaussian_kl,
    loglik_from_logits,
    reparameterize,
    wasserstein_align,
)
from .graphconv import (
    BipartiteGraph,
    build_graph,
    drop_edges,
    pool,
    propagate,
    propagate_pool_backward,
    score_pairs,
    split_embeddings,
)
from .highorder import (
    cooccurrence_rows,
    interaction_head_backward,
    interaction_head_logits,
    smoothed_constraint,
)
from .ingest import TRAIN, InteractionSet, build_matrix
from .numeric import ParamStore, Rng, adam_step, glorot_uniform, sigmoid, softplus

VARIANTS = ("full", "wo_fm", "wo_vae", "wo_both")
SCORE_SOURCES = ("auto", "decoder", "inner")


@dataclass
class TrainConfig:
    """All knobs of a training run; the flat-text form feeds manifests and hashes."""

    embed_dim: int = 128
    n_layers: int = 2
    hidden_dim: int = 200
    latent_dim: int = 64
    dropout: float = 0.2
    learning_rate: float = 0.001
    lam: float = 0.1            # similarity-constraint weight; spelled "lambda" on disk
    beta: float = 0.1           # generative-branch weight
    align_weight: float = 1.0   # transport penalty inside the generative loss
    batch_size: int = 1024
    negatives: int = 1          # sampled negatives per positive
    mc_rows: int = 1024         # co-occurrence rows sampled per constraint side
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.1   # share of train pairs held out for early stopping
    seed: int = 0
    use_vae: bool = True
    use_fm: bool = True
    score_source: str = "auto"

    _KEYMAP = {"lam": "lambda"}

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0 or self.align_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if min(self.embed_dim, self.hidden_dim, self.latent_dim) < 1:
            raise ValueError("layer widths must be positive")
        if self.batch_size < 1 or self.negatives < 1 or self.mc_rows < 1:
            raise ValueError("batch_size, negatives, mc_rows must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.score_source not in SCORE_SOURCES:
            raise ValueError(f"score_source must be one of {SCORE_SOURCES}")
        if self.score_source == "decoder" and not self.use_vae:
            raise ValueError("decoder scoring requires the generative branch")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name.startswith("_"):
                continue
            key = self._KEYMAP.get(f.name, f.name)
            lines.append(f"{key} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        reverse = {v: k for k, v in cls._KEYMAP.items()}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            name = reverse.get(key, key)
            if name not in types:
                raise ValueError(f"config line {lineno}: unknown key '{key}'")
            kwargs[name] = _coerce(value, types[name], key, lineno)
        return cls(**kwargs)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _coerce(value: str, typ: str, key: str, lineno: int):
    typ = str(typ)
    try:
        if "bool" in typ:
            if value not in ("True", "False", "true", "false", "1", "0"):
                raise ValueError
            return value in ("True", "true", "1")
        if "int" in typ:
            return int(value)
        if "float" in typ:
            return float(value)
        return value
    except ValueError:
        raise ValueError(f"config line {lineno}: bad value {value!r} for '{key}'") from None


def ablate(config: TrainConfig, variant: str) -> TrainConfig:
    """Derive the config for an ablation variant of this run."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}', expected one of {VARIANTS}")
    changes = {
        "full": {},
        "wo_fm": {"lam": 0.0, "use_fm": False},
        "wo_vae": {"beta": 0.0, "use_vae": False, "score_source": "auto"},
        "wo_both": {"lam": 0.0, "use_fm": False, "beta": 0.0, "use_vae": False,
                    "score_source": "auto"},
    }[variant]
    return dataclasses.replace(config, **changes)


def bpr_loss(score_pos, score_neg):
    """Pairwise ranking loss -log sigmoid(pos - neg), elementwise."""
    return softplus(-(np.asarray(score_pos) - np.asarray(score_neg)))


def total_loss(l_rec: float, l_mc: float, l_vae: float, lam: float, beta: float) -> float:
    return l_rec + lam * l_mc + beta * l_vae


def sample_negatives(data: InteractionSet, user: int, count: int, rng: Rng) -> np.ndarray:
    """Uniform negatives for one user, rejecting train-split positives.

    A user who interacted with the whole catalog yields an empty array with a
    warning; duplicates across draws are allowed.
    """
    row = set(data.items[(data.users == user) & (data.split == TRAIN)].tolist())
    if len(row) >= data.n_items:
        warnings.warn(f"user {user} interacted with every item; no negatives", stacklevel=2)
        return np.empty(0, dtype=np.int64)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        j = int(rng.integers(0, data.n_items))
        while j in row:
            j = int(rng.integers(0, data.n_items))
        out[i] = j
    return out


# ---------------------------------------------------------------------------
# model state
# ---------------------------------------------------------------------------


@dataclass
class ModelState:
    """Everything a trained (or training) model needs to score users."""

    config: TrainConfig
    n_users: int
    n_items: int
    store: ParamStore
    graph: BipartiteGraph
    r_fit: sp.csr_matrix                 # train rows minus validation holdout
    fit_users: np.ndarray = field(repr=False, default=None)
    fit_items: np.ndarray = field(repr=False, default=None)
    val_users: np.ndarray = field(repr=False, default=None)
    val_items: np.ndarray = field(repr=False, default=None)
    pos_sets: list = field(repr=False, default=None)  # train positives per user
    rng: Rng = None
    encoder: Encoder | None = None
    gate: GateUnit | None = None
    decoder: Decoder | None = None
    epoch: int = 0
    best_epoch: int = -1
    best_metric: float = float("nan")

    @property
    def needs_head(self) -> bool:
        cfg = self.config
        return cfg.lam > 0 or (cfg.use_vae and cfg.align_weight > 0)

    def pooled_embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        layers = propagate(self.graph.normalized, self.store["embeddings"], self.config.n_layers)
        return split_embeddings(pool(layers), self.n_users)

    def score_users(self, users: np.ndarray, pooled=None) -> np.ndarray:
        """Deterministic ranking scores for the given users over all items.

        With the generative branch on (and score_source auto/decoder) scores
        are the decoder's item distribution at the posterior mean; otherwise
        the pooled-embedding inner products.
        """
        e_u, e_v = self.pooled_embeddings() if pooled is None else pooled
        p = e_u[users] @ e_v.T
        src = self.config.score_source
        if src == "inner" or (src == "auto" and not self.config.use_vae):
            return p
        cache_e = self.encoder.forward(self.store, p, None)
        x_mu, x_sigma = cache_e.mu, cache_e.logvar
        if self.config.use_fm:
            f = e_u[users] @ self.store["ho_proj"]
            x_mu = x_mu + f
            x_sigma = x_sigma + f
        cache_g = self.gate.forward(self.store, x_mu, x_sigma)
        z = reparameterize(cache_g.mu, cache_g.sigma, eps=None)
        cache_d = self.decoder.forward(self.store, z)
        return self.decoder.probs(cache_d)


def _holdout_validation(data: InteractionSet, frac: float, rng: Rng):
    """Carve a per-user validation slice out of the train pairs."""
    tr_users, tr_items = data.pairs("train")
    order = np.argsort(tr_users, kind="stable")
    tr_users, tr_items = tr_users[order], tr_items[order]
    degs = np.bincount(tr_users, minlength=data.n_users)
    val_mask = np.zeros(tr_users.size, dtype=bool)
    start = 0
    for u in range(data.n_users):
        deg = int(degs[u])
        if deg == 0:
            continue
        k = int(np.floor(frac * deg))
        if deg - k < 1:
            k = deg - 1
        if k > 0:
            pick = rng.choice(deg, size=k, replace=False)
            val_mask[start + pick] = True
        start += deg
    return (
        tr_users[~val_mask],
        tr_items[~val_mask],
        tr_users[val_mask],
        tr_items[val_mask],
    )


def init_model(data: InteractionSet, config: TrainConfig) -> ModelState:
    """Build graph, carve validation holdout, and initialize all parameters."""
    rng = Rng(config.seed)
    fit_u, fit_i, val_u, val_i = _holdout_validation(data, config.val_fraction, rng.child("val"))
    r_fit = build_matrix(
        InteractionSet(
            user_ids=data.user_ids,
            item_ids=data.item_ids,
            users=fit_u,
            items=fit_i,
            split=np.zeros(fit_u.size, dtype=np.int8),
            user_index=data.user_index,
            item_index=data.item_index,
        ),
        "train",
    )
    graph = build_graph(r_fit)

    # train positives (fit + validation) per user, for negative rejection
    tr_users, tr_items = data.pairs("train")
    pos_sets = [set() for _ in range(data.n_users)]
    for u, i in zip(tr_users.tolist(), tr_items.tolist()):
        pos_sets[u].add(i)

    store = ParamStore()
    init_rng = rng.child("init")
    n_nodes = data.n_users + data.n_items
    store.add("embeddings", glorot_uniform(init_rng.child("embeddings"), (n_nodes, config.embed_dim)))

    state = ModelState(
        config=config,
        n_users=data.n_users,
        n_items=data.n_items,
        store=store,
        graph=graph,
        r_fit=r_fit,
        fit_users=fit_u,
        fit_items=fit_i,
        val_users=val_u,
        val_items=val_i,
        pos_sets=pos_sets,
        rng=rng,
    )
    if state.needs_head:
        store.add("factor_head", glorot_uniform(init_rng.child("factor_head"), (config.embed_dim,)))
    if config.use_vae:
        state.encoder = Encoder(data.n_items, config.hidden_dim, config.latent_dim)
        state.gate = GateUnit(config.latent_dim)
        state.decoder = Decoder(config.latent_dim, config.hidden_dim, data.n_items)
        state.encoder.init_params(store, init_rng.child("encoder"))
        state.gate.init_params(store, init_rng.child("gate"))
        state.decoder.init_params(store, init_rng.child("decoder"))
        if config.use_fm:
            store.add("ho_proj", glorot_uniform(init_rng.child("ho_proj"), (config.embed_dim, config.latent_dim)))
    return state


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------


def _mc_rows(n: int, cap: int, rng: Rng) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cap, replace=False))


def batch_step(
    state: ModelState,
    users: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    epoch: int,
    batch_idx: int,
    training: bool = True,
) -> dict:
    """Forward + full hand-rolled backward for one batch of (user, pos, neg).

    Accumulates gradients into state.store (callers zero them beforehand) and
    returns the loss components. All sampling inside (edge dropout, input
    dropout, latent noise, constraint rows) is keyed by (seed, epoch,
    batch_idx), so replaying the same step is bit-reproducible.
    """
    cfg = state.config
    store = state.store
    rngb = state.rng.child("step", epoch, batch_idx)

    a_used = state.graph.normalized
    if training and cfg.dropout > 0:
        a_used = drop_edges(a_used, cfg.dropout, rngb.child("edges"))
    layers = propagate(a_used, store["embeddings"], cfg.n_layers)
    pooled = pool(layers)
    e_u, e_v = split_embeddings(pooled, state.n_users)
    grad_eu = np.zeros_like(e_u)
    grad_ev = np.zeros_like(e_v)

    # pairwise ranking on pooled inner products
    x = score_pairs(e_u, e_v, users, pos) - score_pairs(e_u, e_v, users, neg)
    l_rec = float(np.mean(softplus(-x)))
    gx = (-sigmoid(-x) / x.size)[:, None]
    np.add.at(grad_eu, users, gx * (e_v[pos] - e_v[neg]))
    np.add.at(grad_ev, pos, gx * e_u[users])
    np.add.at(grad_ev, neg, -gx * e_u[users])

    rhat = None
    grad_rhat = None
    if state.needs_head:
        rhat = sigmoid(interaction_head_logits(e_u, e_v, store["factor_head"]))
        grad_rhat = np.zeros_like(rhat)

    l_mc = 0.0
    if cfg.lam > 0:
        su = _mc_rows(state.n_users, cfg.mc_rows, rngb.child("mc_users"))
        sv = _mc_rows(state.n_items, cfg.mc_rows, rngb.child("mc_items"))
        c = rhat @ e_v
        d = rhat.T @ e_u
        wu_hat = e_u[su] @ c.T
        wv_hat = e_v[sv] @ d.T
        lu, g_wu = smoothed_constraint(cooccurrence_rows(state.r_fit, su, "user"), wu_hat, with_grad=True)
        lv, g_wv = smoothed_constraint(cooccurrence_rows(state.r_fit, sv, "item"), wv_hat, with_grad=True)
        l_mc = lu / su.size + lv / sv.size
        g_wu *= cfg.lam / su.size
        g_wv *= cfg.lam / sv.size
        grad_eu[su] += g_wu @ c
        g_c = g_wu.T @ e_u[su]
        grad_rhat += g_c @ e_v.T
        grad_ev += rhat.T @ g_c
        grad_ev[sv] += g_wv @ d
        g_d = g_wv.T @ e_v[sv]
        grad_rhat += e_u @ g_d.T
        grad_eu += rhat @ g_d

    l_vae = 0.0
    l_align = 0.0
    if cfg.use_vae:
        bu = np.unique(users)
        nb = bu.size
        p_rows = e_u[bu] @ e_v.T
        g_p = np.zeros_like(p_rows)

        if cfg.align_weight > 0:
            l_align, g_a, g_b = wasserstein_align(rhat[bu], p_rows, with_grad=True)
            grad_rhat[bu] += (cfg.beta * cfg.align_weight) * g_a
            g_p += (cfg.beta * cfg.align_weight) * g_b

        drop_mask = None
        if training and cfg.dropout > 0:
            keep = rngb.child("indrop").random(p_rows.shape) >= cfg.dropout
            drop_mask = keep / (1.0 - cfg.dropout)
        cache_e = state.encoder.forward(store, p_rows, drop_mask)
        x_mu, x_sigma = cache_e.mu, cache_e.logvar
        f = None
        if cfg.use_fm:
            f = e_u[bu] @ store["ho_proj"]
            x_mu = x_mu + f
            x_sigma = x_sigma + f
        cache_g = state.gate.forward(store, x_mu, x_sigma)
        eps = rngb.child("eps").standard_normal(cache_g.mu.shape) if training else None
        z = reparameterize(cache_g.mu, cache_g.sigma, eps)
        cache_d = state.decoder.forward(store, z)
        r_rows = state.r_fit[bu].toarray()
        ll_rows, g_ll_logits, _ = loglik_from_logits(cache_d.logits, r_rows, with_grad=True)
        kl_rows = gaussian_kl(cache_g.mu, cache_g.sigma)
        l_vae = float(np.mean(kl_rows - ll_rows)) + cfg.align_weight * l_align

        g_logits = (-cfg.beta / nb) * g_ll_logits
        g_z = state.decoder.backward(store, cache_d, g_logits)
        g_mu_u = g_z.copy()
        g_sigma = g_z * eps if eps is not None else np.zeros_like(g_z)
        g_mu_u += (cfg.beta / nb) * cache_g.mu
        g_sigma += (cfg.beta / nb) * (cache_g.sigma - 1.0 / cache_g.sigma)
        g_xmu, g_xsigma = state.gate.backward(store, cache_g, g_mu_u, g_sigma)
        if cfg.use_fm:
            g_f = g_xmu + g_xsigma
            store.accumulate("ho_proj", e_u[bu].T @ g_f)
            grad_eu[bu] += g_f @ store["ho_proj"].T
        g_p += state.encoder.backward(store, cache_e, g_xmu, g_xsigma)
        grad_eu[bu] += g_p @ e_v
        grad_ev += g_p.T @ e_u[bu]

    if grad_rhat is not None and np.any(grad_rhat):
        geu_h, gev_h, g_h = interaction_head_backward(
            e_u, e_v, store["factor_head"], rhat, grad_rhat
        )
        grad_eu += geu_h
        grad_ev += gev_h
        store.accumulate("factor_head", g_h)

    grad_pooled = np.vstack([grad_eu, grad_ev])
    store.accumulate("embeddings", propagate_pool_backward(a_used, grad_pooled, cfg.n_layers))

    return {
        "loss_rec": l_rec,
        "loss_mc": l_mc,
        "loss_vae": l_vae,
        "loss_align": l_align,
        "total": total_loss(l_rec, l_mc, l_vae, cfg.lam, cfg.beta),
        "n_pairs": int(x.size),
    }


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------


def _epoch_negatives(state: ModelState, users: np.ndarray, rng: Rng) -> np.ndarray:
    """Vectorized uniform negatives with rejection against train positives.

    Callers must have filtered out users who interacted with the whole
    catalog; such a user makes rejection sampling impossible.
    """
    n_items = state.n_items
    pos_sets = state.pos_sets
    saturated = {int(u) for u in np.unique(users) if len(pos_sets[u]) >= n_items}
    if saturated:
        raise ValueError(f"users {sorted(saturated)} have no negative candidates")
    neg = rng.integers(0, n_items, size=users.size).astype(np.int64)
    pending = [i for i in range(users.size) if int(neg[i]) in pos_sets[users[i]]]
    while pending:
        redraw = rng.integers(0, n_items, size=len(pending))
        nxt = []
        for slot, j in zip(pending, redraw):
            if int(j) in pos_sets[users[slot]]:
                nxt.append(slot)
            else:
                neg[slot] = j
        pending = nxt
    return neg


def train_epoch(state: ModelState, epoch: int) -> dict:
    """One shuffled pass over the fit pairs; returns mean loss components."""
    cfg = state.config
    users = np.repeat(state.fit_users, cfg.negatives)
    pos = np.repeat(state.fit_items, cfg.negatives)
    full = np.asarray([len(s) >= state.n_items for s in state.pos_sets])
    if full.any():
        keep = ~full[users]
        if not keep.all():
            warnings.warn("skipping pairs of users with no negative candidates", stacklevel=2)
            users, pos = users[keep], pos[keep]
    neg = _epoch_negatives(state, users, state.rng.child("neg", epoch))
    perm = state.rng.child("shuffle", epoch).permutation(users.size)

    sums: dict[str, float] = {}
    seen = 0
    for b, start in enumerate(range(0, users.size, cfg.batch_size)):
        idx = perm[start : start + cfg.batch_size]
        state.store.zero_grads()
        parts = batch_step(state, users[idx], pos[idx], neg[idx], epoch, b, training=True)
        adam_step(state.store, cfg.learning_rate)
        w = parts["n_pairs"]
        seen += w
        for key in ("loss_rec", "loss_mc", "loss_vae", "total"):
            sums[key] = sums.get(key, 0.0) + parts[key] * w
    return {key: val / seen for key, val in sums.items()}


@dataclass
class FitResult:
    state: ModelState
    history: list[dict]
    best_epoch: int
    best_metric: float
    stopped_early: bool


def _validation_ndcg(state: ModelState, k: int = 20) -> float:
    """NDCG@k on the internal holdout, excluding only the fit positives."""
    if state.val_users is None or state.val_users.size == 0:
        return float("nan")
    val_of: dict[int, list[int]] = {}
    for u, i in zip(state.val_users.tolist(), state.val_items.tolist()):
        val_of.setdefault(u, []).append(i)
    users = np.asarray(sorted(val_of), dtype=np.int64)
    pooled = state.pooled_embeddings()
    total = 0.0
    for start in range(0, users.size, 1024):
        chunk = users[start : start + 1024]
        scores = state.score_users(chunk, pooled=pooled)
        for row, u in enumerate(chunk.tolist()):
            exclude = state.r_fit.indices[state.r_fit.indptr[u] : state.r_fit.indptr[u + 1]]
            ranked = evaluation.rank_items(scores[row], exclude, k)
            total += evaluation.ndcg_at_k(ranked, val_of[u], k)
    return total / users.size


def fit(data: InteractionSet, config: TrainConfig) -> FitResult:
    """Train to convergence with early stopping on validation NDCG@20.

    Returns the best-validation state (parameters restored from the best
    epoch) plus the per-epoch history. max_epochs=0 returns the initialized
    model untouched with an empty history.
    """
    state = init_model(data, config)
    history: list[dict] = []
    best_metric = -np.inf
    best_store = None
    best_epoch = -1
    streak = 0
    stopped = False

    for epoch in range(config.max_epochs):
        means = train_epoch(state, epoch)
        state.epoch = epoch + 1
        val = _validation_ndcg(state)
        history.append(
            {
                "epoch": epoch + 1,
                "loss_rec": means["loss_rec"],
                "loss_mc": means["loss_mc"],
                "loss_vae": means["loss_vae"],
                "val_ndcg20": val,
            }
        )
        if np.isnan(val):
            continue
        if val > best_metric:
            best_metric = val
            best_store = state.store.copy()
            best_epoch = epoch + 1
            streak = 0
        else:
            streak += 1
            if streak >= config.patience:
                stopped = True
                break

    if best_store is not None:
        state.store = best_store
        state.best_epoch = best_epoch
        state.best_metric = best_metric
    elif history:
        state.best_epoch = len(history)
        state.best_metric = float("nan")
    return FitResult(state, history, state.best_epoch, state.best_metric, stopped)


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss_rec,loss_mc,loss_vae,val_ndcg20\n")
        for row in history:
            fh.write(
                f"{row['epoch']},{row['loss_rec']:.10g},{row['loss_mc']:.10g},"
                f"{row['loss_vae']:.10g},{row['val_ndcg20']:.10g}\n"
            )
