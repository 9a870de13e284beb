"""Deterministic numeric core: RNG streams, parameter store, sparse/dense kernels,
Adam, and the finite-difference gradient checker every loss in this package must pass.

Everything runs in 64-bit floats. Dense matrices are plain numpy arrays, sparse
matrices are canonicalized scipy CSR (sorted indices, duplicates summed, no explicit
zeros). Randomness always flows through an explicit `Rng`; nothing reads global state.
"""

from __future__ import annotations

import zlib

import numpy as np
import scipy.sparse as sp
from scipy.special import expit  # noqa: F401  (re-exported convenience)


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class NonFiniteError(FloatingPointError):
    """A forward activation or loss came out NaN/inf; message names the layer."""


class TrainingDivergenceError(RuntimeError):
    """A gradient went non-finite during optimization; message names the parameter."""


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


def _tag_to_word(tag) -> int:
    """Map a stream tag (int or str) to a stable uint32 spawn-key word."""
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"stream tag must be nonnegative, got {tag}")
        return int(tag) & 0xFFFFFFFF
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8")) & 0xFFFFFFFF
    raise TypeError(f"stream tag must be int or str, got {type(tag).__name__}")


class Rng:
    """Seeded random stream with cheap, collision-safe child streams.

    `child(*tags)` derives an independent stream from (seed, parent tags, tags),
    so e.g. the negative-sampling stream of epoch 3 never depends on how many
    draws the dropout stream of epoch 2 consumed. Same seed + same tag path
    always reproduces the same values, on any machine.
    """

    def __init__(self, seed: int, _key: tuple = ()):  # _key is internal
        self.seed = int(seed)
        self._key = tuple(_key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *tags) -> "Rng":
        words = tuple(_tag_to_word(t) for t in tags)
        return Rng(self.seed, self._key + words)

    # thin delegations to the underlying generator, float64 throughout
    def standard_normal(self, shape):
        return self._gen.standard_normal(shape, dtype=np.float64)

    def random(self, shape=None):
        return self._gen.random(shape, dtype=np.float64)

    def uniform(self, low, high, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self._key})"


def sample_gaussian(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """Standard-normal (rows, cols) matrix from the given stream."""
    return rng.standard_normal((rows, cols))


def glorot_uniform(rng: Rng, shape) -> np.ndarray:
    """Uniform(-b, b) init with b = sqrt(6 / (fan_in + fan_out)).

    Vectors are treated as (len, 1) for the fan computation.
    """
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named float64 parameter tensors with matching gradient and Adam buffers.

    Iteration order is insertion order everywhere, which keeps optimizer sweeps
    and checkpoints deterministic.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step: int = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"parameter '{name}' already registered")
        v = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = v
        self.grads[name] = np.zeros_like(v)
        self.adam_m[name] = np.zeros_like(v)
        self.adam_v[name] = np.zeros_like(v)
        return v

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self.params[name].shape:
            raise ShapeError(
                f"gradient for '{name}' has shape {grad.shape}, "
                f"parameter has {self.params[name].shape}"
            )
        self.grads[name] += grad

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, v in self.params.items():
            dup.params[name] = v.copy()
            dup.grads[name] = self.grads[name].copy()
            dup.adam_m[name] = self.adam_m[name].copy()
            dup.adam_v[name] = self.adam_v[name].copy()
        dup.step = self.step
        return dup


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter, then zero the grads.

    Raises TrainingDivergenceError naming the first parameter whose gradient
    contains NaN/inf; the store is left untouched in that case.
    """
    for name, g in store.grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergenceError(f"non-finite gradient for parameter '{name}'")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grads()


# ---------------------------------------------------------------------------
# sparse/dense kernels
# ---------------------------------------------------------------------------


def as_csr(matrix, shape=None) -> sp.csr_matrix:
    """Canonical float64 CSR: sorted indices, duplicates summed, no stored zeros."""
    a = sp.csr_matrix(matrix, shape=shape, dtype=np.float64)
    a.sum_duplicates()
    a.sort_indices()
    a.eliminate_zeros()
    return a


def validate_csr(a: sp.csr_matrix) -> None:
    """Assert the canonical-CSR invariants; raises ValueError on violation."""
    if not sp.isspmatrix_csr(a):
        raise ValueError("expected a CSR matrix")
    if a.indptr[0] != 0 or a.indptr[-1] != a.nnz:
        raise ValueError("corrupt indptr bounds")
    if np.any(np.diff(a.indptr) < 0):
        raise ValueError("row offsets must be nondecreasing")
    for r in range(a.shape[0]):
        cols = a.indices[a.indptr[r] : a.indptr[r + 1]]
        if cols.size and (np.any(np.diff(cols) <= 0) or cols[0] < 0 or cols[-1] >= a.shape[1]):
            raise ValueError(f"row {r} column indices not strictly increasing in range")
    if not np.isfinite(a.data).all():
        raise ValueError("stored values must be finite")
    if np.any(a.data == 0.0):
        raise ValueError("explicit zeros are not allowed after construction")


def spmm(a: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    """Sparse (r, c) times dense (c, k) -> dense (r, k)."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"spmm: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a @ np.asarray(b, dtype=np.float64)
    return np.asarray(out)


def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    return np.logaddexp(0.0, x)


def log_sigmoid(x):
    """log(sigmoid(x)), overflow-safe."""
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    return expit(x)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    loss_fn,
    store: ParamStore,
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_fn(store)` must return `(loss, grads)` where `grads` maps parameter
    names to arrays (missing names mean zero gradient), and must be a pure
    deterministic function of the store contents: any internal sampling has to
    be driven by fixed seeds so that two calls at the same parameters agree.

    Returns the maximum relative error max |analytic - fd| / max(1, |analytic|)
    over the probed coordinates. Checks every coordinate unless
    `max_coords_per_param` caps it (then `rng` picks which ones). A non-finite
    loss at any probe makes the check fail with +inf.
    """
    base_loss, analytic = loss_fn(store)
    if not np.isfinite(base_loss):
        return float("inf")
    if max_coords_per_param is not None and rng is None:
        raise ValueError("coordinate sampling requires an rng")

    worst = 0.0
    for name, p in store.params.items():
        flat = p.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        else:
            coords = np.arange(n)
        a_grad = analytic.get(name)
        a_flat = np.zeros(n) if a_grad is None else np.asarray(a_grad).reshape(-1)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            lp, _ = loss_fn(store)
            flat[c] = keep - h
            lm, _ = loss_fn(store)
            flat[c] = keep
            if not (np.isfinite(lp) and np.isfinite(lm)):
                return float("inf")
            fd = (lp - lm) / (2.0 * h)
            err = abs(a_flat[c] - fd) / max(1.0, abs(a_flat[c]))
            if err > worst:
                worst = err
    return float(worst)
