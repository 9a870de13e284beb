"""Versioned binary checkpoints for parameter stores.

Layout, all integers little-endian, all floats IEEE-754 binary64 little-endian:

    bytes 0..7    magic "GFCKPT01"
    u32           format version (currently 1)
    u64           training seed
    u64           optimizer step count
    32 bytes      sha256 of the flat config text
    u32           number of parameters
    per parameter, in store insertion order:
        u16       name length in bytes
        ...       name, utf-8
        u8        ndim
        u64 *nd   dimension sizes
        f64 *n    parameter values, C order
        f64 *n    Adam first-moment buffer
        f64 *n    Adam second-moment buffer
    u32           metadata length in bytes
    ...           metadata, JSON utf-8

Round trips are bit-exact: loading writes back the same bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .numeric import ParamStore

MAGIC = b"GFCKPT01"
VERSION = 1


class CheckpointError(RuntimeError):
    """File is not a readable checkpoint of a supported version."""


def save_checkpoint(path, store: ParamStore, seed: int, config_hash: str, metadata: dict | None = None) -> None:
    """Serialize the store. `config_hash` is the hex sha256 of the config text."""
    raw_hash = bytes.fromhex(config_hash)
    if len(raw_hash) != 32:
        raise ValueError("config_hash must be a hex sha256 digest")
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQQ", VERSION, seed & 0xFFFFFFFFFFFFFFFF, store.step))
        fh.write(raw_hash)
        fh.write(struct.pack("<I", len(store.params)))
        for name, p in store.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}Q", *p.shape))
            for arr in (p, store.adam_m[name], store.adam_v[name]):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def _read(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    """Read a checkpoint back into a fresh ParamStore.

    Returns (store, header) where header carries seed, step, config_hash
    (hex), and the metadata dict.
    """
    with open(path, "rb") as fh:
        if _read(fh, 8, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version, seed, step = struct.unpack("<IQQ", _read(fh, 20, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config_hash = _read(fh, 32, "config hash").hex()
        (n_params,) = struct.unpack("<I", _read(fh, 4, "parameter count"))
        store = ParamStore()
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}Q", _read(fh, 8 * ndim, "shape"))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arrs = []
            for what in ("values", "adam m", "adam v"):
                buf = _read(fh, 8 * count, f"{name} {what}")
                arrs.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
            store.add(name, arrs[0])
            store.adam_m[name] = arrs[1]
            store.adam_v[name] = arrs[2]
        store.step = step
        (meta_len,) = struct.unpack("<I", _read(fh, 4, "metadata length"))
        metadata = json.loads(_read(fh, meta_len, "metadata").decode("utf-8"))
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    header = {"seed": seed, "step": step, "config_hash": config_hash, "metadata": metadata}
    return store, header
