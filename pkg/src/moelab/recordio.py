"""Deterministic seeding and bit-stable tabular/binary output.

Every numeric value is serialized with 17 significant digits so that files
byte-reproduce under a fixed resolved config. One master seed fans out to
named streams via a hash-based key derivation; no module ever touches a
shared global RNG.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

SNAPSHOT_SCHEMA_VERSION = 1


def stream(master: int, label: str) -> np.random.Generator:
    """Named substream: Philox keyed by sha256(master, label)."""
    h = hashlib.sha256(f"{int(master)}::{label}".encode()).digest()
    key = int.from_bytes(h[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_table(path: str | Path, header: list[str], rows) -> Path:
    """Comma-separated table with a mandatory header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    return path


def read_table(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def save_snapshots(path: str | Path, arrays: dict[str, np.ndarray],
                   meta: dict | None = None) -> Path:
    """Compact binary snapshot bundle with an embedded schema version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(arrays)
    payload["__schema_version__"] = np.int64(SNAPSHOT_SCHEMA_VERSION)
    if meta is not None:
        payload["__meta_json__"] = np.frombuffer(
            json.dumps(meta, sort_keys=True, default=_json_default).encode(), dtype=np.uint8)
    np.savez_compressed(path, **payload)
    return path


def load_snapshots(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as zf:
        arrays = {k: zf[k] for k in zf.files if not k.startswith("__")}
        version = int(zf["__schema_version__"])
        if version != SNAPSHOT_SCHEMA_VERSION:
            raise ValueError(f"snapshot schema version {version} not supported")
        meta = {}
        if "__meta_json__" in zf.files:
            meta = json.loads(bytes(zf["__meta_json__"]).decode())
    return arrays, meta


def set_thread_count(threads: int) -> int:
    """Limit BLAS threads; 0 means leave the library default in place."""
    if threads and threads > 0:
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(limits=threads)
        except ImportError:
            os.environ["OMP_NUM_THREADS"] = str(threads)
        return threads
    return 0
