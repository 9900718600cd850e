"""Shared plumbing: stable hashing, named RNG streams, atomic file I/O."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

FNV_OFFSET_64 = 0xCBF29CE484222325
FNV_PRIME_64 = 0x100000001B3
_MASK_64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: str | bytes) -> int:
    """FNV-1a 64-bit hash. Fixed constants; stable across runs and platforms."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET_64
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME_64) & _MASK_64
    return h


def stream_rng(seed: int, *names: str) -> np.random.Generator:
    """Derive an independent generator from a global seed and a stream name.

    Every consumer of randomness pulls from its own named stream, so results
    do not depend on the order in which components run.
    """
    entropy = [int(seed) & _MASK_64] + [fnv1a_64(name) for name in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding (sorted keys, fixed separators)."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    lines = [canonical_json(row) for row in rows]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: bad JSON on line {lineno}: {exc}") from exc
