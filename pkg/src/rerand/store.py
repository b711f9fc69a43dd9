"""Pre-generated replicate assignments on disk.

Layout: a 32-byte little-endian header (magic ``RRST``, format version u16,
n_replicates u64, n_subjects u32, n_arms u8, zero padding) followed by the
assignment matrix as row-major u8 arm indices.  A JSON sidecar
(``<path>.json``) records the master seed, minimization parameters and the
covariate fingerprint of the cohort the rows were drawn for.  Row ``r`` is
always the replicate drawn from stream ``(master_seed, r)``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import Cohort, covariate_fingerprint
from .minimization import BatchRandomizer, MinimizationParams

__all__ = ["StoreError", "ReplicateStore", "pregenerate", "FORMAT_VERSION", "MAGIC", "HEADER_SIZE"]

MAGIC = b"RRST"
FORMAT_VERSION = 1
HEADER_SIZE = 32
_HEADER = struct.Struct("<4sHQIB")


class StoreError(RuntimeError):
    pass


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


@dataclass
class ReplicateStore:
    path: Path
    master_seed: int
    params: MinimizationParams
    fingerprint: str
    n_replicates: int
    n_subjects: int
    n_arms: int
    assignments: np.ndarray  # (n_replicates, n_subjects) uint8, memory-mapped
    metadata: dict

    @classmethod
    def open(cls, path) -> "ReplicateStore":
        path = Path(path)
        with open(path, "rb") as fh:
            raw = fh.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE:
            raise StoreError(f"{path}: truncated header")
        magic, version, n_rep, n_sub, n_arms = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise StoreError(f"{path}: not a replicate store (bad magic)")
        if version != FORMAT_VERSION:
            raise StoreError(f"{path}: unsupported store format version {version}")
        expected = HEADER_SIZE + n_rep * n_sub
        if os.path.getsize(path) != expected:
            raise StoreError(f"{path}: size {os.path.getsize(path)} does not match header ({expected})")
        try:
            meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise StoreError(f"{path}: missing sidecar {sidecar_path(path).name}") from None
        if meta.get("n_replicates") != n_rep or meta.get("n_subjects") != n_sub:
            raise StoreError(f"{path}: sidecar disagrees with header")
        if n_rep and n_sub:
            mat = np.memmap(path, dtype=np.uint8, mode="r", offset=HEADER_SIZE, shape=(n_rep, n_sub))
        else:
            mat = np.zeros((n_rep, n_sub), dtype=np.uint8)
        return cls(
            path=path,
            master_seed=int(meta["master_seed"]),
            params=MinimizationParams.from_dict(meta["minimization"]),
            fingerprint=meta["fingerprint"],
            n_replicates=n_rep,
            n_subjects=n_sub,
            n_arms=n_arms,
            assignments=mat,
            metadata=meta,
        )

    def rows(self, start: int, count: int) -> np.ndarray:
        if start < 0 or start + count > self.n_replicates:
            raise StoreError(
                f"store exhausted: holds {self.n_replicates:,} replicates, requested rows up to {start + count:,}"
            )
        return np.asarray(self.assignments[start:start + count])

    def row(self, r: int) -> np.ndarray:
        return self.rows(r, 1)[0]

    def check_cohort(self, cohort: Cohort, params: MinimizationParams | None = None) -> None:
        if covariate_fingerprint(cohort) != self.fingerprint or cohort.n_subjects != self.n_subjects:
            raise StoreError("cohort changed since store generation (covariate fingerprint mismatch)")
        if params is not None and params != self.params:
            raise StoreError("minimization parameters differ from those used to generate the store")


def pregenerate(cohort: Cohort, params: MinimizationParams, n: int, master_seed: int, path,
                chunk: int = 10_000, extra_metadata: dict | None = None) -> ReplicateStore:
    """Draw replicates ``0 .. n-1`` for ``cohort`` and write them to ``path``."""
    if n <= 0:
        raise ValueError("number of replicates must be positive")
    path = Path(path)
    rnd = BatchRandomizer(cohort, params)
    with open(path, "wb") as fh:
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, n, cohort.n_subjects, cohort.n_arms)
        fh.write(header.ljust(HEADER_SIZE, b"\0"))
        for start in range(0, n, chunk):
            fh.write(rnd.batch(master_seed, start, min(chunk, n - start)).tobytes())
    meta = {
        "format_version": FORMAT_VERSION,
        "master_seed": int(master_seed),
        "n_replicates": int(n),
        "n_subjects": cohort.n_subjects,
        "n_arms": cohort.n_arms,
        "fingerprint": covariate_fingerprint(cohort),
        "minimization": params.to_dict(),
    }
    if extra_metadata:
        meta.update(extra_metadata)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ReplicateStore.open(path)
