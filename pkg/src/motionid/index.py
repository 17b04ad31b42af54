"""Exact Euclidean k-NN over user-labeled reference embeddings.

Enrollment only appends rows, so adding a user never touches the model or
the entries of other users.  Queries use a blocked squared-distance scan to
shortlist candidates, then recompute exact distances for the shortlist and
order by (distance, insertion order).
"""

from __future__ import annotations

import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import atomic_write
from .errors import (ChecksumError, EmptyIndexError, FileFormatError, NotFoundError, ShapeError,
                     TruncatedFileError, VersionError)

INDEX_MAGIC = b"MKIX"
INDEX_VERSION = 1


@dataclass(frozen=True)
class Neighbor:
    user_id: str
    distance: float
    position: int  # insertion position of the entry


class ReferenceIndex:
    """Append-only (per user) store of reference embeddings.

    Readers and writers are serialized with a lock, so a query never sees a
    half-applied enroll or remove.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ShapeError("index dimension must be >= 1")
        self.dim = int(dim)
        self._vectors = np.empty((0, self.dim), dtype=np.float32)
        self._users = np.empty(0, dtype=np.int64)      # index into _names
        self._offsets = np.empty(0, dtype=np.int64)
        self._size = 0
        self._names: list[str] = []
        self._name_ids: dict[str, int] = {}
        self._lock = threading.RLock()

    # -- bookkeeping ---------------------------------------------------------

    def __len__(self) -> int:
        return self._size

    @property
    def users(self) -> list[str]:
        with self._lock:
            present = np.unique(self._users[:self._size])
            return sorted(self._names[i] for i in present)

    def counts(self) -> dict[str, int]:
        with self._lock:
            ids, n = np.unique(self._users[:self._size], return_counts=True)
            return {self._names[i]: int(c) for i, c in zip(ids, n)}

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors[:self._size]

    @property
    def user_labels(self) -> list[str]:
        return [self._names[i] for i in self._users[:self._size]]

    @property
    def offsets(self) -> np.ndarray:
        return self._offsets[:self._size]

    def _grow(self, extra: int) -> None:
        need = self._size + extra
        cap = len(self._vectors)
        if need <= cap:
            return
        new_cap = max(need, 2 * cap, 64)
        vec = np.empty((new_cap, self.dim), dtype=np.float32)
        vec[:self._size] = self._vectors[:self._size]
        users = np.empty(new_cap, dtype=np.int64)
        users[:self._size] = self._users[:self._size]
        offs = np.empty(new_cap, dtype=np.int64)
        offs[:self._size] = self._offsets[:self._size]
        self._vectors, self._users, self._offsets = vec, users, offs

    # -- mutation ------------------------------------------------------------

    def enroll(self, user_id: str, embeddings, offsets=None) -> "ReferenceIndex":
        emb = np.asarray(embeddings, dtype=np.float32)
        if emb.ndim == 1:
            emb = emb[None, :]
        if emb.ndim != 2 or emb.shape[1] != self.dim:
            raise ShapeError(f"expected embeddings of dimension {self.dim}, got shape {emb.shape}")
        n = len(emb)
        offs = np.arange(n) if offsets is None else np.asarray(offsets, dtype=np.int64)
        if len(offs) != n:
            raise ShapeError("offsets and embeddings differ in length")
        with self._lock:
            uid = self._name_ids.get(user_id)
            if uid is None:
                uid = self._name_ids[user_id] = len(self._names)
                self._names.append(user_id)
            self._grow(n)
            s = self._size
            self._vectors[s:s + n] = emb
            self._users[s:s + n] = uid
            self._offsets[s:s + n] = offs
            self._size += n
        return self

    def remove_user(self, user_id: str) -> "ReferenceIndex":
        with self._lock:
            uid = self._name_ids.get(user_id)
            users = self._users[:self._size]
            if uid is None or not np.any(users == uid):
                raise NotFoundError(f"user {user_id!r} is not enrolled")
            keep = users != uid
            self._vectors = self._vectors[:self._size][keep].copy()
            self._users = users[keep].copy()
            self._offsets = self._offsets[:self._size][keep].copy()
            self._size = int(keep.sum())
        return self

    # -- queries -------------------------------------------------------------

    def search(self, queries, k: int, block: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Batched exact k-NN.

        Returns ``(positions, distances)`` of shape ``(Q, min(k, size))``;
        positions refer to insertion order, rows are sorted by
        (distance, position).
        """
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        if q.shape[1] != self.dim:
            raise ShapeError(f"query dimension {q.shape[1]} != index dimension {self.dim}")
        if k < 1:
            raise ValueError("k must be >= 1")
        with self._lock:
            if self._size == 0:
                raise EmptyIndexError("cannot query an empty index")
            ref32 = self._vectors[:self._size]
            ref = ref32.astype(np.float64)
            kk = min(k, self._size)
            ref_sq = np.einsum("ij,ij->i", ref, ref)
            out_pos = np.empty((len(q), kk), dtype=np.int64)
            out_dist = np.empty((len(q), kk), dtype=np.float64)
            ref_max = float(ref_sq.max())
            if block is None:
                block = int(max(1, min(4096, 10_000_000 // self._size)))
            for start in range(0, len(q), block):
                qb = q[start:start + block]
                q_sq = np.einsum("ij,ij->i", qb, qb)
                approx = q_sq[:, None] - 2.0 * (qb.astype(np.float32) @ ref32.T) + ref_sq[None, :]
                # float32 products carry relative error ~1e-7 of |q||r|
                slack = 1e-5 * (q_sq + ref_max) + 1e-12
                if kk < self._size:
                    kth = np.partition(approx, kk - 1, axis=1)[:, kk - 1]
                else:
                    kth = approx.max(axis=1)
                for i, row in enumerate(approx):
                    cand = np.flatnonzero(row <= kth[i] + 2 * slack[i])
                    diff = ref[cand] - qb[i]
                    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
                    order = np.lexsort((cand, d))[:kk]
                    out_pos[start + i] = cand[order]
                    out_dist[start + i] = d[order]
            return out_pos, out_dist

    def knn(self, query, k: int) -> list[Neighbor]:
        pos, dist = self.search(np.asarray(query, dtype=np.float64).reshape(1, -1), k)
        return [Neighbor(self._names[self._users[p]], float(d), int(p))
                for p, d in zip(pos[0], dist[0])]

    def labels_of(self, positions: np.ndarray) -> np.ndarray:
        """Map entry positions to indices into :attr:`names`."""
        return self._users[np.asarray(positions)]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        with self._lock:
            users = self._users[:self._size]
            present = sorted(set(int(u) for u in users), key=lambda u: u)
            remap = {u: i for i, u in enumerate(present)}
            names = [self._names[u] for u in present]
            parts = [INDEX_MAGIC, struct.pack("<HIQ", INDEX_VERSION, self.dim, self._size),
                     struct.pack("<I", len(names))]
            for name in names:
                raw = name.encode("utf-8")
                parts.append(struct.pack("<I", len(raw)) + raw)
            entry = np.dtype([("user", "<u4"), ("offset", "<u4"), ("vec", "<f4", (self.dim,))])
            table = np.empty(self._size, dtype=entry)
            table["user"] = [remap[int(u)] for u in users]
            table["offset"] = self._offsets[:self._size]
            table["vec"] = self._vectors[:self._size]
            parts.append(table.tobytes())
        payload = b"".join(parts)
        return payload + struct.pack("<I", zlib.crc32(payload))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ReferenceIndex":
        head = 4 + struct.calcsize("<HIQ") + 4
        if len(data) < head + 4:
            raise TruncatedFileError("index file is truncated")
        if data[:4] != INDEX_MAGIC:
            raise FileFormatError("not an index file (bad magic)")
        version, dim, count = struct.unpack_from("<HIQ", data, 4)
        if version > INDEX_VERSION:
            raise VersionError(version, INDEX_VERSION)
        pos = 4 + struct.calcsize("<HIQ")
        (n_names,) = struct.unpack_from("<I", data, pos)
        pos += 4
        names = []
        for _ in range(n_names):
            if pos + 4 > len(data):
                raise TruncatedFileError("index file is truncated in the user table")
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            names.append(data[pos:pos + length].decode("utf-8", errors="replace"))
            pos += length
        entry = np.dtype([("user", "<u4"), ("offset", "<u4"), ("vec", "<f4", (dim,))])
        expected = pos + count * entry.itemsize + 4
        if len(data) < expected:
            raise TruncatedFileError(f"index file is truncated ({len(data)} of {expected} bytes)")
        (crc,) = struct.unpack_from("<I", data, expected - 4)
        if zlib.crc32(data[:expected - 4]) != crc:
            raise ChecksumError("index file checksum mismatch")
        if len(data) != expected:
            raise FileFormatError("trailing bytes after index checksum")
        table = np.frombuffer(data, dtype=entry, count=count, offset=pos)
        index = cls(dim)
        index._names = names
        index._name_ids = {n: i for i, n in enumerate(names)}
        index._vectors = np.array(table["vec"], dtype=np.float32).reshape(count, dim)
        index._users = table["user"].astype(np.int64)
        index._offsets = table["offset"].astype(np.int64)
        index._size = int(count)
        return index

    def save(self, path: str | Path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceIndex":
        data = Path(path).read_bytes()
        return cls.from_bytes(data)


def enroll(index: ReferenceIndex, user_id: str, embeddings, offsets=None) -> ReferenceIndex:
    return index.enroll(user_id, embeddings, offsets)


def remove_user(index: ReferenceIndex, user_id: str) -> ReferenceIndex:
    return index.remove_user(user_id)


def knn(index: ReferenceIndex, query, k: int) -> list[Neighbor]:
    return index.knn(query, k)


def persist(index: ReferenceIndex, path: str | Path) -> None:
    index.save(path)


def load(path: str | Path) -> ReferenceIndex:
    return ReferenceIndex.load(path)
