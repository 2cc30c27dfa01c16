"""Content-addressed object store with content-defined chunk deduplication.

Objects are cut into chunks with a buzhash rolling hash over a 48-byte
window; a chunk ends after byte ``i`` when the low 12 bits of the window hash
are all ones, subject to a 1 KiB minimum and 16 KiB maximum chunk size.
Chunks are keyed by their SHA-256, so identical chunks are stored once.

On disk::

    objects/<2-hex-prefix>/<chunk digest>
    manifests/<manifest digest>
    stats
"""

from __future__ import annotations

import hashlib
import io
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from pipevc.errors import IoFailure, MissingChunk

WINDOW = 48
BOUNDARY_MASK = 0xFFF
MIN_CHUNK = 1024
MAX_CHUNK = 16 * 1024

OBJECT_KINDS = ("payload", "output", "metafile", "commit")


def _make_table() -> np.ndarray:
    vals = [int.from_bytes(hashlib.sha256(bytes([b])).digest()[:4], "big") for b in range(256)]
    return np.array(vals, dtype=np.uint32)


BUZ_TABLE = _make_table()


def _rotl32(x: np.ndarray, r: int) -> np.ndarray:
    r %= 32
    if r == 0:
        return x
    return (x << np.uint32(r)) | (x >> np.uint32(32 - r))


def window_hashes(data: bytes) -> np.ndarray:
    """Buzhash of every full 48-byte window; element ``j`` covers ``data[j:j+48]``."""
    n = len(data)
    if n < WINDOW:
        return np.zeros(0, dtype=np.uint32)
    vals = BUZ_TABLE[np.frombuffer(data, dtype=np.uint8)]
    m = n - WINDOW + 1
    h = np.zeros(m, dtype=np.uint32)
    for k in range(WINDOW):
        # byte at offset (WINDOW-1-k) inside the window is rotated by k
        h ^= _rotl32(vals[WINDOW - 1 - k : WINDOW - 1 - k + m], k)
    return h


def chunk_boundaries(data: bytes) -> list[int]:
    """End offsets (exclusive) of each chunk of ``data``."""
    n = len(data)
    if n == 0:
        return []
    h = window_hashes(data)
    # a window starting at j ends at byte j+47, so a cut falls at j+48
    cuts = np.nonzero((h & BOUNDARY_MASK) == BOUNDARY_MASK)[0] + WINDOW
    ends = []
    start = 0
    while start < n:
        lo, hi = start + MIN_CHUNK, min(start + MAX_CHUNK, n)
        end = hi
        if lo <= hi:
            k = np.searchsorted(cuts, lo)
            if k < len(cuts) and cuts[k] <= hi:
                end = int(cuts[k])
        ends.append(end)
        start = end
    return ends


def chunk(data: bytes) -> list[bytes]:
    out, start = [], 0
    for end in chunk_boundaries(data):
        out.append(data[start:end])
        start = end
    return out


@dataclass(frozen=True)
class ObjectManifest:
    chunks: tuple[str, ...]
    total_size: int
    kind: str

    def dumps(self) -> str:
        return "\n".join([self.kind, str(self.total_size), *self.chunks]) + "\n"

    @classmethod
    def loads(cls, text: str) -> ObjectManifest:
        lines = text.splitlines()
        return cls(tuple(lines[2:]), int(lines[1]), lines[0])

    @property
    def id(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


@dataclass(frozen=True)
class StoreStats:
    physical_bytes: int = 0
    logical_bytes: int = 0
    chunk_count: int = 0
    object_count: int = 0

    def as_dict(self) -> dict:
        return {
            "physical_bytes": self.physical_bytes,
            "logical_bytes": self.logical_bytes,
            "chunk_count": self.chunk_count,
            "object_count": self.object_count,
        }


ManifestRef = Union[ObjectManifest, str]


def _read_all(stream: bytes | bytearray | BinaryIO) -> bytes:
    if isinstance(stream, (bytes, bytearray, memoryview)):
        return bytes(stream)
    try:
        return stream.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ObjectStore:
    """Deduplicating store. ``root=None`` keeps everything in memory.

    One writer per instance; reads may run concurrently with it.
    """

    dedup = True

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        self._lock = threading.Lock()
        self._chunks: dict[str, bytes] = {}
        self._manifests: dict[str, ObjectManifest] = {}
        self._chunk_sizes: dict[str, int] = {}
        self._stats = StoreStats()
        if self.root is not None:
            self._load()

    def _load(self) -> None:
        stats_file = self.root / "stats"
        if stats_file.exists():
            vals = dict(line.split("=", 1) for line in stats_file.read_text().split())
            self._stats = StoreStats(**{k: int(v) for k, v in vals.items()})

    def _chunk_path(self, cid: str) -> Path:
        return self.root / "objects" / cid[:2] / cid

    def has_chunk(self, cid: str) -> bool:
        if self.root is None:
            return cid in self._chunks
        return cid in self._chunk_sizes or self._chunk_path(cid).exists()

    def _write_chunk(self, cid: str, data: bytes) -> None:
        if self.root is None:
            self._chunks[cid] = data
        else:
            _atomic_write(self._chunk_path(cid), data)
        self._chunk_sizes[cid] = len(data)

    def _read_chunk(self, cid: str) -> bytes:
        if self.root is None:
            try:
                return self._chunks[cid]
            except KeyError:
                raise MissingChunk(cid) from None
        try:
            return self._chunk_path(cid).read_bytes()
        except FileNotFoundError:
            raise MissingChunk(cid) from None
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def put_object(self, stream: bytes | BinaryIO, kind: str = "output") -> ObjectManifest:
        if kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {kind!r}")
        data = _read_all(stream)
        pieces = chunk(data)
        ids = [hashlib.sha256(p).hexdigest() for p in pieces]
        manifest = ObjectManifest(tuple(ids), len(data), kind)
        with self._lock:
            new_bytes = new_chunks = 0
            try:
                for cid, piece in zip(ids, pieces):
                    if not self.has_chunk(cid):
                        self._write_chunk(cid, piece)
                        new_bytes += len(piece)
                        new_chunks += 1
                mid = manifest.id
                self._manifests[mid] = manifest
                if self.root is not None:
                    path = self.root / "manifests" / mid
                    if not path.exists():
                        _atomic_write(path, manifest.dumps().encode())
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
            s = self._stats
            self._stats = StoreStats(
                s.physical_bytes + new_bytes,
                s.logical_bytes + len(data),
                s.chunk_count + new_chunks,
                s.object_count + 1,
            )
            if self.root is not None:
                _atomic_write(
                    self.root / "stats",
                    "\n".join(f"{k}={v}" for k, v in self._stats.as_dict().items()).encode() + b"\n",
                )
        return manifest

    def manifest(self, ref: ManifestRef) -> ObjectManifest:
        if isinstance(ref, ObjectManifest):
            return ref
        m = self._manifests.get(ref)
        if m is not None:
            return m
        if self.root is not None:
            path = self.root / "manifests" / ref
            if path.exists():
                m = ObjectManifest.loads(path.read_text())
                self._manifests[ref] = m
                return m
        raise MissingChunk(f"unknown manifest {ref}")

    def has_object(self, ref: str) -> bool:
        try:
            self.manifest(ref)
        except MissingChunk:
            return False
        return True

    def get_object(self, ref: ManifestRef) -> bytes:
        m = self.manifest(ref)
        data = b"".join(self._read_chunk(cid) for cid in m.chunks)
        if len(data) != m.total_size:
            raise IoFailure(f"object size {len(data)} != manifest size {m.total_size}")
        return data

    def open_object(self, ref: ManifestRef) -> BinaryIO:
        return io.BytesIO(self.get_object(ref))

    def stats(self) -> StoreStats:
        return self._stats


class FolderStore:
    """Copy-everything store: every put is archived in its own folder.

    Mirrors the "separate folder per version" archiving used as the
    baseline; physical and logical sizes always grow together.
    """

    dedup = False

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        self._objects: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self._stats = StoreStats()

    def put_object(self, stream: bytes | BinaryIO, kind: str = "output") -> ObjectManifest:
        data = _read_all(stream)
        with self._lock:
            seq = self._stats.object_count
            folder = f"{seq:08d}"
            if self.root is None:
                self._objects[folder] = data
            else:
                try:
                    _atomic_write(self.root / folder / kind, data)
                except OSError as exc:
                    raise IoFailure(str(exc)) from exc
            s = self._stats
            self._stats = StoreStats(
                s.physical_bytes + len(data), s.logical_bytes + len(data), s.chunk_count + 1, seq + 1
            )
        return ObjectManifest((folder,), len(data), kind)

    def manifest(self, ref: ManifestRef) -> ObjectManifest:
        if isinstance(ref, ObjectManifest):
            return ref
        raise MissingChunk(f"folder store manifests are not addressable by id: {ref}")

    def get_object(self, ref: ManifestRef) -> bytes:
        m = self.manifest(ref)
        (folder,) = m.chunks
        if self.root is None:
            try:
                return self._objects[folder]
            except KeyError:
                raise MissingChunk(folder) from None
        try:
            return (self.root / folder / m.kind).read_bytes()
        except FileNotFoundError:
            raise MissingChunk(folder) from None

    def stats(self) -> StoreStats:
        return self._stats
