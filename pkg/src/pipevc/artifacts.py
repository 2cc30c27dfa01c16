"""Deterministic packing of small file trees into a single byte string.

Payload directories and component outputs are stored as one object each.
Layout per entry: ``<name-len> <data-len> <mode>\\n<name><data>``, entries
sorted by name, so equal trees always pack to equal bytes.
"""

from __future__ import annotations

import os
import stat
from pathlib import Path
from typing import Mapping

EXEC_MODE = 0o755
FILE_MODE = 0o644


def pack_files(files: Mapping[str, bytes], modes: Mapping[str, int] | None = None) -> bytes:
    modes = modes or {}
    parts = []
    for name in sorted(files):
        data = files[name]
        raw = name.encode("utf-8")
        mode = modes.get(name, FILE_MODE)
        parts.append(b"%d %d %o\n" % (len(raw), len(data), mode))
        parts.append(raw)
        parts.append(data)
    return b"".join(parts)


def unpack_files(blob: bytes) -> tuple[dict[str, bytes], dict[str, int]]:
    files, modes = {}, {}
    pos = 0
    while pos < len(blob):
        nl = blob.index(b"\n", pos)
        nlen, dlen, mode = blob[pos:nl].split(b" ")
        pos = nl + 1
        name = blob[pos : pos + int(nlen)].decode("utf-8")
        pos += int(nlen)
        files[name] = blob[pos : pos + int(dlen)]
        modes[name] = int(mode, 8)
        pos += int(dlen)
    return files, modes


def read_tree(root: str | os.PathLike) -> tuple[dict[str, bytes], dict[str, int]]:
    """Read every regular file below ``root`` keyed by its posix relative path."""
    root = Path(root)
    files, modes = {}, {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            rel = path.relative_to(root).as_posix()
            files[rel] = path.read_bytes()
            modes[rel] = EXEC_MODE if path.stat().st_mode & stat.S_IXUSR else FILE_MODE
    return files, modes


def write_tree(root: str | os.PathLike, files: Mapping[str, bytes], modes: Mapping[str, int] | None = None) -> None:
    root = Path(root)
    modes = modes or {}
    for name, data in files.items():
        path = root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        os.chmod(path, modes.get(name, FILE_MODE))
