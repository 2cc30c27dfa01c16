"""Deterministic stub components used by tests, benchmarks and demos.

A stub payload is a normal component directory: ``component.meta``, a
``stub.cfg`` describing the behaviour, the ``run`` executable (a copy of
``_stubmain.py``), filler ``weights.bin`` bytes and, for datasets,
``data.csv``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from pipevc import _stubmain
from pipevc.artifacts import EXEC_MODE, FILE_MODE, write_tree
from pipevc.errors import BadConfig
from pipevc.model import ANY_SCHEMA, ComponentKind, ComponentMeta, schema_hash

METAFILE = "component.meta"
EXECUTABLE = "run"

_STUB_SOURCE = Path(_stubmain.__file__).read_bytes()

ROLES = ("dataset", "transform", "model")
TRANSFORMS = ("identity", "append-column")
MODEL_HEADERS = ("prediction",)


def synthetic_csv(headers: Sequence[str], n_bytes: int, seed: int = 0) -> bytes:
    """A CSV with ``headers`` and pseudo-random integer rows, roughly ``n_bytes`` long."""
    rng = random.Random(seed)
    lines = [",".join(headers)]
    size = len(lines[0]) + 1
    row = 0
    while size < n_bytes:
        line = ",".join([str(row)] + [str(rng.randrange(100000)) for _ in headers[1:]])
        lines.append(line)
        size += len(line) + 1
        row += 1
    return ("\n".join(lines) + "\n").encode()


@dataclass
class StubConfig:
    """Behaviour of one stub component version.

    ``token`` must be unique per version; it is what model stubs hash into
    their scores and what append-column stubs use to salt generated values.
    """

    name: str
    role: str
    token: str
    cost_ms: float = 0.0
    transform: str = "identity"
    new_columns: tuple[str, ...] = ()
    input_headers: tuple[str, ...] | None = None
    headers: tuple[str, ...] = ()
    data: bytes | None = None
    score_fn: str = "hash"
    score_seed: int = 0
    score_jitter: float = 0.05
    score_base: float = 0.0
    score_scale: float = 1.0
    payload_bytes: int = 0
    schema_changed: bool = False
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.role not in ROLES:
            raise BadConfig(f"unknown role {self.role!r}")
        if self.cost_ms < 0 or self.payload_bytes < 0:
            raise BadConfig("cost_ms and payload_bytes must be non-negative")
        if self.transform not in TRANSFORMS:
            raise BadConfig(f"unknown transform {self.transform!r}")
        if self.score_fn not in ("hash", "additive"):
            raise BadConfig(f"unknown score_fn {self.score_fn!r}")
        if not self.token or "\n" in self.token:
            raise BadConfig("token must be a non-empty single line")
        if self.role == "dataset":
            if self.data is None and not self.headers:
                raise BadConfig("dataset stubs need data or headers")
        elif self.role == "transform" and self.input_headers is None:
            raise BadConfig("transform stubs need input_headers to derive their output schema")
        if self.transform == "append-column" and not self.new_columns:
            raise BadConfig("append-column needs new_columns")

    @property
    def kind(self) -> ComponentKind:
        return ComponentKind.DATASET if self.role == "dataset" else ComponentKind.LIBRARY

    def dataset_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        return (",".join(self.headers) + "\n").encode()

    def output_headers(self) -> tuple[str, ...]:
        if self.role == "dataset":
            return tuple(self.dataset_bytes().split(b"\n", 1)[0].decode().split(","))
        if self.role == "model":
            return MODEL_HEADERS
        cols = self.new_columns if self.transform == "append-column" else ()
        return tuple(self.input_headers) + tuple(cols)

    @property
    def input_schema(self) -> str:
        if self.role == "dataset" or self.input_headers is None:
            return ANY_SCHEMA
        return schema_hash(self.input_headers)

    @property
    def output_schema(self) -> str:
        return schema_hash(self.output_headers())


def make_stub_component(config: StubConfig) -> tuple[dict[str, bytes], dict[str, int]]:
    """Build the payload file map (and file modes) for a stub component."""
    config.validate()
    meta = ComponentMeta(
        name=config.name,
        kind=config.kind,
        schema_changed=config.schema_changed,
        output_schema=config.output_schema,
        input_schema=config.input_schema,
        exec=EXECUTABLE,
    )
    cfg_lines = {
        "role": config.role,
        "token": config.token,
        "cost_ms": repr(float(config.cost_ms)),
        "transform": config.transform,
        "new_columns": ",".join(config.new_columns),
        "salt": config.token,
        "input_schema": config.input_schema,
        "score_fn": config.score_fn,
        "score_seed": str(config.score_seed),
        "score_jitter": repr(float(config.score_jitter)),
    }
    if (config.score_base, config.score_scale) != (0.0, 1.0):
        cfg_lines["score_base"] = repr(float(config.score_base))
        cfg_lines["score_scale"] = repr(float(config.score_scale))
    cfg_lines.update({k: str(v) for k, v in config.extra.items()})
    files = {
        METAFILE: meta.dumps().encode(),
        _stubmain.CONFIG_NAME: "".join(f"{k} = {v}\n" for k, v in cfg_lines.items()).encode(),
        EXECUTABLE: _STUB_SOURCE,
    }
    modes = {name: FILE_MODE for name in files}
    modes[EXECUTABLE] = EXEC_MODE
    if config.payload_bytes:
        rng = random.Random(f"weights:{config.token}")
        files["weights.bin"] = rng.randbytes(config.payload_bytes)
        modes["weights.bin"] = FILE_MODE
    if config.role == "dataset":
        files["data.csv"] = config.dataset_bytes()
        modes["data.csv"] = FILE_MODE
    return files, modes


def write_stub_dir(path, config: StubConfig) -> Path:
    files, modes = make_stub_component(config)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_tree(path, files, modes)
    return path
