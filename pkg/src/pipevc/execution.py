"""Running pipeline components and accounting for their cost.

Components follow a small process protocol::

    <exe> --input-dir D_in --output-dir D_out --meta M

and must leave ``data.*`` and ``schema.txt`` (one header per line, LF
terminated) in ``D_out``, plus an optional ``score.txt``. Stub payloads
(those shipping ``stub.cfg``) can instead be run in-process in virtual-time
mode, where the configured cost is reported instead of slept.
"""

from __future__ import annotations

import math
import subprocess
import sys
import tempfile
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from pipevc import _stubmain
from pipevc.artifacts import pack_files, read_tree, unpack_files, write_tree
from pipevc.errors import (
    ComponentRunFailure,
    MissingOutput,
    NonZeroExit,
    OutOfDomain,
    SchemaMismatch,
)
from pipevc.model import ComponentKind, ComponentMeta, ComponentVersion, PipelineSpec, schema_hash
from pipevc.store import ObjectManifest

METAFILE = "component.meta"
DEFAULT_METRIC = "score"
# virtual storage throughput (bytes/s) used to price materialize + archive
DEFAULT_BANDWIDTH = 200e6


@dataclass(frozen=True)
class RunStats:
    execution_time: float = 0.0
    storage_time: float = 0.0
    storage_bytes_delta: int = 0

    @property
    def pipeline_time(self) -> float:
        return self.execution_time + self.storage_time

    def __add__(self, other: RunStats) -> RunStats:
        return RunStats(
            self.execution_time + other.execution_time,
            self.storage_time + other.storage_time,
            self.storage_bytes_delta + other.storage_bytes_delta,
        )


class MetricsLedger:
    """Cumulative execution/storage/pipeline time and storage size."""

    def __init__(self):
        self._lock = threading.Lock()
        self.cet = 0.0
        self.cst = 0.0
        self.css = 0

    @property
    def cpt(self) -> float:
        return self.cet + self.cst

    def add(self, stats: RunStats) -> None:
        if stats.execution_time < 0 or stats.storage_time < 0 or stats.storage_bytes_delta < 0:
            raise ValueError(f"negative run statistics: {stats}")
        with self._lock:
            self.cet += stats.execution_time
            self.cst += stats.storage_time
            self.css += stats.storage_bytes_delta

    def snapshot(self) -> dict:
        with self._lock:
            return {"cet_s": self.cet, "cst_s": self.cst, "cpt_s": self.cet + self.cst, "css_bytes": self.css}


@dataclass(frozen=True)
class ArtifactRef:
    """A stored component output plus the schema digest of its contents."""

    manifest: ObjectManifest
    schema_digest: str

    @property
    def id(self) -> str:
        return self.manifest.id

    @property
    def size(self) -> int:
        return self.manifest.total_size


@dataclass(frozen=True)
class RunOutcome:
    artifact: ArtifactRef
    stats: RunStats
    scores: dict = field(default_factory=dict)


def parse_scores(text: str, metric: str = DEFAULT_METRIC) -> dict[str, float]:
    """``score.txt`` holds either one decimal or ``name=value`` lines."""
    scores = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" in line:
            k, _, v = line.partition("=")
            scores[k.strip()] = float(v)
        else:
            scores[metric] = float(line)
    return scores


def speedup(p: float, k: float) -> float:
    """Pipeline speedup when a fraction ``p`` of it is accelerated ``k`` times."""
    if not (0.0 <= p <= 1.0) or not k >= 1.0 or math.isinf(k):
        raise OutOfDomain(f"speedup needs 0 <= p <= 1 and finite k >= 1, got p={p}, k={k}")
    return 1.0 / ((1.0 - p) + p / k)


class Executor:
    """Runs component versions and archives their outputs.

    ``store`` receives outputs and serves inputs; payloads are read from
    ``payload_store`` (defaults to ``store``). ``mode`` is ``"virtual"``
    (stubs in-process, costs reported not slept, storage priced by
    ``bandwidth``) or ``"real"`` (everything as subprocesses, wall clock).
    """

    def __init__(
        self,
        store,
        payload_store=None,
        ledger: MetricsLedger | None = None,
        mode: str = "virtual",
        metric: str = DEFAULT_METRIC,
        bandwidth: float = DEFAULT_BANDWIDTH,
        workdir: str | None = None,
    ):
        if mode not in ("virtual", "real"):
            raise ValueError(f"unknown executor mode {mode!r}")
        self.store = store
        self.payload_store = payload_store if payload_store is not None else store
        self.ledger = ledger if ledger is not None else MetricsLedger()
        self.mode = mode
        self.metric = metric
        self.bandwidth = bandwidth
        self.workdir = workdir
        self.calls = 0
        self.calls_by_component: Counter = Counter()
        self._payloads: dict[str, tuple[dict, dict]] = {}

    def _payload(self, version: ComponentVersion) -> tuple[dict, dict, int]:
        cached = self._payloads.get(version.payload)
        blob_size = self.payload_store.manifest(version.payload).total_size
        if cached is None:
            cached = unpack_files(self.payload_store.get_object(version.payload))
            self._payloads[version.payload] = cached
        return cached[0], cached[1], blob_size

    def run_component(self, version: ComponentVersion, inputs: Sequence[ArtifactRef] = ()) -> RunOutcome:
        self.calls += 1
        self.calls_by_component[version.id] += 1
        t0 = time.perf_counter()
        files, modes, payload_size = self._payload(version)
        input_maps = [unpack_files(self.store.get_object(ref.manifest))[0] for ref in inputs]
        read_bytes = payload_size + sum(ref.size for ref in inputs)
        t_materialized = time.perf_counter()

        meta = ComponentMeta.loads(files[METAFILE].decode()) if METAFILE in files else None
        if _stubmain.CONFIG_NAME in files and self.mode == "virtual":
            cfg = _stubmain.parse_config(files[_stubmain.CONFIG_NAME].decode())
            try:
                out = _stubmain.execute(cfg, input_maps, files)
            except _stubmain.StubError as exc:
                raise NonZeroExit(f"{version}: {exc}", 3, str(exc)) from None
            exec_time = float(cfg.get("cost_ms", "0")) / 1000.0
        elif meta is not None and meta.exec:
            out, exec_time = self._run_process(version, meta, files, modes, input_maps)
        elif version.kind is ComponentKind.DATASET:
            out, exec_time = _materialize_dataset(files), 0.0
        else:
            raise MissingOutput(f"{version} has no executable")

        if "schema.txt" not in out:
            raise MissingOutput(f"{version} wrote no schema.txt")
        if not any(name.startswith("data.") for name in out):
            raise MissingOutput(f"{version} wrote no data.* file")
        headers = [h for h in out["schema.txt"].decode("utf-8").split("\n") if h]
        produced = schema_hash(headers)
        if produced != version.output_schema_digest:
            raise SchemaMismatch(
                f"{version} produced schema {produced[:12]} but declares {version.output_schema_digest[:12]}"
            )
        scores = parse_scores(out["score.txt"].decode(), self.metric) if "score.txt" in out else {}

        t_archive = time.perf_counter()
        before = self.store.stats().physical_bytes
        blob = pack_files(out)
        manifest = self.store.put_object(blob, "output")
        delta = self.store.stats().physical_bytes - before
        t_done = time.perf_counter()

        if self.mode == "virtual":
            storage_time = (read_bytes + len(blob)) / self.bandwidth
        else:
            storage_time = (t_materialized - t0) + (t_done - t_archive)
        stats = RunStats(exec_time, storage_time, delta)
        self.ledger.add(stats)
        return RunOutcome(ArtifactRef(manifest, produced), stats, scores)

    def _run_process(self, version, meta, files, modes, input_maps):
        with tempfile.TemporaryDirectory(dir=self.workdir, prefix="pipevc-run-") as tmp:
            tmp = Path(tmp)
            payload_dir, in_dir, out_dir = tmp / "payload", tmp / "in", tmp / "out"
            write_tree(payload_dir, files, modes)
            out_dir.mkdir()
            in_dir.mkdir()
            if len(input_maps) == 1:
                write_tree(in_dir, input_maps[0])
            else:
                for i, m in enumerate(input_maps):
                    write_tree(in_dir / f"{i:02d}", m)
            exe = payload_dir / meta.exec
            cmd = [str(exe)]
            if files.get(meta.exec, b"").startswith(b"#!/usr/bin/env python"):
                cmd = [sys.executable, str(exe)]
            cmd += ["--input-dir", str(in_dir), "--output-dir", str(out_dir), "--meta", str(payload_dir / METAFILE)]
            start = time.perf_counter()
            try:
                proc = subprocess.run(cmd, capture_output=True, cwd=tmp)
            except OSError as exc:
                raise NonZeroExit(f"{version}: cannot start {meta.exec}: {exc}", -1, str(exc)) from None
            elapsed = time.perf_counter() - start
            if proc.returncode != 0:
                tail = proc.stderr.decode("utf-8", "replace")[-500:]
                raise NonZeroExit(f"{version} exited with {proc.returncode}: {tail.strip()}", proc.returncode, tail)
            out, _ = read_tree(out_dir)
            return out, elapsed


def _materialize_dataset(files: Mapping[str, bytes]) -> dict[str, bytes]:
    out = {name: data for name, data in files.items() if name.startswith("data.")}
    if "schema.txt" in files:
        out["schema.txt"] = files["schema.txt"]
    elif "data.csv" in files:
        header = files["data.csv"].split(b"\n", 1)[0].decode("utf-8").split(",")
        out["schema.txt"] = "".join(h + "\n" for h in header).encode()
    return out


@dataclass(eq=False)
class Step:
    """A slot binding on a path to execute; tree nodes expose the same attributes."""

    slot: str
    component: ComponentVersion
    executed: bool = False
    output: ArtifactRef | None = None
    scores: dict | None = None
    run_count: int = 0
    failed: bool = False
    cost: float = 0.0


def execute_node_list(walking_path: Sequence, executor: Executor, spec: PipelineSpec) -> dict[str, ArtifactRef]:
    """Run every not-yet-executed node of a root-to-leaf path in order.

    Executed nodes are skipped and their recorded outputs reused. Each newly
    run node is marked executed with its output (and scores), so later paths
    sharing it skip it too. Returns the slot -> output map of the path.
    """
    outputs: dict[str, ArtifactRef] = {}
    for node in walking_path:
        if not node.executed:
            if node.failed:
                raise ComponentRunFailure(f"{node.component} failed earlier on this path")
            inputs = [outputs[p] for p in spec.ordered_predecessors(node.slot)]
            node.run_count += 1
            try:
                outcome = executor.run_component(node.component, inputs)
            except ComponentRunFailure:
                node.failed = True
                raise
            node.executed = True
            node.output = outcome.artifact
            node.cost = outcome.stats.pipeline_time
            if outcome.scores:
                node.scores = dict(outcome.scores)
        outputs[node.slot] = node.output
    return outputs


@dataclass
class PipelineRun:
    """Outputs, scores and costs of one full pipeline execution, ready to commit."""

    outputs: dict[str, ArtifactRef]
    scores: dict[str, float]
    stats: RunStats
    store: object
    executed_slots: tuple[str, ...] = ()


def run_pipeline(
    spec: PipelineSpec,
    bindings: Mapping[str, ComponentVersion],
    executor: Executor,
    previous: tuple[Mapping[str, ComponentVersion], Mapping[str, ArtifactRef], Mapping[str, float]] | None = None,
) -> PipelineRun:
    """Execute a bound pipeline, reusing outputs from ``previous`` where valid.

    A slot reuses the previous output when its version is unchanged and all
    of its predecessors were reused as well.
    """
    prev_bind, prev_out, prev_scores = previous if previous is not None else ({}, {}, {})
    steps = []
    reused: set[str] = set()
    for slot in spec.order:
        cv = bindings[slot]
        step = Step(slot, cv)
        same = prev_bind.get(slot) == cv and slot in prev_out
        if same and all(p in reused for p in spec.predecessors(slot)):
            step.executed, step.output = True, prev_out[slot]
            reused.add(slot)
        steps.append(step)
    before = executor.ledger.snapshot()
    outputs = execute_node_list(steps, executor, spec)
    after = executor.ledger.snapshot()
    scores: dict[str, float] = {}
    if not any(step.scores for step in steps):
        scores.update(prev_scores)
    for step in steps:
        if step.scores:
            scores.update(step.scores)
    stats = RunStats(
        after["cet_s"] - before["cet_s"],
        after["cst_s"] - before["cst_s"],
        after["css_bytes"] - before["css_bytes"],
    )
    executed = tuple(s.slot for s in steps if s.run_count)
    return PipelineRun(outputs, scores, stats, executor.store, executed)


def total_stats(stats: Iterable[RunStats]) -> RunStats:
    total = RunStats()
    for s in stats:
        total = total + s
    return total
