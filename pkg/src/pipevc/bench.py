"""Desk-scale benchmarks: linear versioning and non-linear merge strategies.

Histories are generated from a seeded RNG over stub pipelines, so with
virtual-time executors every curve is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
import shutil
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from pipevc.errors import BadConfig
from pipevc.execution import DEFAULT_BANDWIDTH, Executor, MetricsLedger, RunStats, run_pipeline
from pipevc.mergex import metric_merge
from pipevc.model import MASTER
from pipevc.scenarios import PipelineBuilder
from pipevc.store import FolderStore
from pipevc.vcs import Repository

LINEAR_SLOTS = ("dataset", "preprocess", "model")
CSV_FIELDS = ("system", "iteration", "cet_s", "cst_s", "cpt_s", "css_bytes")
MERGE_STRATEGIES = ("full_enum", "compat_only", "pruned_reuse")


@dataclass
class HistoryConfig:
    iterations: int = 10
    p_update_preproc: float = 0.4
    p_update_model: float = 0.6
    p_schema_change: float = 0.1
    seed: int = 0
    costs: dict = field(default_factory=lambda: {"dataset": 0.0, "preprocess": 200.0, "model": 50.0})
    dataset_bytes: int = 1 << 20
    payload_bytes: dict = field(default_factory=lambda: {"model": 10 * 1024})
    bandwidth: float = DEFAULT_BANDWIDTH
    score_fn: str = "hash"
    # non-linear experiment: commits on each branch after the fork
    head_updates: int = 1
    merge_updates: int = 3

    def __post_init__(self):
        for name in ("p_update_preproc", "p_update_model", "p_schema_change"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise BadConfig(f"{name} must lie in [0, 1], got {p}")
        if abs(self.p_update_preproc + self.p_update_model - 1.0) > 1e-9:
            raise BadConfig("update probabilities must sum to 1")
        if self.iterations < 0 or self.head_updates < 0 or self.merge_updates < 0:
            raise BadConfig("iteration counts must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> HistoryConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise BadConfig(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> HistoryConfig:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise BadConfig(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)


@dataclass(frozen=True)
class CurvePoint:
    system: str
    iteration: int
    cet: float
    cst: float
    css: int

    @property
    def cpt(self) -> float:
        return self.cet + self.cst

    @classmethod
    def from_ledger(cls, system: str, iteration: int, ledger: MetricsLedger) -> CurvePoint:
        s = ledger.snapshot()
        return cls(system, iteration, s["cet_s"], s["cst_s"], s["css_bytes"])


@dataclass
class HistoryStep:
    iteration: int
    branch: str
    slot: str
    schema_change: bool
    changed: tuple[str, ...]
    commit: object


def curves_to_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for p in points:
        w.writerow([p.system, p.iteration, repr(p.cet), repr(p.cst), repr(p.cpt), p.css])
    return buf.getvalue()


def make_builder(repo: Repository, config: HistoryConfig, ledger: MetricsLedger | None = None) -> PipelineBuilder:
    executor = Executor(repo.store, ledger=ledger, bandwidth=config.bandwidth)
    return PipelineBuilder(
        repo,
        LINEAR_SLOTS,
        costs=config.costs,
        payload_bytes=config.payload_bytes,
        dataset_bytes=config.dataset_bytes,
        score_fn=config.score_fn,
        score_seed=config.seed,
        executor=executor,
    )


def sample_updates(config: HistoryConfig, n: int, rng: np.random.Generator) -> list[tuple[str, bool]]:
    """Draw ``n`` (slot, schema_change) pairs; only pre-processing changes schemas."""
    out = []
    for _ in range(n):
        slot = "preprocess" if rng.random() < config.p_update_preproc else "model"
        change = bool(rng.random() < config.p_schema_change) if slot == "preprocess" else False
        out.append((slot, change))
    return out


def generate_history(
    builder: PipelineBuilder,
    config: HistoryConfig,
    branch: str = MASTER,
    iterations: int | None = None,
    rng: np.random.Generator | None = None,
    on_commit=None,
) -> list[HistoryStep]:
    """Apply seeded component updates to ``branch``, one commit per iteration.

    Schema changes cascade into compatible successor updates within the same
    commit, so every commit passes the compatibility check.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    n = config.iterations if iterations is None else iterations
    steps = []
    for i, (slot, change) in enumerate(sample_updates(config, n, rng), start=1):
        commit = builder.update(branch, slot, schema_change=change)
        step = HistoryStep(i, branch, slot, change, builder.log[-1][1], commit)
        steps.append(step)
        if on_commit is not None:
            on_commit(step)
    return steps


def _payload_bytes(repo: Repository, versions) -> int:
    return sum(repo.store.manifest(cv.payload).total_size for cv in versions)


def linear_experiment(config: HistoryConfig, workdir=None) -> tuple[list[CurvePoint], list[HistoryStep]]:
    """Run one seeded history under the folder baseline and the versioned store.

    The baseline re-executes every slot each iteration and archives all
    payloads and outputs into fresh folders. The versioned system only runs
    slots whose version or upstream changed and stores into the dedup store.
    """
    tmp = tempfile.mkdtemp(prefix="pipevc-linear-", dir=workdir)
    try:
        repo = Repository.init(Path(tmp) / "repo")
        ours = MetricsLedger()
        builder = make_builder(repo, config, ours)
        base_ledger = MetricsLedger()
        folder = FolderStore()
        baseline = Executor(folder, payload_store=repo.store, ledger=base_ledger, bandwidth=config.bandwidth)
        points: list[CurvePoint] = []

        def record(iteration: int, changed) -> None:
            bound = builder.bound[MASTER]
            new_payload = _payload_bytes(repo, [bound[s] for s in changed])
            ours.add(RunStats(0.0, new_payload / config.bandwidth, 0))
            # the baseline archives every payload again, then re-runs everything
            before = folder.stats().physical_bytes
            for cv in bound.values():
                folder.put_object(repo.store.get_object(cv.payload), "payload")
            size = folder.stats().physical_bytes - before
            base_ledger.add(RunStats(0.0, size / config.bandwidth, size))
            run_pipeline(repo.spec, bound, baseline)
            points.append(CurvePoint.from_ledger("baseline", iteration, base_ledger))
            p = CurvePoint.from_ledger("versioned", iteration, ours)
            points.append(CurvePoint("versioned", iteration, p.cet, p.cst, repo.store.stats().physical_bytes))

        builder.initial()
        record(0, LINEAR_SLOTS)
        steps = generate_history(builder, config, on_commit=lambda st: record(st.iteration, st.changed))
        return points, steps
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def expected_linear_cet(config: HistoryConfig, steps) -> tuple[float, float]:
    """Closed-form (baseline, versioned) CET for a logged update sequence."""
    full = sum(config.costs.get(s, 0.0) for s in LINEAR_SLOTS) / 1000.0
    ours = full
    for st in steps:
        first = min(LINEAR_SLOTS.index(s) for s in st.changed)
        ours += sum(config.costs.get(s, 0.0) for s in LINEAR_SLOTS[first:]) / 1000.0
    return full * (len(steps) + 1), ours


def build_two_branch(repo: Repository, config: HistoryConfig, ledger: MetricsLedger | None = None):
    """Base commit, fork ``dev``, then seeded updates on both branches."""
    rng = np.random.default_rng(config.seed)
    builder = make_builder(repo, config, ledger)
    builder.initial()
    builder.branch("dev")
    steps = generate_history(builder, config, "dev", config.merge_updates, rng)
    steps += generate_history(builder, config, MASTER, config.head_updates, rng)
    return builder, steps


def nonlinear_experiment(config: HistoryConfig, strategies=MERGE_STRATEGIES, workdir=None):
    """Merge the same two-branch history under each strategy.

    Returns ``(points, reports)``. Each strategy works on its own copy of the
    repository; its curve starts from the shared history cost and adds the
    merge cost as the final iteration.
    """
    tmp = Path(tempfile.mkdtemp(prefix="pipevc-nonlinear-", dir=workdir))
    try:
        history = MetricsLedger()
        repo = Repository.init(tmp / "repo")
        _, steps = build_two_branch(repo, config, history)
        base = history.snapshot()
        points, reports = [], {}
        last = len(steps) + 1
        for strategy in strategies:
            copy = tmp / f"merge-{strategy}"
            shutil.copytree(repo.path, copy)
            r = Repository.open(copy)
            ledger = MetricsLedger()
            ledger.add(RunStats(base["cet_s"], base["cst_s"], base["css_bytes"]))
            points.append(CurvePoint.from_ledger(strategy, 0, ledger))
            executor = Executor(r.store, ledger=ledger, bandwidth=config.bandwidth)
            _, report = metric_merge(r, MASTER, "dev", strategy=strategy, executor=executor)
            points.append(CurvePoint.from_ledger(strategy, last, ledger))
            reports[strategy] = report
        return points, reports
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
