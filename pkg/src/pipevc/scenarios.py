"""Building stub-pipeline histories inside a repository.

:class:`PipelineBuilder` keeps the current stub configuration of every slot
per branch, evolves slots (with optional schema changes cascading to the
successors that must adapt), runs the pipeline and commits it.
"""

from __future__ import annotations

import dataclasses
import itertools
from pathlib import Path
from typing import Mapping, Sequence

from pipevc.execution import Executor, run_pipeline
from pipevc.model import MASTER, ComponentKind, ComponentVersion, PipelineSpec
from pipevc.stubs import StubConfig, make_stub_component, synthetic_csv
from pipevc.vcs import Commit, Repository

BASE_HEADERS = ("id", "age", "sex", "diag")


def run_and_commit(repo: Repository, branch: str, bindings: Mapping[str, ComponentVersion], executor: Executor) -> Commit:
    """Execute ``bindings`` (reusing the branch head's unchanged prefix) and commit."""
    head = repo.head(branch)
    previous = None
    if head is not None:
        c = repo.get_commit(head)
        previous = (c.bindings, c.outputs, c.scores)
    run = run_pipeline(repo.spec, bindings, executor, previous)
    return repo.commit_pipeline(branch, bindings, run)


class PipelineBuilder:
    """Drive a chain-shaped stub pipeline ``dataset -> transforms... -> model``."""

    def __init__(
        self,
        repo: Repository,
        slots: Sequence[str],
        *,
        costs: Mapping[str, float] | None = None,
        payload_bytes: Mapping[str, int] | None = None,
        dataset_bytes: int = 2048,
        score_fn: str = "hash",
        score_seed: int = 0,
        score_jitter: float = 0.05,
        executor: Executor | None = None,
        transforms: Mapping[str, str] | None = None,
    ):
        self.repo = repo
        self.slots = tuple(slots)
        spec = PipelineSpec.chain(
            "pipeline",
            [(self.slots[0], ComponentKind.DATASET)] + [(s, ComponentKind.LIBRARY) for s in self.slots[1:]],
        )
        if repo.spec is None:
            repo.set_spec(spec)
        self.spec = repo.spec
        self.executor = executor if executor is not None else Executor(repo.store)
        self.costs = dict(costs or {})
        self.payload_bytes = dict(payload_bytes or {})
        self.dataset_bytes = dataset_bytes
        self.score = dict(score_fn=score_fn, score_seed=score_seed, score_jitter=score_jitter)
        self.transforms = dict(transforms or {})
        self._counters = {s: itertools.count() for s in self.slots}
        self.state: dict[str, dict[str, StubConfig]] = {}
        self.bound: dict[str, dict[str, ComponentVersion]] = {}
        self.log: list[tuple[str, tuple[str, ...]]] = []

    def _token(self, slot: str) -> str:
        return f"{slot}.{next(self._counters[slot])}"

    def _role(self, slot: str) -> str:
        if slot == self.slots[0]:
            return "dataset"
        return "model" if slot == self.slots[-1] else "transform"

    def _config(self, slot: str, input_headers, *, new_columns=(), dataset_seed=0) -> StubConfig:
        role = self._role(slot)
        token = self._token(slot)
        cfg = StubConfig(
            name=slot,
            role=role,
            token=token,
            cost_ms=self.costs.get(slot, 0.0),
            payload_bytes=self.payload_bytes.get(slot, 0),
            **self.score,
        )
        if role == "dataset":
            cfg.data = synthetic_csv(BASE_HEADERS, self.dataset_bytes, seed=dataset_seed)
        else:
            cfg.input_headers = tuple(input_headers)
            if role == "transform":
                cols = tuple(new_columns)
                if not cols and self.transforms.get(slot, "append-column") == "append-column":
                    cols = (f"{slot}_f",)
                if cols:
                    cfg.transform, cfg.new_columns = "append-column", cols
        return cfg

    def _commit(self, branch: str, configs: dict[str, StubConfig], changed: Sequence[str]) -> Commit:
        prev_bound = self.bound.get(branch, {})
        bindings = dict(prev_bound)
        for slot in changed:
            files, modes = make_stub_component(configs[slot])
            bindings[slot] = self.repo.register_component(files, modes, branch=branch, prev=prev_bound.get(slot))
        commit = run_and_commit(self.repo, branch, bindings, self.executor)
        self.state[branch] = configs
        self.bound[branch] = bindings
        self.log.append((branch, tuple(changed)))
        return commit

    def initial(self, branch: str = MASTER) -> Commit:
        configs = {}
        headers = None
        for slot in self.slots:
            cfg = self._config(slot, headers)
            configs[slot] = cfg
            headers = cfg.output_headers()
        return self._commit(branch, configs, self.slots)

    def branch(self, name: str, source: str = MASTER) -> None:
        self.repo.create_branch(name, self.repo.head(source))
        self.state[name] = dict(self.state[source])
        self.bound[name] = dict(self.bound[source])

    def update(self, branch: str, slot: str, schema_change: bool = False) -> Commit:
        """Commit a new version of ``slot``; successors adapt to any schema change."""
        configs = dict(self.state[branch])
        old = configs[slot]
        i = self.slots.index(slot)
        if self._role(slot) == "dataset":
            new = self._config(slot, None, dataset_seed=int(self._token(slot).split(".")[1]) + 1000)
        else:
            cols = old.new_columns
            if schema_change:
                cols = tuple(cols) + (f"{slot}_s{next(self._counters[slot])}",)
            new = self._config(slot, old.input_headers, new_columns=cols)
        new.schema_changed = new.output_headers() != old.output_headers()
        configs[slot] = new
        changed = [slot]
        headers = new.output_headers()
        for succ in self.slots[i + 1 :]:
            prev = configs[succ]
            if tuple(prev.input_headers) == tuple(headers):
                break
            adapted = self._config(succ, headers, new_columns=self._own_columns(prev))
            adapted.schema_changed = adapted.output_headers() != prev.output_headers()
            configs[succ] = adapted
            changed.append(succ)
            headers = adapted.output_headers()
        return self._commit(branch, configs, changed)

    @staticmethod
    def _own_columns(cfg: StubConfig) -> tuple[str, ...]:
        return tuple(cfg.new_columns) if cfg.transform == "append-column" else ()


FIG_SLOTS = ("dataset", "data_cleanse", "feature_extract", "cnn")


def figure_history(path, *, conflict: bool = True, **builder_kwargs) -> PipelineBuilder:
    """The running example: branch ``dev`` evolves CNN, feature extraction and cleansing.

    With ``conflict`` the master branch also gets a CNN update (committed last,
    so it becomes CNN 0.4); without it master is untouched and the merge is a
    fast-forward.
    """
    repo = Repository.init(path)
    builder_kwargs.setdefault("transforms", {"data_cleanse": "identity"})
    b = PipelineBuilder(repo, FIG_SLOTS, **builder_kwargs)
    b.initial()
    b.branch("dev")
    b.update("dev", "cnn")
    b.update("dev", "feature_extract", schema_change=True)
    b.update("dev", "cnn")
    b.update("dev", "data_cleanse")
    if conflict:
        b.update(MASTER, "cnn")
    return b


def random_history(path, rng, *, max_slots: int = 4, max_versions: int = 4, p_schema: float = 0.3, **kwargs) -> PipelineBuilder:
    """A random two-branch history whose search spaces stay within ``max_versions``."""
    n_slots = int(rng.integers(2, max_slots + 1))
    slots = [f"s{i}" for i in range(n_slots)]
    repo = Repository.init(path)
    b = PipelineBuilder(repo, slots, **kwargs)
    b.initial()
    b.branch("dev")
    budget = max_versions - 1
    n_master = int(rng.integers(0, budget + 1))
    n_dev = int(rng.integers(1, budget - n_master + 1)) if budget - n_master >= 1 else 0
    for branch, count in (("dev", n_dev), (MASTER, n_master)):
        for _ in range(count):
            slot = slots[int(rng.integers(0, n_slots))]
            change = slot not in (slots[0], slots[-1]) and rng.random() < p_schema
            b.update(branch, slot, schema_change=change)
    return b
