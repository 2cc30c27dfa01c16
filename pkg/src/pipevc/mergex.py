"""Metric-driven merge over the historical component search space.

The candidate pipelines of a merge are the root-to-leaf paths of a search
tree whose level ``i`` holds every version of slot ``i`` seen on either
branch since the common ancestor. Incompatible parent/child pairs are
pruned through a look-up table, and every node is executed at most once so
siblings reuse their parent's output.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from pipevc.errors import (
    ComponentRunFailure,
    EmptySpace,
    IncompatiblePipeline,
    MissingMetric,
    NotMergeable,
    OutOfRange,
)
from pipevc.execution import ArtifactRef, Executor, PipelineRun, RunStats, Step, execute_node_list
from pipevc.model import ComponentVersion, PipelineSpec, PipelineVersion, is_compatible

STRATEGIES = {
    "naive": "naive",
    "full": "full_enum",
    "full_enum": "full_enum",
    "pc": "compat_only",
    "compat_only": "compat_only",
    "pcpr": "pruned_reuse",
    "pruned_reuse": "pruned_reuse",
}


# -- search space -----------------------------------------------------------


@dataclass
class SearchSpace:
    """Per-slot versions, ordered by (schema ordinal, increment, branch)."""

    slots: tuple[str, ...]
    versions: dict[str, list[ComponentVersion]]

    @classmethod
    def from_commits(cls, slots: Sequence[str], commits: Iterable) -> SearchSpace:
        seen: dict[str, dict[str, ComponentVersion]] = {s: {} for s in slots}
        for c in commits:
            for s in slots:
                cv = c.bindings[s]
                seen[s][cv.id] = cv
        return cls(tuple(slots), {s: sorted(seen[s].values(), key=ComponentVersion.sort_key) for s in slots})

    def __getitem__(self, slot: str) -> list[ComponentVersion]:
        return self.versions[slot]

    def sizes(self) -> list[int]:
        return [len(self.versions[s]) for s in self.slots]


def merge_history(repo, head: str, merge_head: str) -> tuple:
    """Common ancestor and the commits on either side since it (ancestor included)."""
    lca = repo.common_ancestor(head, merge_head)
    seen = {}
    for c in repo.commits_since(lca.id, head) + repo.commits_since(lca.id, merge_head):
        seen[c.id] = c
    return lca, sorted(seen.values(), key=lambda c: c.sequence)


def component_search_space(repo, slot: str, head: str, merge_head: str) -> list[ComponentVersion]:
    _, commits = merge_history(repo, head, merge_head)
    return SearchSpace.from_commits([slot], commits)[slot]


def search_spaces(repo, head: str, merge_head: str) -> SearchSpace:
    _, commits = merge_history(repo, head, merge_head)
    return SearchSpace.from_commits(repo.spec.order, commits)


# -- tree -------------------------------------------------------------------


@dataclass(eq=False)
class TreeNode:
    component: ComponentVersion | None
    slot: str | None = None
    depth: int = 0
    parent: TreeNode | None = None
    children: list[TreeNode] = field(default_factory=list)
    executed: bool = False
    output: ArtifactRef | None = None
    scores: dict | None = None
    run_count: int = 0
    failed: bool = False
    cost: float = 0.0
    node_id: int = 0

    @property
    def is_root(self) -> bool:
        return self.component is None

    def path(self) -> list[TreeNode]:
        """Nodes from level 1 down to this node (virtual root excluded)."""
        out, node = [], self
        while node is not None and not node.is_root:
            out.append(node)
            node = node.parent
        return out[::-1]

    def iter_nodes(self) -> Iterator[TreeNode]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def leaves(self, depth: int | None = None) -> list[TreeNode]:
        return [n for n in self.iter_nodes() if not n.children and not n.is_root and (depth is None or n.depth == depth)]

    def nodes_at_level(self, level: int) -> list[TreeNode]:
        return [n for n in self.iter_nodes() if n.depth == level]


def build_search_tree(spaces: SearchSpace, n_f: int | None = None) -> TreeNode:
    """Cross-product tree: one child per version of the next slot under every node."""
    if n_f is None:
        n_f = len(spaces.slots)
    if n_f != len(spaces.slots):
        raise ValueError(f"n_f={n_f} but the search space has {len(spaces.slots)} slots")
    for s in spaces.slots:
        if not spaces[s]:
            raise EmptySpace(f"no versions for slot {s}")
    counter = itertools.count(1)
    root = TreeNode(component=None, executed=True, node_id=0)
    level = [root]
    for depth, slot in enumerate(spaces.slots, 1):
        nxt = []
        for node in level:
            for cv in spaces[slot]:
                child = TreeNode(cv, slot, depth, node, node_id=next(counter))
                node.children.append(child)
                nxt.append(child)
        level = nxt
    return root


@dataclass(frozen=True)
class CompatibilityLUT:
    pairs: frozenset[tuple[str, str]]

    def __contains__(self, pair) -> bool:
        return pair in self.pairs

    def __len__(self) -> int:
        return len(self.pairs)


def _edges(spaces: SearchSpace, spec: PipelineSpec | None) -> list[tuple[str, str]]:
    if spec is None:
        return list(zip(spaces.slots, spaces.slots[1:]))
    return sorted(spec.edges)


def build_compatibility_lut(spaces: SearchSpace, spec: PipelineSpec | None = None) -> CompatibilityLUT:
    """All (upstream id, downstream id) pairs along DAG edges that compose."""
    pairs = set()
    for a, b in _edges(spaces, spec):
        for up in spaces[a]:
            for down in spaces[b]:
                if is_compatible(up, down):
                    pairs.add((up.id, down.id))
    return CompatibilityLUT(frozenset(pairs))


def _preds(spec: PipelineSpec | None, slots: Sequence[str], slot: str) -> list[str]:
    if spec is None:
        i = slots.index(slot)
        return [slots[i - 1]] if i else []
    return spec.ordered_predecessors(slot)


def _admits(table: CompatibilityLUT, path: Sequence[TreeNode], child: TreeNode, preds: Sequence[str]) -> bool:
    by_slot = {n.slot: n for n in path}
    return all((by_slot[p].component.id, child.component.id) in table for p in preds)


def prune_tree(root: TreeNode, table: CompatibilityLUT, spec: PipelineSpec | None, slots: Sequence[str]) -> int:
    """Remove LUT-incompatible children and subtrees that can no longer reach full depth.

    Returns the number of removed subtrees.
    """
    n_f = len(slots)
    removed = 0

    def visit(node: TreeNode, path: list[TreeNode]) -> bool:
        nonlocal removed
        if node.depth == n_f:
            return True
        keep = []
        for child in node.children:
            if _admits(table, path, child, _preds(spec, slots, child.slot)) and visit(child, path + [child]):
                keep.append(child)
            else:
                removed += 1
        node.children = keep
        return bool(keep)

    visit(root, [])
    return removed


def _find_path(root: TreeNode, bindings: Mapping[str, ComponentVersion]) -> list[TreeNode] | None:
    node, path = root, []
    while node.children:
        slot = node.children[0].slot
        want = bindings.get(slot)
        nxt = next((c for c in node.children if want is not None and c.component.id == want.id), None)
        if nxt is None:
            return None
        path.append(nxt)
        node = nxt
    return path


def mark_executed_from_history(root: TreeNode, commits: Iterable) -> int:
    """Mark the tree paths of already-run pipelines as executed, recording their outputs.

    Leaves additionally receive the commit's scores. Returns the number of
    nodes newly marked.
    """
    marked = 0
    for commit in commits:
        path = _find_path(root, commit.bindings)
        if path is None:
            continue
        for node in path:
            ref = commit.outputs.get(node.slot)
            if ref is None:
                break
            if not node.executed:
                node.executed = True
                marked += 1
            node.output = ref
        else:
            path[-1].scores = dict(commit.scores)
    return marked


# -- execution --------------------------------------------------------------


@dataclass
class CandidateResult:
    bindings: dict[str, ComponentVersion]
    scores: dict[str, float]
    reused_slots: int
    wall_ms: float
    outputs: dict[str, ArtifactRef] | None = None
    failed: bool = False

    def score(self, metric: str) -> float:
        if self.failed:
            return -math.inf
        if metric not in self.scores:
            raise MissingMetric(f"candidate lacks metric {metric!r}")
        return self.scores[metric]


def _leaf_scores(path: Sequence) -> dict[str, float]:
    for node in reversed(path):
        if node.scores:
            return dict(node.scores)
    return {}


def run_path(path: Sequence, executor: Executor, spec: PipelineSpec) -> CandidateResult:
    """Execute one candidate path with reuse of executed nodes; failures yield a failed result."""
    reused = sum(1 for n in path if n.executed)
    before = executor.ledger.snapshot()["cpt_s"]
    bindings = {n.slot: n.component for n in path}
    try:
        outputs = execute_node_list(path, executor, spec)
    except ComponentRunFailure:
        wall = (executor.ledger.snapshot()["cpt_s"] - before) * 1000.0
        return CandidateResult(bindings, {}, reused, wall, None, failed=True)
    wall = (executor.ledger.snapshot()["cpt_s"] - before) * 1000.0
    return CandidateResult(bindings, _leaf_scores(path), reused, wall, outputs)


def execute_tree(
    table: CompatibilityLUT,
    root: TreeNode,
    executor: Executor,
    spec: PipelineSpec | None = None,
    slots: Sequence[str] | None = None,
) -> list[CandidateResult]:
    """Depth-first traversal with LUT pruning; every full-depth leaf is a candidate.

    Incompatible children are removed before descent. A node whose children
    were all removed before reaching full depth is a dead end, not a
    candidate.
    """
    if slots is None:
        slots = spec.order if spec is not None else _slots_of(root)
    if spec is None:
        spec = PipelineSpec.chain("tree", [(s, _kind_of(root, s)) for s in slots])
    n_f = len(slots)
    results: list[CandidateResult] = []
    walking: list[TreeNode] = []

    def visit(node: TreeNode) -> None:
        if node.children:
            for child in list(node.children):
                if not _admits(table, walking, child, spec.ordered_predecessors(child.slot)):
                    node.children.remove(child)
                else:
                    walking.append(child)
                    visit(child)
                    walking.pop()
        elif node.depth == n_f:
            results.append(run_path(list(walking), executor, spec))

    visit(root)
    return results


def _slots_of(root: TreeNode) -> list[str]:
    out, node = [], root
    while node.children:
        node = node.children[0]
        out.append(node.slot)
    return out


def _kind_of(root: TreeNode, slot: str):
    for n in root.iter_nodes():
        if n.slot == slot:
            return n.component.kind
    raise KeyError(slot)


def enumerate_candidates(spaces: SearchSpace) -> Iterator[dict[str, ComponentVersion]]:
    for combo in itertools.product(*(spaces[s] for s in spaces.slots)):
        yield dict(zip(spaces.slots, combo))


def run_from_scratch(bindings: Mapping[str, ComponentVersion], executor: Executor, spec: PipelineSpec) -> CandidateResult:
    steps = [Step(s, bindings[s]) for s in spec.order]
    return run_path(steps, executor, spec)


# -- counting ---------------------------------------------------------------


def count_candidates_upper(sizes: Sequence[int]) -> int:
    return math.prod(sizes)


def pruned_count_bounds(sizes: Sequence[int], j: int, n_compat: int | Sequence[int]) -> tuple[int, int, int]:
    """Candidate counts after a schema change at slot ``j`` (1-based).

    ``n_compat`` is the number of compatible versions of the successor slot,
    either as one scalar or per version of slot ``j``. Returns
    ``(exact, lower, upper_removed)`` where ``lower`` assumes a single
    compatible successor and ``upper_removed`` is the full product minus
    ``lower``.
    """
    n_f = len(sizes)
    if not 1 <= j < n_f:
        raise OutOfRange(f"schema-change slot {j} outside 1..{n_f - 1}")
    n_next = sizes[j]
    counts = [n_compat] if isinstance(n_compat, int) else list(n_compat)
    if not isinstance(n_compat, int) and len(counts) != sizes[j - 1]:
        raise OutOfRange(f"need {sizes[j - 1]} per-version counts, got {len(counts)}")
    for c in counts:
        if not 1 <= c <= n_next - 1:
            raise OutOfRange(f"compatible successor count {c} outside 1..{n_next - 1}")
    head = math.prod(sizes[:j])
    tail = math.prod(sizes[j + 1 :])
    if isinstance(n_compat, int):
        exact = head * n_compat * tail
    else:
        exact = math.prod(sizes[: j - 1]) * sum(counts) * tail
    lower = head * tail
    return exact, lower, math.prod(sizes) - lower


def execution_counts(sizes: Sequence[int]) -> tuple[int, int]:
    """(executions without reuse, executions with reuse) for an unexecuted, unpruned tree."""
    without = math.prod(sizes) * len(sizes)
    with_reuse = sum(math.prod(sizes[: j + 1]) for j in range(len(sizes)))
    return without, with_reuse


# -- merge ------------------------------------------------------------------


@dataclass
class MergeReport:
    strategy: str
    metric: str
    winner: PipelineVersion
    winner_score: float
    candidates_total: int
    candidates_after_pruning: int
    nodes_executed: int
    candidates: list[CandidateResult]
    ledger: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bindings", "score", "reused_slots", "wall_ms"])
        for c in self.candidates:
            label = ";".join(f"{s}={cv.label()}" for s, cv in c.bindings.items())
            score = c.score(self.metric) if (c.failed or self.metric in c.scores) else ""
            w.writerow([label, score, c.reused_slots, f"{c.wall_ms:.3f}"])
        w.writerow([])
        w.writerow(["key", "value"])
        summary = {
            "strategy": self.strategy,
            "metric": self.metric,
            "winner": self.winner.describe(),
            "winner_score": self.winner_score,
            "candidates_total": self.candidates_total,
            "candidates_after_pruning": self.candidates_after_pruning,
            "nodes_executed": self.nodes_executed,
            **self.ledger,
        }
        for k, v in summary.items():
            w.writerow([k, v])
        return buf.getvalue()


def _changed_slots(bindings: Mapping[str, ComponentVersion], ancestor) -> int:
    return sum(1 for s, cv in bindings.items() if ancestor.bindings[s].id != cv.id)


def select_winner(candidates: Sequence[CandidateResult], metric: str, ancestor, order: Sequence[str]) -> CandidateResult:
    """Highest score; ties go to fewer changed slots, then the smaller version tuple."""
    viable = [c for c in candidates if not c.failed]
    if not viable:
        raise NotMergeable("no compatible candidate could be executed")

    def key(c: CandidateResult):
        return (-c.score(metric), _changed_slots(c.bindings, ancestor), tuple(c.bindings[s].sort_key() for s in order))

    best = min(viable, key=key)
    if best.score(metric) == -math.inf:
        raise NotMergeable("every candidate failed")
    return best


def prepare_tree(repo, head: str, merge_head: str):
    """Search space, LUT and history-marked, LUT-pruned tree for a merge."""
    lca, history = merge_history(repo, head, merge_head)
    spaces = SearchSpace.from_commits(repo.spec.order, history)
    table = build_compatibility_lut(spaces, repo.spec)
    root = build_search_tree(spaces)
    prune_tree(root, table, repo.spec, spaces.slots)
    mark_executed_from_history(root, history)
    return lca, history, spaces, table, root


def metric_merge(
    repo,
    head_branch: str,
    merge_branch: str,
    metric: str = "score",
    strategy: str = "pruned_reuse",
    executor: Executor | None = None,
    search: str | None = None,
    budget: int | None = None,
    seed: int = 0,
):
    """Merge ``merge_branch`` into ``head_branch`` choosing the best-scoring candidate.

    Returns ``(commit, report)``. ``search``/``budget`` enable an early-stopped
    merge that visits at most ``budget`` unrun candidates in prioritized or
    random order (pruned_reuse only).
    """
    try:
        strategy = STRATEGIES[strategy]
    except KeyError:
        raise ValueError(f"unknown strategy {strategy!r}") from None
    if executor is None:
        executor = Executor(repo.store, metric=metric)
    head = repo.head_commit(head_branch)
    merge_head = repo.head_commit(merge_branch)
    calls_before = executor.calls
    ledger_before = executor.ledger.snapshot()
    order = repo.spec.order

    if strategy == "naive":
        lca, history = merge_history(repo, head.id, merge_head.id)
        spaces = SearchSpace.from_commits(order, history)
        latest = {s: spaces[s][-1] for s in order}
        PipelineVersion(repo.spec, latest).check()
        single = SearchSpace(tuple(order), {s: [latest[s]] for s in order})
        root = build_search_tree(single)
        mark_executed_from_history(root, history)
        table = build_compatibility_lut(single, repo.spec)
        candidates = execute_tree(table, root, executor, repo.spec)
        total, after = count_candidates_upper(spaces.sizes()), 1
    elif strategy == "pruned_reuse":
        lca, history, spaces, table, root = prepare_tree(repo, head.id, merge_head.id)
        total = count_candidates_upper(spaces.sizes())
        after = len(root.leaves(len(order)))
        if search is None:
            candidates = execute_tree(table, root, executor, repo.spec)
        else:
            from pipevc.search import run_search, seed_scores

            state = seed_scores(root, history, metric)
            historical = [
                CandidateResult({n.slot: n.component for n in leaf.path()}, dict(leaf.scores), len(order), 0.0,
                                {n.slot: n.output for n in leaf.path()})
                for leaf in root.leaves(len(order))
                if leaf.executed and leaf.scores
            ]
            results = run_search(root, search, executor, repo.spec, state, metric, max_candidates=budget, seed=seed)
            candidates = historical + [r.candidate for r in results]
    else:
        lca, history = merge_history(repo, head.id, merge_head.id)
        spaces = SearchSpace.from_commits(order, history)
        total = count_candidates_upper(spaces.sizes())
        if strategy == "compat_only":
            table = build_compatibility_lut(spaces, repo.spec)
            root = build_search_tree(spaces)
            prune_tree(root, table, repo.spec, order)
            combos = [{n.slot: n.component for n in leaf.path()} for leaf in root.leaves(len(order))]
        else:
            combos = list(enumerate_candidates(spaces))
        after = len(combos)
        candidates = [run_from_scratch(b, executor, repo.spec) for b in combos]

    best = select_winner(candidates, metric, lca, order)
    ledger_after = executor.ledger.snapshot()
    stats = RunStats(
        ledger_after["cet_s"] - ledger_before["cet_s"],
        ledger_after["cst_s"] - ledger_before["cst_s"],
        ledger_after["css_bytes"] - ledger_before["css_bytes"],
    )
    pipeline = PipelineVersion(repo.spec, dict(best.bindings))
    pipeline.check()
    run = PipelineRun(dict(best.outputs), dict(best.scores), stats, executor.store)
    with repo.lock():
        commit = repo.append_commit(head_branch, pipeline, run, [head.id, merge_head.id])
    report = MergeReport(
        strategy=strategy,
        metric=metric,
        winner=pipeline,
        winner_score=best.score(metric),
        candidates_total=total,
        candidates_after_pruning=after,
        nodes_executed=executor.calls - calls_before,
        candidates=candidates,
        ledger={k: ledger_after[k] - ledger_before[k] for k in ledger_after},
    )
    return commit, report


def merge(repo, head_branch: str, merge_branch: str, **kwargs):
    """Fast-forward when possible, metric-driven merge otherwise."""
    head = repo.head(head_branch)
    mh = repo.head(merge_branch)
    if head is not None and mh is not None and repo.is_fast_forward(head, mh):
        return repo.fast_forward_merge(head_branch, merge_branch), None
    return metric_merge(repo, head_branch, merge_branch, **kwargs)
