"""Prioritized pipeline search over a scored search tree.

Leaves carry the score of their candidate once it has been run (or seeded
from history); every internal node scores the mean of its scored children.
Prioritized search repeatedly descends from the root into the best-scored
child that still has unrun leaves below it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from pipevc.errors import Exhausted, MissingMetric
from pipevc.execution import Executor
from pipevc.mergex import CandidateResult, TreeNode, _find_path, run_path
from pipevc.model import PipelineSpec

METHODS = ("prioritized", "random")


class ScoreState:
    """Scores and unrun-leaf counts for every node of one tree."""

    def __init__(self, root: TreeNode):
        self.root = root
        self.depth = max(n.depth for n in root.iter_nodes())
        self.score: dict[TreeNode, float | None] = {}
        self.unrun: dict[TreeNode, int] = {}
        self._init(root)

    def _init(self, node: TreeNode) -> int:
        self.score[node] = None
        if not node.children:
            count = 1 if node.depth == self.depth and not node.is_root else 0
        else:
            count = sum(self._init(c) for c in node.children)
        self.unrun[node] = count
        return count

    def is_leaf(self, node: TreeNode) -> bool:
        return not node.children and node.depth == self.depth

    def set_leaf(self, leaf: TreeNode, score: float) -> None:
        """Record a leaf's score and re-average every ancestor."""
        if not self.is_leaf(leaf):
            raise ValueError("only full-depth leaves carry candidate scores")
        first = self.score[leaf] is None
        self.score[leaf] = score
        node = leaf.parent
        if first:
            self.unrun[leaf] = 0
        while node is not None:
            if first:
                self.unrun[node] -= 1
            scored = [self.score[c] for c in node.children if self.score[c] is not None]
            self.score[node] = sum(scored) / len(scored) if scored else None
            node = node.parent

    def unrun_leaves(self) -> list[TreeNode]:
        return [n for n in self.root.iter_nodes() if self.is_leaf(n) and self.score[n] is None]


def seed_scores(root: TreeNode, history: Iterable, metric: str) -> ScoreState:
    """Score the leaves of historical pipelines with their recorded metric."""
    state = ScoreState(root)
    for commit in history:
        path = _find_path(root, commit.bindings)
        if path is None or not state.is_leaf(path[-1]):
            continue
        if metric not in commit.scores:
            raise MissingMetric(f"historical pipeline lacks metric {metric!r}")
        state.set_leaf(path[-1], commit.scores[metric])
    return state


def prioritized_next(root: TreeNode, state: ScoreState) -> list[TreeNode]:
    """Greedy descent to an unrun leaf; unscored children rank below scored ones."""
    if state.unrun[root] == 0:
        raise Exhausted("every candidate has been run")
    path, node = [], root
    while node.children:
        live = [c for c in node.children if state.unrun[c] > 0]
        # max() keeps the first of equal keys, i.e. version order
        node = max(live, key=lambda c: (state.score[c] is not None, state.score[c] if state.score[c] is not None else 0.0))
        path.append(node)
    return path


@dataclass
class SearchResult:
    path: list[TreeNode]
    candidate: CandidateResult
    end_time: float
    score: float


def run_search(
    root: TreeNode,
    method: str,
    executor: Executor,
    spec: PipelineSpec,
    state: ScoreState,
    metric: str = "score",
    max_candidates: int | None = None,
    time_budget: float | None = None,
    seed: int | None = 0,
    rng: np.random.Generator | None = None,
) -> list[SearchResult]:
    """Run unrun candidates in the method's order until the budget is spent.

    End times are cumulative pipeline time (virtual seconds in virtual mode)
    from the start of the search. Scores are propagated after every run.
    """
    if method not in METHODS:
        raise ValueError(f"unknown search method {method!r}")
    order = None
    if method == "random":
        rng = rng if rng is not None else np.random.default_rng(seed)
        pending = state.unrun_leaves()
        order = [pending[i] for i in rng.permutation(len(pending))]
    results: list[SearchResult] = []
    clock = 0.0
    while state.unrun[root] > 0:
        if max_candidates is not None and len(results) >= max_candidates:
            break
        if time_budget is not None and clock >= time_budget:
            break
        if order is not None:
            leaf = order[len(results)]
            path = leaf.path()
        else:
            path = prioritized_next(root, state)
        cand = run_path(path, executor, spec)
        clock += cand.wall_ms / 1000.0
        score = -math.inf if cand.failed else cand.score(metric)
        state.set_leaf(path[-1], score)
        results.append(SearchResult(path, cand, clock, score))
    return results


@dataclass
class TrialResult:
    method: str
    trials: int
    seed: int
    avg_end_time: list[float]
    avg_score: list[float]
    score_variance: list[float]
    orders: list[list[int]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["candidate_id", "method", "avg_end_time_s", "avg_score", "score_variance"])
        for i, (t, s, v) in enumerate(zip(self.avg_end_time, self.avg_score, self.score_variance)):
            w.writerow([i, self.method, repr(t), repr(s), repr(v)])
        return buf.getvalue()


def run_trials(
    tree_factory: Callable[[], tuple[TreeNode, ScoreState]],
    method: str,
    executor_factory: Callable[[], Executor],
    spec: PipelineSpec,
    trials: int = 100,
    seed: int = 0,
    metric: str = "score",
) -> TrialResult:
    """Search all candidates ``trials`` times; statistics are per visit position."""
    streams = np.random.SeedSequence(seed).spawn(trials)
    ends, scores, orders = [], [], []
    n = None
    for t in range(trials):
        root, state = tree_factory()
        results = run_search(
            root, method, executor_factory(), spec, state, metric, rng=np.random.default_rng(streams[t])
        )
        if n is None:
            n = len(results)
        elif len(results) != n:
            raise RuntimeError("trees from the factory differ in candidate count")
        ends.append([r.end_time for r in results])
        scores.append([r.score for r in results])
        orders.append([r.path[-1].node_id for r in results])
    ends_a, scores_a = np.array(ends), np.array(scores)
    return TrialResult(
        method=method,
        trials=trials,
        seed=seed,
        avg_end_time=ends_a.mean(axis=0).tolist(),
        avg_score=scores_a.mean(axis=0).tolist(),
        score_variance=scores_a.var(axis=0).tolist(),
        orders=orders,
    )
