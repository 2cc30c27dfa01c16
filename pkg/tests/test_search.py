import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipevc.errors import Exhausted, MissingMetric
from pipevc.mergex import build_compatibility_lut, build_search_tree, prune_tree
from pipevc.model import PipelineSpec
from pipevc.search import ScoreState, prioritized_next, run_search, run_trials, seed_scores

from helpers import CountingExecutor, oracle_pick, oracle_score, random_spaces


def pruned_tree(rng, **kw):
    spaces = random_spaces(rng, **kw)
    root = build_search_tree(spaces)
    prune_tree(root, build_compatibility_lut(spaces), None, spaces.slots)
    spec = PipelineSpec.chain("t", [(s, spaces[s][0].kind) for s in spaces.slots])
    return root, spec, len(spaces.slots)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_first_pick_matches_oracle(seed, frac):
    rng = np.random.default_rng(seed)
    root, _, depth = pruned_tree(rng)
    state = ScoreState(root)
    leaf_scores = {}
    leaves = root.leaves(depth)
    for leaf in leaves:
        if rng.random() < frac and len(leaf_scores) < len(leaves) - 1:
            leaf_scores[leaf] = float(rng.integers(0, 4)) / 4  # coarse, to force ties
            state.set_leaf(leaf, leaf_scores[leaf])
    if len(leaf_scores) == len(leaves):
        return
    assert prioritized_next(root, state)[-1] is oracle_pick(root, leaf_scores, depth)


def test_score_state_means():
    rng = np.random.default_rng(3)
    root, _, depth = pruned_tree(rng, max_slots=3, max_versions=3, p_change=0.0)
    state = ScoreState(root)
    leaves = root.leaves(depth)
    assert state.unrun[root] == len(leaves)
    for i, leaf in enumerate(leaves[:3]):
        state.set_leaf(leaf, float(i))
    assert state.unrun[root] == len(leaves) - min(3, len(leaves))
    scored = {l: float(i) for i, l in enumerate(leaves[:3])}
    for node in root.iter_nodes():
        assert state.score[node] == oracle_score(node, scored, depth)
    with pytest.raises(ValueError):
        state.set_leaf(root, 1.0)


def test_exhausted():
    root, _, depth = pruned_tree(np.random.default_rng(1))
    state = ScoreState(root)
    for leaf in root.leaves(depth):
        state.set_leaf(leaf, 0.5)
    with pytest.raises(Exhausted):
        prioritized_next(root, state)


@pytest.mark.parametrize("method", ["prioritized", "random"])
def test_search_visits_every_candidate_once(method):
    rng = np.random.default_rng(11)
    root, spec, depth = pruned_tree(rng, max_slots=4, max_versions=3)
    results = run_search(root, method, CountingExecutor(), spec, ScoreState(root), seed=5)
    visited = [r.path[-1] for r in results]
    assert len(visited) == len(set(visited)) == len(root.leaves(depth))
    ends = [r.end_time for r in results]
    assert ends == sorted(ends)
    assert all(n.run_count <= 1 for n in root.iter_nodes())


def test_random_order_reproducible_and_budgeted():
    def order(seed, budget=None):
        root, spec, _ = pruned_tree(np.random.default_rng(2), max_slots=4, max_versions=4, p_change=0.0)
        res = run_search(root, "random", CountingExecutor(), spec, ScoreState(root), seed=seed, max_candidates=budget)
        return [r.path[-1].node_id for r in res]

    assert order(1) == order(1)
    assert order(1) != order(2)
    assert order(1, budget=3) == order(1)[:3]


def test_unknown_method():
    root, spec, _ = pruned_tree(np.random.default_rng(0))
    with pytest.raises(ValueError):
        run_search(root, "psychic", CountingExecutor(), spec, ScoreState(root))


def test_trials_csv():
    def factory():
        root, _, _ = pruned_tree(np.random.default_rng(4), max_slots=3, max_versions=3, p_change=0.0)
        return root, ScoreState(root)

    _, spec, _ = pruned_tree(np.random.default_rng(4), max_slots=3, max_versions=3, p_change=0.0)
    res = run_trials(factory, "random", CountingExecutor, spec, trials=5, seed=1)
    rows = list(csv.reader(io.StringIO(res.to_csv())))
    assert rows[0] == ["candidate_id", "method", "avg_end_time_s", "avg_score", "score_variance"]
    n = len(factory()[0].leaves(len(spec.order)))
    assert len(rows) == n + 1
    again = run_trials(factory, "random", CountingExecutor, spec, trials=5, seed=1)
    assert again.orders == res.orders


def test_seed_scores_from_history(tmp_path):
    from pipevc.mergex import prepare_tree
    from pipevc.model import MASTER
    from pipevc.scenarios import figure_history

    repo = figure_history(tmp_path / "r").repo
    _, history, _, _, root = prepare_tree(repo, repo.head(MASTER), repo.head("dev"))
    state = seed_scores(root, history, "score")
    assert state.unrun[root] == 4
    with pytest.raises(MissingMetric):
        seed_scores(root, history, "auc")
