"""Synthetic component versions and a counting executor for tree-level tests."""

import hashlib
import itertools
from collections import Counter

from pipevc.errors import SchemaMismatch
from pipevc.execution import ArtifactRef, MetricsLedger, RunOutcome, RunStats
from pipevc.mergex import SearchSpace
from pipevc.model import ANY_SCHEMA, ComponentKind, ComponentVersion, SemanticVersion, is_compatible, schema_hash
from pipevc.store import ObjectManifest


def digest(tag) -> str:
    return schema_hash([f"col-{tag}"])


def cv(name, ordinal=0, increment=0, out="x", inp=ANY_SCHEMA, branch="master", kind=ComponentKind.LIBRARY):
    """A component version whose schemas are short tags turned into digests."""
    inp = inp if inp == ANY_SCHEMA else digest(inp)
    return ComponentVersion(
        name, kind, SemanticVersion(branch, ordinal, increment, digest(out)), f"payload-{name}-{ordinal}.{increment}-{out}", inp
    )


def lineage_score(lineage: str) -> float:
    return int.from_bytes(hashlib.sha256(lineage.encode()).digest()[:8], "big") / 2.0**64


class CountingExecutor:
    """Stands in for Executor: no payloads, just counts and lineage scores."""

    def __init__(self, cost=None):
        self.ledger = MetricsLedger()
        self.calls = 0
        self.calls_by_component = Counter()
        self.cost = cost or (lambda v: 0.01)

    def run_component(self, version, inputs=()):
        self.calls += 1
        self.calls_by_component[version.id] += 1
        if inputs and version.input_schema_digest != ANY_SCHEMA:
            if any(ref.schema_digest != version.input_schema_digest for ref in inputs):
                raise SchemaMismatch(f"{version} rejects its input")
        lineage = "|".join([ref.manifest.chunks[0] for ref in inputs] + [version.id])
        ref = ArtifactRef(ObjectManifest((lineage,), 0, "output"), version.output_schema_digest)
        stats = RunStats(self.cost(version), 0.0, 0)
        self.ledger.add(stats)
        return RunOutcome(ref, stats, {"score": lineage_score(lineage)})


def random_spaces(rng, max_slots=4, max_versions=4, p_change=0.3):
    """Random chain search space; a schema change gives later versions a new digest.

    Versions are ordered, and each one either keeps its predecessor's output
    schema or (with ``p_change``) introduces a new one. Inputs of the next
    slot are drawn from the output schemas present upstream, so the LUT is
    partial but never empty.
    """
    n = int(rng.integers(1, max_slots + 1))
    slots = tuple(f"s{i}" for i in range(n))
    versions = {}
    prev_outs = None
    for i, slot in enumerate(slots):
        k = int(rng.integers(1, max_versions + 1))
        out_tag, ordinal, inc = f"{slot}-0", 0, 0
        vs = []
        for v in range(k):
            if v and rng.random() < p_change:
                ordinal, inc = ordinal + 1, 0
                out_tag = f"{slot}-{ordinal}"
            elif v:
                inc += 1
            inp = ANY_SCHEMA if prev_outs is None else prev_outs[int(rng.integers(0, len(prev_outs)))]
            kind = ComponentKind.DATASET if i == 0 else ComponentKind.LIBRARY
            vs.append(cv(slot, ordinal, inc, out_tag, inp, kind=kind))
        versions[slot] = vs
        prev_outs = sorted({f"{slot}-{v.version.schema_ordinal}" for v in vs})
    return SearchSpace(slots, versions)


def brute_force_candidates(spaces):
    """Every fully compatible combination, by plain enumeration."""
    out = []
    for combo in itertools.product(*(spaces[s] for s in spaces.slots)):
        if all(is_compatible(a, b) for a, b in zip(combo, combo[1:])):
            out.append(dict(zip(spaces.slots, combo)))
    return out


def schema_change_spaces(sizes, j, compat):
    """Slot j (1-based) changes schema per version; ``compat[v]`` successors accept version v."""
    slots = tuple(f"s{i}" for i in range(len(sizes)))
    versions = {}
    for i, s in enumerate(slots):
        if i == j - 1:
            versions[s] = [cv(s, v, 0, out=f"{s}-{v}") for v in range(sizes[i])]
        elif i == j:
            ups = [f"{slots[j - 1]}-{v}" for v in range(sizes[j - 1]) for _ in range(compat[v])]
            versions[s] = [cv(s, 0, k, inp=ups[k]) for k in range(len(ups))]
        else:
            versions[s] = [cv(s, 0, k) for k in range(sizes[i])]
    return SearchSpace(slots, versions)


def oracle_score(node, leaf_scores, depth):
    """Mean of scored children, recomputed from scratch."""
    if not node.children:
        return leaf_scores.get(node) if node.depth == depth else None
    vals = [oracle_score(c, leaf_scores, depth) for c in node.children]
    vals = [v for v in vals if v is not None]
    return sum(vals) / len(vals) if vals else None


def oracle_pick(root, leaf_scores, depth):
    """Best unrun leaf by the lexicographic key of its path: scored first, then score, then version order."""
    best, best_key = None, None
    for leaf in root.leaves(depth):
        if leaf in leaf_scores:
            continue
        key = []
        for node in leaf.path():
            s = oracle_score(node, leaf_scores, depth)
            key.append((s is not None, s if s is not None else 0.0, -node.parent.children.index(node)))
        if best_key is None or key > best_key:
            best, best_key = leaf, key
    return best


class StubScoreExecutor(CountingExecutor):
    """Scores every lineage with the stub components' own score function."""

    def __init__(self, score_cfg, cost=None):
        super().__init__(cost)
        self.score_cfg = dict(score_cfg)

    def run_component(self, version, inputs=()):
        from pipevc import _stubmain

        out = super().run_component(version, inputs)
        tokens = out.artifact.manifest.chunks[0].split("|")
        out.scores["score"] = _stubmain.score_of(self.score_cfg, tokens)
        return out


def two_branch_history(sizes, rng):
    """Version-index vectors of an ancestor plus commits on two branches.

    Every version beyond the first is introduced by exactly one commit on a
    random branch, in version order per slot, so each appears in history.
    """
    updates = [(i, v) for i, n in enumerate(sizes) for v in range(1, n)]
    pending = {i: [v for (k, v) in updates if k == i] for i in range(len(sizes))}
    heads = [[0] * len(sizes), [0] * len(sizes)]
    history = [tuple(heads[0])]
    for _ in updates:
        slot = int(rng.choice([i for i in pending if pending[i]]))
        branch = int(rng.integers(0, 2))
        heads[branch][slot] = pending[slot].pop(0)
        history.append(tuple(heads[branch]))
    return history
