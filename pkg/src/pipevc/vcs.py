"""Branch and commit graph over pipeline versions.

Repository layout::

    HEAD                  current branch name
    pipeline.spec         the pipeline DAG (key = value lines)
    refs/<branch>         commit id, empty before the first commit
    commits/<id>          key = value commit records
    datasets/<name>       registered dataset versions, one per line
    libraries/<name>      registered library versions, one per line
    store/                content-addressed object store
    lock                  writer lock
"""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from pipevc.artifacts import pack_files
from pipevc.errors import (
    AlreadyExists,
    BadMetafile,
    DuplicateBranch,
    EmptyHistory,
    IncompatiblePipeline,
    NoCommonAncestor,
    NotARepository,
    NotFastForward,
    UnknownBranch,
    UnknownCommit,
)
from pipevc.execution import ArtifactRef, PipelineRun, RunStats
from pipevc.model import (
    MASTER,
    ComponentKind,
    ComponentMeta,
    ComponentVersion,
    PipelineSpec,
    PipelineVersion,
    SemanticVersion,
    next_version,
    parse_kv,
)
from pipevc.store import ObjectStore, _atomic_write

METAFILE = "component.meta"


@dataclass(frozen=True)
class Commit:
    id: str
    branch: str
    parents: tuple[str, ...]
    pipeline: PipelineVersion
    outputs: Mapping[str, ArtifactRef]
    scores: Mapping[str, float]
    stats: RunStats
    sequence: int

    @property
    def bindings(self) -> Mapping[str, ComponentVersion]:
        return self.pipeline.bindings

    @property
    def is_merge(self) -> bool:
        return len(self.parents) == 2


def _render_record(branch, parents, sequence, pipeline, outputs, scores, stats) -> str:
    lines = [
        f"branch = {branch}",
        f"parents = {' '.join(parents)}",
        f"sequence = {sequence}",
        f"pipeline = {pipeline.spec.name}",
    ]
    for slot in pipeline.spec.order:
        lines.append(f"bind = {slot}={pipeline.bindings[slot].id}")
    for slot in pipeline.spec.order:
        ref = outputs[slot]
        lines.append(f"output = {slot}={ref.id}#{ref.schema_digest}")
    for name in sorted(scores):
        lines.append(f"score = {name}={scores[name]!r}")
    lines.append(f"execution_time = {stats.execution_time!r}")
    lines.append(f"storage_time = {stats.storage_time!r}")
    lines.append(f"storage_bytes_delta = {stats.storage_bytes_delta}")
    return "\n".join(lines) + "\n"


def _valid_branch(name: str) -> str:
    if not name or any(c in name for c in "@#/ \n=") or name.startswith("."):
        raise ValueError(f"invalid branch name {name!r}")
    return name


class Repository:
    """One pipeline's version history plus the shared component repositories."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        if not (self.path / "HEAD").exists():
            raise NotARepository(str(self.path))
        self.store = ObjectStore(self.path / "store")
        spec_file = self.path / "pipeline.spec"
        self.spec: PipelineSpec | None = PipelineSpec.loads(spec_file.read_text()) if spec_file.exists() else None
        self._components: dict[str, ComponentVersion] = {}
        self._by_name: dict[str, list[ComponentVersion]] = {}
        self._commits: dict[str, Commit] = {}
        for kind_dir in ("datasets", "libraries"):
            for f in sorted((self.path / kind_dir).glob("*")):
                for line in f.read_text().splitlines():
                    if line.strip():
                        self._index_component(self._parse_component(line))

    # -- creation -------------------------------------------------------

    @classmethod
    def init(cls, path: str | os.PathLike, spec: PipelineSpec | None = None) -> Repository:
        path = Path(path)
        if path.exists() and any(path.iterdir()):
            raise AlreadyExists(f"{path} is not empty")
        for sub in ("refs", "commits", "datasets", "libraries", "store"):
            (path / sub).mkdir(parents=True, exist_ok=True)
        (path / "refs" / MASTER).write_text("")
        if spec is not None:
            (path / "pipeline.spec").write_text(spec.dumps())
        (path / "HEAD").write_text(MASTER + "\n")
        return cls(path)

    @classmethod
    def open(cls, path: str | os.PathLike) -> Repository:
        return cls(path)

    @contextlib.contextmanager
    def lock(self):
        with open(self.path / "lock", "a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def set_spec(self, spec: PipelineSpec) -> None:
        if self.spec is not None and self.spec != spec:
            raise BadMetafile("repository already has a different pipeline spec")
        self.spec = spec
        (self.path / "pipeline.spec").write_text(spec.dumps())

    # -- branches -------------------------------------------------------

    @property
    def heads(self) -> dict[str, str | None]:
        return {p.name: (p.read_text().strip() or None) for p in sorted((self.path / "refs").iterdir())}

    def head(self, branch: str) -> str | None:
        ref = self.path / "refs" / branch
        if not ref.exists():
            raise UnknownBranch(branch)
        return ref.read_text().strip() or None

    def head_commit(self, branch: str) -> Commit:
        cid = self.head(branch)
        if cid is None:
            raise EmptyHistory(f"branch {branch} has no commits")
        return self.get_commit(cid)

    @property
    def current_branch(self) -> str:
        return (self.path / "HEAD").read_text().strip()

    def checkout(self, branch: str) -> None:
        self.head(branch)
        (self.path / "HEAD").write_text(branch + "\n")

    def create_branch(self, name: str, from_commit: str | None = None) -> str:
        _valid_branch(name)
        with self.lock():
            if (self.path / "refs" / name).exists():
                raise DuplicateBranch(name)
            if from_commit is None:
                from_commit = self.head(self.current_branch)
                if from_commit is None:
                    raise UnknownCommit("cannot branch before the first commit")
            else:
                from_commit = self.resolve(from_commit)
            _atomic_write(self.path / "refs" / name, (from_commit + "\n").encode())
        return name

    def _set_head(self, branch: str, cid: str) -> None:
        _atomic_write(self.path / "refs" / branch, (cid + "\n").encode())

    # -- component repositories ----------------------------------------

    def _parse_component(self, line: str) -> ComponentVersion:
        ident, *attrs = line.split()
        name, _, rest = ident.partition("@")
        fields = dict(a.split("=", 1) for a in attrs)
        return ComponentVersion(
            name=name,
            kind=ComponentKind(fields["kind"]),
            version=SemanticVersion.parse(rest),
            payload=fields["payload"],
            input_schema_digest=fields["input"],
            schema_changed=fields["schema_changed"] == "true",
        )

    def _index_component(self, cv: ComponentVersion) -> None:
        self._components[cv.id] = cv
        self._by_name.setdefault(cv.name, []).append(cv)

    def component(self, cid: str) -> ComponentVersion:
        try:
            return self._components[cid]
        except KeyError:
            raise UnknownCommit(f"unknown component version {cid}") from None

    def versions(self, name: str) -> list[ComponentVersion]:
        return sorted(self._by_name.get(name, []), key=ComponentVersion.sort_key)

    @property
    def dataset_repo(self) -> dict[str, list[ComponentVersion]]:
        return {n: self.versions(n) for n, vs in self._by_name.items() if vs[0].kind is ComponentKind.DATASET}

    @property
    def library_repo(self) -> dict[str, list[ComponentVersion]]:
        return {n: self.versions(n) for n, vs in self._by_name.items() if vs[0].kind is ComponentKind.LIBRARY}

    def register_component(
        self,
        files: Mapping[str, bytes],
        modes: Mapping[str, int] | None = None,
        branch: str = MASTER,
        prev: ComponentVersion | None = None,
    ) -> ComponentVersion:
        """Store a component payload and assign it a semantic version.

        Re-registering an identical payload returns the existing version.
        ``prev`` is the version this one evolves from (normally the one bound
        in the branch head); it defaults to the highest existing version.
        """
        if METAFILE not in files:
            raise BadMetafile(f"payload lacks {METAFILE}")
        meta = ComponentMeta.loads(files[METAFILE].decode("utf-8"))
        blob = pack_files(files, modes)
        manifest = self.store.put_object(blob, "payload")
        for cv in self._by_name.get(meta.name, []):
            if cv.payload == manifest.id:
                return cv
        existing = self.versions(meta.name)
        if existing and existing[0].kind != meta.kind:
            raise BadMetafile(f"{meta.name} is already registered as a {existing[0].kind.value}")
        if prev is not None and prev.name != meta.name:
            prev = None
        if prev is None and existing:
            prev = existing[-1]
        if prev is None:
            version = SemanticVersion.initial(meta.output_schema, branch)
            schema_changed = False
        else:
            schema_changed = meta.schema_changed
            if meta.kind is ComponentKind.DATASET:
                # datasets derive the flag from the schema hash
                schema_changed = meta.output_schema != prev.output_schema_digest
            version = self._allocate(next_version(prev.version, schema_changed, meta.output_schema, branch), existing)
        cv = ComponentVersion(
            name=meta.name,
            kind=meta.kind,
            version=version,
            payload=manifest.id,
            input_schema_digest=meta.input_schema,
            schema_changed=schema_changed,
        )
        kind_dir = "datasets" if meta.kind is ComponentKind.DATASET else "libraries"
        with open(self.path / kind_dir / meta.name, "a") as fh:
            fh.write(
                f"{cv.name}@{version.full} kind={meta.kind.value} payload={manifest.id} "
                f"input={meta.input_schema} schema_changed={'true' if schema_changed else 'false'}\n"
            )
        self._index_component(cv)
        return cv

    @staticmethod
    def _allocate(candidate: SemanticVersion, existing: list[ComponentVersion]) -> SemanticVersion:
        """Resolve numbering collisions between branches.

        Ordinals are tied to schema digests per component; increments are
        unique per (ordinal) across all branches.
        """
        ordinal_of = {}
        for cv in existing:
            ordinal_of.setdefault(cv.output_schema_digest, cv.version.schema_ordinal)
        ordinal = ordinal_of.get(candidate.schema_digest)
        if ordinal is None:
            ordinal = max((cv.version.schema_ordinal for cv in existing), default=-1) + 1
            ordinal = max(ordinal, candidate.schema_ordinal)
        taken = [cv.version.increment for cv in existing if cv.version.schema_ordinal == ordinal]
        increment = candidate.increment if ordinal == candidate.schema_ordinal else 0
        if increment in taken:
            increment = max(taken) + 1
        return SemanticVersion(candidate.branch, ordinal, increment, candidate.schema_digest)

    # -- commits --------------------------------------------------------

    def _commit_path(self, cid: str) -> Path:
        return self.path / "commits" / cid

    def resolve(self, prefix: str) -> str:
        """Expand a unique commit id prefix or a branch name."""
        if (self.path / "refs" / prefix).exists():
            cid = self.head(prefix)
            if cid is None:
                raise UnknownCommit(f"branch {prefix} has no commits")
            return cid
        if self._commit_path(prefix).exists():
            return prefix
        matches = [p.name for p in (self.path / "commits").glob(prefix + "*")] if prefix else []
        if len(matches) != 1:
            raise UnknownCommit(prefix)
        return matches[0]

    def get_commit(self, cid: str) -> Commit:
        if cid in self._commits:
            return self._commits[cid]
        path = self._commit_path(cid)
        if not path.exists():
            raise UnknownCommit(cid)
        rec = parse_kv(path.read_text())
        single = dict(rec)
        bindings, outputs, scores = {}, {}, {}
        for key, value in rec:
            if key == "bind":
                slot, _, comp = value.partition("=")
                bindings[slot] = self.component(comp)
            elif key == "output":
                slot, _, ref = value.partition("=")
                mid, _, digest = ref.partition("#")
                outputs[slot] = ArtifactRef(self.store.manifest(mid), digest)
            elif key == "score":
                name, _, val = value.partition("=")
                scores[name] = float(val)
        commit = Commit(
            id=cid,
            branch=single["branch"],
            parents=tuple(single["parents"].split()),
            pipeline=PipelineVersion(self.spec, bindings),
            outputs=outputs,
            scores=scores,
            stats=RunStats(
                float(single["execution_time"]), float(single["storage_time"]), int(single["storage_bytes_delta"])
            ),
            sequence=int(single["sequence"]),
        )
        self._commits[cid] = commit
        return commit

    def all_commits(self) -> list[Commit]:
        return sorted((self.get_commit(p.name) for p in (self.path / "commits").iterdir()), key=lambda c: c.sequence)

    def _next_sequence(self) -> int:
        return 1 + max((c.sequence for c in self.all_commits()), default=-1)

    def _import_output(self, ref: ArtifactRef, store) -> ArtifactRef:
        if self.store.has_object(ref.id):
            return ArtifactRef(self.store.manifest(ref.id), ref.schema_digest)
        manifest = self.store.put_object(store.get_object(ref.manifest), "output")
        return ArtifactRef(manifest, ref.schema_digest)

    def append_commit(
        self,
        branch: str,
        pipeline: PipelineVersion,
        run: PipelineRun,
        parents: Iterable[str],
    ) -> Commit:
        """Low-level commit creation; callers have validated ``pipeline``."""
        if set(run.outputs) != set(pipeline.spec.order):
            raise IncompatiblePipeline("run results must cover every slot; unexecuted commits are rejected")
        parents = tuple(parents)
        for p in parents:
            self.get_commit(p)
        outputs = {slot: self._import_output(ref, run.store) for slot, ref in run.outputs.items()}
        seq = self._next_sequence()
        text = _render_record(branch, parents, seq, pipeline, outputs, run.scores, run.stats)
        cid = hashlib.sha256(text.encode()).hexdigest()
        _atomic_write(self._commit_path(cid), text.encode())
        self._set_head(branch, cid)
        return self.get_commit(cid)

    def commit_pipeline(self, branch: str, bindings: Mapping[str, ComponentVersion], run: PipelineRun) -> Commit:
        if self.spec is None:
            raise BadMetafile("repository has no pipeline spec")
        with self.lock():
            parent = self.head(branch)
            for cv in bindings.values():
                if cv.id not in self._components:
                    raise IncompatiblePipeline(f"{cv} is not registered in a component repository")
            pipeline = PipelineVersion(self.spec, dict(bindings))
            pipeline.check()
            return self.append_commit(branch, pipeline, run, [parent] if parent else [])

    def log(self, branch: str | None = None) -> list[Commit]:
        """Commits reachable from ``branch`` (current branch by default), newest first."""
        cid = self.head(branch or self.current_branch)
        if cid is None:
            return []
        return sorted((self.get_commit(c) for c in self.ancestors(cid)), key=lambda c: -c.sequence)

    # -- graph queries --------------------------------------------------

    def ancestors(self, cid: str) -> set[str]:
        """``cid`` and every commit reachable from it through parents."""
        seen, stack = set(), [cid]
        while stack:
            c = stack.pop()
            if c in seen:
                continue
            seen.add(c)
            stack.extend(self.get_commit(c).parents)
        return seen

    def common_ancestor(self, a: str, b: str) -> Commit:
        common = self.ancestors(a) & self.ancestors(b)
        if not common:
            raise NoCommonAncestor(f"{a[:12]} and {b[:12]} share no history")
        best = min((self.get_commit(c) for c in common), key=lambda c: (-c.sequence, c.id))
        return best

    def is_fast_forward(self, head: str, merge_head: str) -> bool:
        return self.common_ancestor(head, merge_head).id == head

    def commits_since(self, ancestor: str, head: str) -> list[Commit]:
        """Commits reachable from ``head`` but not strictly before ``ancestor``; includes ``ancestor``."""
        before = self.ancestors(ancestor) - {ancestor}
        return sorted(
            (self.get_commit(c) for c in self.ancestors(head) - before), key=lambda c: c.sequence
        )

    def fast_forward_merge(self, head_branch: str, merge_branch: str) -> Commit:
        """Adopt MERGE_HEAD's pipeline on HEAD as a two-parent commit, without re-execution."""
        with self.lock():
            head = self.head(head_branch)
            merge_head = self.head(merge_branch)
            if head is None or merge_head is None:
                raise EmptyHistory("both branches need commits to merge")
            if not self.is_fast_forward(head, merge_head):
                raise NotFastForward(f"{head_branch} has commits after the common ancestor")
            source = self.get_commit(merge_head)
            run = PipelineRun(dict(source.outputs), dict(source.scores), RunStats(), self.store)
            return self.append_commit(head_branch, source.pipeline, run, [head, merge_head])
