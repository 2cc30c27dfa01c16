"""Core domain types: components, semantic versions and pipeline DAGs."""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from pipevc.errors import (
    BadMetafile,
    CycleDetected,
    DanglingEdge,
    EmptySpec,
    IncompatiblePipeline,
    SchemaFlagMismatch,
    UnknownSlot,
)

ANY_SCHEMA = "any"
MASTER = "master"

_HEX_DIGEST = re.compile(r"^[0-9a-f]{64}$")
_VERSION_RE = re.compile(r"^(?:(?P<branch>[^@#\s]+)@)?(?P<ordinal>\d+)\.(?P<increment>\d+)(?:#(?P<digest>[0-9a-f]{64}))?$")


class ComponentKind(str, enum.Enum):
    """A dataset, or a library (pre-processing method or model)."""

    DATASET = "dataset"
    LIBRARY = "library"


def schema_hash(column_headers: Iterable[str]) -> str:
    """Hash a list of column headers into a schema digest.

    Headers are trimmed, lowercased and sorted bytewise before being joined
    with the unit separator (0x1F), so order, case and surrounding
    whitespace do not matter. Returns the SHA-256 hex digest.
    """
    canon = sorted((h.strip().lower().encode("utf-8") for h in column_headers))
    return hashlib.sha256(b"\x1f".join(canon)).hexdigest()


def is_digest(value: str) -> bool:
    return bool(_HEX_DIGEST.match(value))


@dataclass(frozen=True, order=False)
class SemanticVersion:
    """``branch@schema.increment`` plus the digest of the output schema."""

    branch: str
    schema_ordinal: int
    increment: int
    schema_digest: str

    def __post_init__(self):
        if self.schema_ordinal < 0 or self.increment < 0:
            raise ValueError(f"negative version component in {self!r}")
        if not self.branch or "@" in self.branch or "#" in self.branch:
            raise ValueError(f"invalid branch name {self.branch!r}")

    @classmethod
    def initial(cls, schema_digest: str, branch: str = MASTER) -> SemanticVersion:
        return cls(branch, 0, 0, schema_digest)

    def render(self) -> str:
        if self.branch == MASTER:
            return f"{self.schema_ordinal}.{self.increment}"
        return f"{self.branch}@{self.schema_ordinal}.{self.increment}"

    def __str__(self) -> str:
        return self.render()

    @property
    def full(self) -> str:
        """Rendering that always carries branch and digest."""
        return f"{self.branch}@{self.schema_ordinal}.{self.increment}#{self.schema_digest}"

    @classmethod
    def parse(cls, text: str, schema_digest: str | None = None) -> SemanticVersion:
        m = _VERSION_RE.match(text.strip())
        if not m:
            raise ValueError(f"not a semantic version: {text!r}")
        digest = m.group("digest") or schema_digest
        if digest is None:
            raise ValueError(f"no schema digest for {text!r}")
        return cls(
            m.group("branch") or MASTER,
            int(m.group("ordinal")),
            int(m.group("increment")),
            digest,
        )

    def sort_key(self) -> tuple:
        return (self.schema_ordinal, self.increment, self.branch)


def next_version(
    prev: SemanticVersion, schema_changed: bool, new_schema_digest: str, branch: str
) -> SemanticVersion:
    """Derive the version that follows ``prev``.

    An unchanged schema bumps the increment; a schema change bumps the
    schema ordinal and resets the increment.
    """
    digest_changed = new_schema_digest != prev.schema_digest
    if schema_changed != digest_changed:
        raise SchemaFlagMismatch(
            f"schema_changed={schema_changed} but output digest "
            f"{'differs from' if digest_changed else 'equals'} {prev.render()}"
        )
    if schema_changed:
        return SemanticVersion(branch, prev.schema_ordinal + 1, 0, new_schema_digest)
    return SemanticVersion(branch, prev.schema_ordinal, prev.increment + 1, prev.schema_digest)


@dataclass(frozen=True)
class ComponentVersion:
    """One registered version of a dataset or library.

    ``payload`` is the id of the object manifest holding the packed
    metafile plus executables or data files.
    """

    name: str
    kind: ComponentKind
    version: SemanticVersion
    payload: str
    input_schema_digest: str = ANY_SCHEMA
    schema_changed: bool = False

    @property
    def output_schema_digest(self) -> str:
        return self.version.schema_digest

    @property
    def id(self) -> str:
        return f"{self.name}@{self.version.full}"

    def label(self) -> str:
        return f"{self.name}@{self.version.render()}"

    def sort_key(self) -> tuple:
        return self.version.sort_key()

    def __str__(self) -> str:
        return f"<{self.name}, {self.version.render()}>"


def is_compatible(upstream: ComponentVersion, downstream: ComponentVersion) -> bool:
    """True iff ``downstream`` accepts the output schema of ``upstream``."""
    if downstream.input_schema_digest == ANY_SCHEMA:
        return True
    return downstream.input_schema_digest == upstream.output_schema_digest


def validate_dag(slots: Sequence[tuple[str, ComponentKind]], edges: Iterable[tuple[str, str]]) -> tuple[str, ...]:
    """Check that slots/edges form a DAG and return its topological order.

    Ties between ready slots are broken by declaration order, so the order
    is a pure function of the input.
    """
    names = [s for s, _ in slots]
    if not names:
        raise EmptySpec("pipeline has no slots")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate slot names in {names}")
    index = {n: i for i, n in enumerate(names)}
    indeg = {n: 0 for n in names}
    succ: dict[str, list[str]] = {n: [] for n in names}
    for a, b in edges:
        if a not in index or b not in index:
            raise DanglingEdge(f"edge {a}->{b} names an unknown slot")
        succ[a].append(b)
        indeg[b] += 1
    order = []
    ready = sorted((n for n in names if indeg[n] == 0), key=index.__getitem__)
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
        ready.sort(key=index.__getitem__)
    if len(order) != len(names):
        stuck = sorted(n for n in names if n not in order)
        raise CycleDetected(f"cycle through slots {stuck}")
    return tuple(order)


@dataclass(frozen=True)
class PipelineSpec:
    """The DAG shape of a pipeline: named, typed slots and data-flow edges."""

    name: str
    slots: tuple[tuple[str, ComponentKind], ...]
    edges: frozenset[tuple[str, str]] = frozenset()
    order: tuple[str, ...] = field(init=False, compare=False)

    def __post_init__(self):
        slots = tuple((s, ComponentKind(k)) for s, k in self.slots)
        object.__setattr__(self, "slots", slots)
        object.__setattr__(self, "edges", frozenset(tuple(e) for e in self.edges))
        object.__setattr__(self, "order", validate_dag(slots, self.edges))

    @classmethod
    def chain(cls, name: str, slots: Sequence[tuple[str, ComponentKind | str]]) -> PipelineSpec:
        names = [s for s, _ in slots]
        return cls(name, tuple(slots), frozenset(zip(names, names[1:])))

    @property
    def slot_names(self) -> tuple[str, ...]:
        return self.order

    def kind_of(self, slot: str) -> ComponentKind:
        for s, k in self.slots:
            if s == slot:
                return k
        raise UnknownSlot(slot)

    def predecessors(self, slot: str) -> set[str]:
        self.kind_of(slot)
        return {a for a, b in self.edges if b == slot}

    def successors(self, slot: str) -> set[str]:
        self.kind_of(slot)
        return {b for a, b in self.edges if a == slot}

    def ordered_predecessors(self, slot: str) -> list[str]:
        preds = self.predecessors(slot)
        return [s for s in self.order if s in preds]

    def dumps(self) -> str:
        lines = [f"name = {self.name}"]
        lines += [f"slot = {s}:{k.value}" for s, k in self.slots]
        lines += [f"edge = {a}->{b}" for a, b in sorted(self.edges)]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> PipelineSpec:
        name = None
        slots, edges = [], []
        for key, value in parse_kv(text):
            if key == "name":
                name = value
            elif key == "slot":
                s, _, k = value.partition(":")
                slots.append((s.strip(), ComponentKind(k.strip())))
            elif key == "edge":
                a, _, b = value.partition("->")
                edges.append((a.strip(), b.strip()))
            else:
                raise BadMetafile(f"unknown pipeline spec key {key!r}")
        if name is None:
            raise BadMetafile("pipeline spec lacks 'name'")
        return cls(name, tuple(slots), frozenset(edges))


def predecessors(spec: PipelineSpec, slot: str) -> set[str]:
    return spec.predecessors(slot)


def successors(spec: PipelineSpec, slot: str) -> set[str]:
    return spec.successors(slot)


@dataclass(frozen=True)
class PipelineVersion:
    spec: PipelineSpec
    bindings: Mapping[str, ComponentVersion]

    def check(self) -> None:
        """Raise unless every slot is bound with the right kind and every edge composes."""
        for slot, kind in self.spec.slots:
            cv = self.bindings.get(slot)
            if cv is None:
                raise IncompatiblePipeline(f"slot {slot} is unbound")
            if cv.kind != kind:
                raise IncompatiblePipeline(f"slot {slot} expects a {kind.value}, got {cv.kind.value} {cv}")
        extra = set(self.bindings) - set(self.spec.order)
        if extra:
            raise IncompatiblePipeline(f"bindings for unknown slots {sorted(extra)}")
        for a, b in sorted(self.spec.edges):
            if not is_compatible(self.bindings[a], self.bindings[b]):
                raise IncompatiblePipeline(
                    f"{self.bindings[b]} cannot consume the output of {self.bindings[a]} (edge {a}->{b})",
                    edge=(a, b),
                )

    def version_tuple(self) -> tuple:
        return tuple(self.bindings[s].sort_key() for s in self.spec.order)

    def describe(self) -> str:
        return ", ".join(f"{s}={self.bindings[s].label()}" for s in self.spec.order)


def parse_kv(text: str) -> list[tuple[str, str]]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise BadMetafile(f"line {lineno}: expected key = value, got {raw!r}")
        out.append((key.strip(), value.strip()))
    return out


def _parse_bool(value: str) -> bool:
    v = value.lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise BadMetafile(f"not a boolean: {value!r}")


def parse_schema_field(value: str) -> str:
    """A 64-hex digest is taken as-is; anything else is a comma-separated header list."""
    value = value.strip()
    if value == ANY_SCHEMA:
        return ANY_SCHEMA
    if is_digest(value):
        return value
    return schema_hash([h for h in value.split(",")] if value else [])


@dataclass(frozen=True)
class ComponentMeta:
    """Contents of a component metafile."""

    name: str
    kind: ComponentKind
    schema_changed: bool
    output_schema: str
    input_schema: str = ANY_SCHEMA
    exec: str | None = None

    @classmethod
    def loads(cls, text: str) -> ComponentMeta:
        fields = dict(parse_kv(text))
        missing = [k for k in ("name", "kind", "schema_changed", "output_schema") if k not in fields]
        if missing:
            raise BadMetafile(f"metafile lacks required keys {missing}")
        try:
            kind = ComponentKind(fields["kind"])
        except ValueError:
            raise BadMetafile(f"unknown component kind {fields['kind']!r}") from None
        output = parse_schema_field(fields["output_schema"])
        if output == ANY_SCHEMA:
            raise BadMetafile("output_schema cannot be 'any'")
        input_schema = parse_schema_field(fields.get("input_schema", ANY_SCHEMA))
        if kind is ComponentKind.DATASET:
            input_schema = ANY_SCHEMA
        return cls(
            name=fields["name"],
            kind=kind,
            schema_changed=_parse_bool(fields["schema_changed"]),
            output_schema=output,
            input_schema=input_schema,
            exec=fields.get("exec"),
        )

    def dumps(self) -> str:
        lines = [
            f"name = {self.name}",
            f"kind = {self.kind.value}",
            f"schema_changed = {'true' if self.schema_changed else 'false'}",
            f"output_schema = {self.output_schema}",
            f"input_schema = {self.input_schema}",
        ]
        if self.exec:
            lines.append(f"exec = {self.exec}")
        return "\n".join(lines) + "\n"
