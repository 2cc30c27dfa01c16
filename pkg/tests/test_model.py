import hashlib
import random

import pytest
from hypothesis import given, strategies as st

from pipevc.errors import (
    BadMetafile,
    CycleDetected,
    DanglingEdge,
    EmptySpec,
    IncompatiblePipeline,
    SchemaFlagMismatch,
    UnknownSlot,
)
from pipevc.model import (
    ANY_SCHEMA,
    ComponentKind,
    ComponentMeta,
    PipelineSpec,
    PipelineVersion,
    SemanticVersion,
    is_compatible,
    next_version,
    schema_hash,
    validate_dag,
)

from helpers import cv, digest

header = st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=12)


def oracle_schema_hash(headers):
    h = hashlib.new("sha256")
    canon = sorted(x.strip().lower().encode() for x in headers)
    for i, item in enumerate(canon):
        if i:
            h.update(bytes([0x1F]))
        h.update(item)
    return h.hexdigest()


def test_schema_hash_known_value():
    assert schema_hash(["b", "a"]) == hashlib.sha256(b"a\x1fb").hexdigest()
    assert schema_hash([]) == hashlib.sha256(b"").hexdigest()


@given(st.lists(header, max_size=8))
def test_schema_hash_matches_oracle(headers):
    assert schema_hash(headers) == oracle_schema_hash(headers)


@given(st.lists(header, min_size=1, max_size=8), st.randoms())
def test_schema_hash_invariances(headers, rnd):
    shuffled = list(headers)
    rnd.shuffle(shuffled)
    mangled = [("  " + h.upper() + "\t") if rnd.random() < 0.5 else h.lower() for h in shuffled]
    assert schema_hash(mangled) == schema_hash(headers)


def test_schema_hash_distinguishes_headers():
    assert schema_hash(["a", "b"]) != schema_hash(["a", "c"])
    assert schema_hash(["ab"]) != schema_hash(["a", "b"])


def test_version_render_and_parse():
    d = digest("x")
    v = SemanticVersion("master", 1, 3, d)
    assert v.render() == "1.3"
    assert SemanticVersion("dev", 0, 2, d).render() == "dev@0.2"
    assert SemanticVersion.parse(v.full) == v
    assert SemanticVersion.parse("dev@0.2", d) == SemanticVersion("dev", 0, 2, d)
    with pytest.raises(ValueError):
        SemanticVersion.parse("0.2")
    with pytest.raises(ValueError):
        SemanticVersion.parse("x.y", d)
    with pytest.raises(ValueError):
        SemanticVersion("master", -1, 0, d)


def test_next_version_sequence():
    a, b = digest("a"), digest("b")
    v0 = SemanticVersion.initial(a)
    v1 = next_version(v0, False, a, "master")
    v2 = next_version(v1, True, b, "master")
    assert [v.render() for v in (v0, v1, v2)] == ["0.0", "0.1", "1.0"]
    assert v2.schema_digest == b
    assert next_version(v2, False, b, "dev").render() == "dev@1.1"


def test_next_version_flag_mismatch():
    a, b = digest("a"), digest("b")
    v0 = SemanticVersion.initial(a)
    with pytest.raises(SchemaFlagMismatch):
        next_version(v0, True, a, "master")
    with pytest.raises(SchemaFlagMismatch):
        next_version(v0, False, b, "master")


@given(st.lists(st.booleans(), max_size=20))
def test_next_version_counts(flags):
    v = SemanticVersion.initial(digest(0))
    for i, change in enumerate(flags):
        v = next_version(v, change, digest(v.schema_ordinal + 1) if change else v.schema_digest, "master")
    assert v.schema_ordinal == sum(flags)
    tail = len(flags) - (max([i for i, f in enumerate(flags) if f], default=-1) + 1)
    assert v.increment == tail


def test_is_compatible():
    up = cv("a", out="s1")
    assert is_compatible(up, cv("b", inp="s1"))
    assert not is_compatible(up, cv("b", inp="s2"))
    assert is_compatible(up, cv("b", inp=ANY_SCHEMA))


def test_validate_dag_order_and_errors():
    lib = ComponentKind.LIBRARY
    slots = [("a", lib), ("b", lib), ("c", lib), ("d", lib)]
    assert validate_dag(slots, [("a", "c"), ("b", "c"), ("c", "d")]) == ("a", "b", "c", "d")
    assert validate_dag(slots, [("d", "a")]) == ("b", "c", "d", "a")
    with pytest.raises(CycleDetected):
        validate_dag(slots, [("a", "b"), ("b", "a")])
    with pytest.raises(DanglingEdge):
        validate_dag(slots, [("a", "z")])
    with pytest.raises(EmptySpec):
        validate_dag([], [])


def test_spec_roundtrip_and_queries():
    spec = PipelineSpec("p", (("data", "dataset"), ("l", "library"), ("r", "library"), ("m", "library")),
                        frozenset({("data", "l"), ("data", "r"), ("l", "m"), ("r", "m")}))
    assert PipelineSpec.loads(spec.dumps()) == spec
    assert spec.order == ("data", "l", "r", "m")
    assert spec.ordered_predecessors("m") == ["l", "r"]
    assert spec.successors("data") == {"l", "r"}
    assert spec.kind_of("data") is ComponentKind.DATASET
    with pytest.raises(UnknownSlot):
        spec.kind_of("nope")
    with pytest.raises(BadMetafile):
        PipelineSpec.loads("slot = a:library\n")


def test_pipeline_check_names_edge():
    spec = PipelineSpec.chain("p", [("d", "dataset"), ("f", "library"), ("m", "library")])
    d = cv("d", out="raw", kind=ComponentKind.DATASET)
    f = cv("f", out="feat", inp="raw")
    PipelineVersion(spec, {"d": d, "f": f, "m": cv("m", inp="feat")}).check()
    with pytest.raises(IncompatiblePipeline) as err:
        PipelineVersion(spec, {"d": d, "f": f, "m": cv("m", inp="other")}).check()
    assert err.value.edge == ("f", "m")
    with pytest.raises(IncompatiblePipeline):
        PipelineVersion(spec, {"d": d, "f": f}).check()
    with pytest.raises(IncompatiblePipeline):
        PipelineVersion(spec, {"d": f, "f": f, "m": cv("m")}).check()


def test_metafile_roundtrip_and_header_lists():
    meta = ComponentMeta("cnn", ComponentKind.LIBRARY, False, digest("o"), digest("i"), "run")
    assert ComponentMeta.loads(meta.dumps()) == meta
    m = ComponentMeta.loads("name = x\nkind = library\nschema_changed = no\noutput_schema = B, a\n")
    assert m.output_schema == schema_hash(["a", "b"])
    assert m.input_schema == ANY_SCHEMA
    with pytest.raises(BadMetafile):
        ComponentMeta.loads("name = x\nkind = library\n")
    with pytest.raises(BadMetafile):
        ComponentMeta.loads("name = x\nkind = model\nschema_changed = no\noutput_schema = a\n")


def test_thousand_random_header_sets():
    rnd = random.Random(7)
    for _ in range(1000):
        hs = ["".join(rnd.choice("abcdefgh_") for _ in range(rnd.randint(1, 6))) for _ in range(rnd.randint(1, 6))]
        perm = rnd.sample(hs, len(hs))
        assert schema_hash([" " + h.upper() + " " for h in perm]) == oracle_schema_hash(hs)
