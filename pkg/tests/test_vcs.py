import pytest

from pipevc.errors import (
    AlreadyExists,
    DuplicateBranch,
    EmptyHistory,
    IncompatiblePipeline,
    NotARepository,
    NotFastForward,
    UnknownBranch,
    UnknownCommit,
)
from pipevc.execution import Executor, run_pipeline
from pipevc.model import MASTER
from pipevc.scenarios import FIG_SLOTS, figure_history, run_and_commit
from pipevc.stubs import StubConfig, make_stub_component
from pipevc.vcs import Repository


@pytest.fixture(scope="module")
def fig4(tmp_path_factory):
    return figure_history(tmp_path_factory.mktemp("fig4") / "repo")


def labels(commit):
    return [commit.bindings[s].version.render() for s in FIG_SLOTS]


def test_init_and_open_errors(tmp_path):
    Repository.init(tmp_path / "r")
    with pytest.raises(AlreadyExists):
        Repository.init(tmp_path / "r")
    with pytest.raises(NotARepository):
        Repository.open(tmp_path / "nothing")
    repo = Repository.open(tmp_path / "r")
    assert repo.current_branch == MASTER and repo.head(MASTER) is None
    with pytest.raises(EmptyHistory):
        repo.head_commit(MASTER)
    with pytest.raises(UnknownCommit):
        repo.create_branch("dev")
    with pytest.raises(UnknownBranch):
        repo.head("nope")


def test_figure_version_numbering(fig4):
    repo = fig4.repo
    dev = [labels(c) for c in reversed(repo.log("dev"))]
    assert dev == [
        ["0.0", "0.0", "0.0", "0.0"],
        ["0.0", "0.0", "0.0", "dev@0.1"],
        ["0.0", "0.0", "dev@1.0", "dev@0.2"],
        ["0.0", "0.0", "dev@1.0", "dev@0.3"],
        ["0.0", "dev@0.1", "dev@1.0", "dev@0.3"],
    ]
    assert labels(repo.head_commit(MASTER)) == ["0.0", "0.0", "0.0", "0.4"]
    assert [cv.version.render() for cv in repo.versions("cnn")] == ["0.0", "dev@0.1", "dev@0.2", "dev@0.3", "0.4"]
    assert set(repo.dataset_repo) == {"dataset"}
    assert set(repo.library_repo) == {"data_cleanse", "feature_extract", "cnn"}


def test_reopen_sees_same_state(fig4):
    again = Repository.open(fig4.repo.path)
    assert again.heads == fig4.repo.heads
    assert [c.id for c in again.log("dev")] == [c.id for c in fig4.repo.log("dev")]
    head = again.head_commit("dev")
    assert head.bindings == fig4.repo.head_commit("dev").bindings
    assert head.outputs == fig4.repo.head_commit("dev").outputs


def test_commit_ids_are_content_hashes(fig4, tmp_path):
    other = figure_history(tmp_path / "again")
    assert [c.id for c in other.repo.log("dev")] == [c.id for c in fig4.repo.log("dev")]


def test_common_ancestor_and_history(fig4):
    repo = fig4.repo
    root = repo.log(MASTER)[-1]
    lca = repo.common_ancestor(repo.head(MASTER), repo.head("dev"))
    assert lca.id == root.id
    assert not repo.is_fast_forward(repo.head(MASTER), repo.head("dev"))
    since = repo.commits_since(lca.id, repo.head("dev"))
    assert since[0].id == lca.id and len(since) == 5


def test_resolve_prefix_and_branch(fig4):
    repo = fig4.repo
    head = repo.head("dev")
    assert repo.resolve("dev") == head
    assert repo.resolve(head[:10]) == head
    with pytest.raises(UnknownCommit):
        repo.resolve("zzzz")


def test_branch_rules(tmp_path):
    b = figure_history(tmp_path / "r", conflict=False)
    repo = b.repo
    with pytest.raises(DuplicateBranch):
        repo.create_branch("dev")
    with pytest.raises(ValueError):
        repo.create_branch("bad name")
    repo.create_branch("old", repo.log("dev")[-1].id[:12])
    assert repo.head("old") == repo.log(MASTER)[-1].id
    repo.checkout("old")
    assert repo.current_branch == "old"
    with pytest.raises(UnknownBranch):
        repo.checkout("missing")


def test_fast_forward_merge(tmp_path):
    b = figure_history(tmp_path / "r", conflict=False)
    repo = b.repo
    master, dev = repo.head(MASTER), repo.head("dev")
    assert repo.is_fast_forward(master, dev)
    commit = repo.fast_forward_merge(MASTER, "dev")
    assert commit.parents == (master, dev)
    assert commit.bindings == repo.get_commit(dev).bindings
    assert commit.outputs == repo.get_commit(dev).outputs
    assert commit.stats.pipeline_time == 0


def test_fast_forward_refused(fig4):
    with pytest.raises(NotFastForward):
        fig4.repo.fast_forward_merge(MASTER, "dev")


def test_incompatible_commit_is_rejected(tmp_path):
    b = figure_history(tmp_path / "r", conflict=False)
    repo = b.repo
    bindings = dict(repo.head_commit("dev").bindings)
    bindings["cnn"] = repo.versions("cnn")[0]
    run = run_pipeline(repo.spec, dict(repo.head_commit(MASTER).bindings), Executor(repo.store))
    with pytest.raises(IncompatiblePipeline) as err:
        repo.commit_pipeline("dev", bindings, run)
    assert err.value.edge == ("feature_extract", "cnn")


def test_reregistering_payload_returns_same_version(tmp_path):
    b = figure_history(tmp_path / "r", conflict=False)
    cfg = b.state["dev"]["cnn"]
    files, modes = make_stub_component(cfg)
    again = b.repo.register_component(files, modes, branch=MASTER)
    assert again == b.bound["dev"]["cnn"]


def test_commit_with_stub_config_and_reuse(tmp_path):
    b = figure_history(tmp_path / "r", conflict=False)
    repo = b.repo
    cfg = StubConfig("cnn", "model", "fresh", input_headers=b.state["dev"]["cnn"].input_headers)
    files, modes = make_stub_component(cfg)
    bindings = dict(repo.head_commit("dev").bindings)
    bindings["cnn"] = repo.register_component(files, modes, branch="dev", prev=bindings["cnn"])
    assert bindings["cnn"].version.render() == "dev@0.4"
    ex = Executor(repo.store)
    commit = run_and_commit(repo, "dev", bindings, ex)
    assert ex.calls == 1
    assert repo.head("dev") == commit.id
