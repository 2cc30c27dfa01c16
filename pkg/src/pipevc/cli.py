"""Command-line interface.

Exit codes: 0 on success, 1 when an operation fails (one ``error=...`` line
on stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from pipevc.artifacts import read_tree
from pipevc.bench import HistoryConfig, curves_to_csv, linear_experiment, nonlinear_experiment
from pipevc.errors import BadConfig, PipevcError
from pipevc.execution import Executor
from pipevc.mergex import SearchSpace, build_search_tree, merge, merge_history, metric_merge, prepare_tree
from pipevc.model import PipelineSpec
from pipevc.scenarios import run_and_commit
from pipevc.stubs import StubConfig, write_stub_dir
from pipevc.vcs import Repository

REPO_ENV = "PIPEVC_REPO"
DEFAULT_REPO = ".pipevc"


class Output:
    """Collects ``key=value`` records (machine) or aligned rows (table)."""

    def __init__(self, fmt: str, stream=None):
        self.fmt = fmt
        self.stream = stream or sys.stdout

    def record(self, **kv) -> None:
        if self.fmt == "machine":
            for k, v in kv.items():
                self.stream.write(f"{k}={v}\n")
        else:
            width = max(len(k) for k in kv)
            for k, v in kv.items():
                self.stream.write(f"{k.ljust(width)}  {v}\n")

    def line(self, key: str, text: str) -> None:
        if self.fmt == "machine":
            self.stream.write(f"{key}={text}\n")
        else:
            self.stream.write(text + "\n")

    def raw(self, text: str) -> None:
        self.stream.write(text)


def _repo_path(args) -> Path:
    return Path(args.repo or os.environ.get(REPO_ENV) or DEFAULT_REPO)


def _open(args) -> Repository:
    return Repository.open(_repo_path(args))


def cmd_init(args, out: Output) -> None:
    spec = None
    if args.spec:
        spec = PipelineSpec.loads(Path(args.spec).read_text())
    repo = Repository.init(_repo_path(args), spec)
    out.record(repository=repo.path, branch=repo.current_branch)


def cmd_branch(args, out: Output) -> None:
    repo = _open(args)
    repo.create_branch(args.name, args.from_commit)
    out.record(branch=args.name, head=repo.head(args.name))


def cmd_checkout(args, out: Output) -> None:
    repo = _open(args)
    repo.checkout(args.branch)
    out.record(branch=args.branch)


def _parse_bind(text: str) -> tuple[str, str]:
    slot, sep, path = text.partition("=")
    if not sep or not slot or not path:
        raise argparse.ArgumentTypeError(f"expected slot=path, got {text!r}")
    return slot, path


def cmd_commit(args, out: Output) -> None:
    repo = _open(args)
    if args.spec:
        repo.set_spec(PipelineSpec.loads(Path(args.spec).read_text()))
    if repo.spec is None:
        raise BadConfig("repository has no pipeline spec; pass --spec")
    branch = args.branch or repo.current_branch
    head = repo.head(branch)
    bindings = dict(repo.get_commit(head).bindings) if head else {}
    for slot, path in args.bind:
        if slot not in repo.spec.order:
            raise BadConfig(f"unknown slot {slot!r}")
        files, modes = read_tree(path)
        bindings[slot] = repo.register_component(files, modes, branch=branch, prev=bindings.get(slot))
    executor = Executor(repo.store, mode=args.mode, metric=args.metric)
    commit = run_and_commit(repo, branch, bindings, executor)
    out.record(commit=commit.id, branch=branch, pipeline=commit.pipeline.describe(),
               executed=executor.calls, **{f"score.{k}": v for k, v in sorted(commit.scores.items())})


def cmd_log(args, out: Output) -> None:
    repo = _open(args)
    for c in repo.log(args.branch):
        scores = " ".join(f"{k}={v:.6g}" for k, v in sorted(c.scores.items()))
        parents = ",".join(p[:12] for p in c.parents) or "-"
        if out.fmt == "machine":
            out.raw(f"commit={c.id} branch={c.branch} parents={parents} pipeline={c.pipeline.describe().replace(' ', '')} {scores}\n")
        else:
            out.raw(f"{c.id[:12]}  {c.branch:<10} parents={parents}  {scores}\n    {c.pipeline.describe()}\n")


def cmd_spaces(args, out: Output) -> None:
    repo = _open(args)
    _, history = merge_history(repo, repo.resolve(args.head), repo.resolve(args.merge_head))
    spaces = SearchSpace.from_commits(repo.spec.order, history)
    for slot in spaces.slots:
        labels = ",".join(cv.version.render() for cv in spaces[slot])
        out.line(f"space.{slot}", f"{len(spaces[slot])} {labels}" if out.fmt == "machine"
                 else f"{slot}: {len(spaces[slot])} versions ({labels})")


def cmd_tree(args, out: Output) -> None:
    repo = _open(args)
    head, mh = repo.resolve(args.head), repo.resolve(args.merge_head)
    _, _, spaces, _, pruned = prepare_tree(repo, head, mh)
    kept = {tuple(n.component.id for n in node.path()): node for node in pruned.iter_nodes() if not node.is_root}
    full = build_search_tree(spaces)

    def show(node, indent: int) -> None:
        for child in node.children:
            key = tuple(n.component.id for n in child.path())
            twin = kept.get(key)
            tag = "pruned" if twin is None else ("executed" if twin.executed else "pending")
            label = f"{child.slot}={child.component.version.render()}"
            if out.fmt == "machine":
                out.raw(f"node={'/'.join(k.split('@', 1)[1] for k in key)} state={tag}\n")
            else:
                out.raw(f"{'  ' * indent}{label} [{tag}]\n")
            if twin is not None:
                show(child, indent + 1)

    show(full, 0)


def cmd_merge(args, out: Output) -> None:
    repo = _open(args)
    head_branch = repo.current_branch
    if args.ff_only:
        commit, report = repo.fast_forward_merge(head_branch, args.branch), None
    else:
        kw = dict(metric=args.metric, strategy=args.strategy, search=args.search, budget=args.budget, seed=args.seed)
        if args.search or args.budget is not None:
            commit, report = metric_merge(repo, head_branch, args.branch, **kw)
        else:
            commit, report = merge(repo, head_branch, args.branch, **kw)
    fields = dict(commit=commit.id, parents=",".join(commit.parents), pipeline=commit.pipeline.describe())
    if report is None:
        fields["fast_forward"] = "true"
    else:
        fields.update(fast_forward="false", strategy=report.strategy, score=report.winner_score,
                      candidates_total=report.candidates_total,
                      candidates_after_pruning=report.candidates_after_pruning,
                      nodes_executed=report.nodes_executed)
    out.record(**fields)
    if report is not None and args.report:
        Path(args.report).write_text(report.to_csv())


def cmd_stats(args, out: Output) -> None:
    repo = _open(args)
    s = repo.store.stats()
    out.record(
        branches=len(repo.heads),
        commits=len(repo.all_commits()),
        components=sum(len(v) for v in {**repo.dataset_repo, **repo.library_repo}.values()),
        physical_bytes=s.physical_bytes,
        logical_bytes=s.logical_bytes,
        chunks=s.chunk_count,
        objects=s.object_count,
    )


def cmd_bench(args, out: Output) -> None:
    config = HistoryConfig.load(args.config) if args.config else HistoryConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.experiment == "linear":
        points, _ = linear_experiment(config)
        text = curves_to_csv(points)
    else:
        points, reports = nonlinear_experiment(config)
        text = curves_to_csv(points)
        for name, report in reports.items():
            text += f"\n# {name}\n" + report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        out.raw(text)


def cmd_stub(args, out: Output) -> None:
    split = lambda s: tuple(h for h in s.split(",") if h) if s else ()
    cfg = StubConfig(
        name=args.name,
        role=args.role,
        token=args.token or args.name,
        cost_ms=args.cost_ms,
        transform="append-column" if args.new_columns else "identity",
        new_columns=split(args.new_columns),
        input_headers=split(args.input_headers) if args.input_headers is not None else None,
        headers=split(args.headers),
        schema_changed=args.schema_changed,
    )
    path = write_stub_dir(args.path, cfg)
    out.record(stub=path, output_schema=cfg.output_schema)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipevc", description="Version control for ML pipelines.")
    p.add_argument("--repo", help=f"repository directory (default ${REPO_ENV} or {DEFAULT_REPO})")
    p.add_argument("--format", choices=("table", "machine"), default="table")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="create a repository")
    s.add_argument("--spec", help="pipeline spec file")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("branch", help="create a branch")
    s.add_argument("name")
    s.add_argument("--from", dest="from_commit", help="commit id or branch to fork from")
    s.set_defaults(func=cmd_branch)

    s = sub.add_parser("checkout", help="switch the current branch")
    s.add_argument("branch")
    s.set_defaults(func=cmd_checkout)

    s = sub.add_parser("commit", help="bind component directories, run and commit")
    s.add_argument("--bind", action="append", type=_parse_bind, default=[], metavar="SLOT=PATH")
    s.add_argument("--spec", help="pipeline spec file (first commit)")
    s.add_argument("--branch")
    s.add_argument("--metric", default="score")
    s.add_argument("--mode", choices=("virtual", "real"), default="virtual")
    s.set_defaults(func=cmd_commit)

    s = sub.add_parser("log", help="show history")
    s.add_argument("--branch")
    s.set_defaults(func=cmd_log)

    for name, func, text in (("spaces", cmd_spaces, "component search spaces"), ("tree", cmd_tree, "pipeline search tree")):
        s = sub.add_parser(name, help=f"show the {text} of a merge")
        s.add_argument("head")
        s.add_argument("merge_head")
        s.set_defaults(func=func)

    s = sub.add_parser("merge", help="merge a branch into the current branch")
    s.add_argument("branch")
    s.add_argument("--ff-only", action="store_true")
    s.add_argument("--metric", default="score")
    s.add_argument("--strategy", choices=("naive", "full", "pc", "pcpr"), default="pcpr")
    s.add_argument("--search", choices=("prioritized", "random"))
    s.add_argument("--budget", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", help="write the merge report CSV here")
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("stats", help="repository and store statistics")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("bench", help="run a benchmark and print CSV curves")
    s.add_argument("experiment", choices=("linear", "nonlinear"))
    s.add_argument("--config", help="JSON file with history settings")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("stub", help="write a stub component directory")
    s.add_argument("path")
    s.add_argument("--name", required=True)
    s.add_argument("--role", choices=("dataset", "transform", "model"), required=True)
    s.add_argument("--token")
    s.add_argument("--cost-ms", type=float, default=0.0)
    s.add_argument("--headers", help="dataset column headers, comma separated")
    s.add_argument("--input-headers", help="expected input headers, comma separated")
    s.add_argument("--new-columns", help="columns appended by a transform")
    s.add_argument("--schema-changed", action="store_true")
    s.set_defaults(func=cmd_stub)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = Output(args.format)
    try:
        args.func(args, out)
    except PipevcError as exc:
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"error={type(exc).__name__} {msg}\n")
        return 1
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"error={type(exc).__name__} {str(exc).splitlines()[0] if str(exc) else ''}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
