import csv
import io
import json

import numpy as np
import pytest

from pipevc.bench import (
    HistoryConfig,
    curves_to_csv,
    expected_linear_cet,
    generate_history,
    linear_experiment,
    make_builder,
    nonlinear_experiment,
    sample_updates,
)
from pipevc.errors import BadConfig
from pipevc.vcs import Repository

SMALL = dict(dataset_bytes=8 * 1024, payload_bytes={"model": 2048})


def test_config_validation(tmp_path):
    with pytest.raises(BadConfig):
        HistoryConfig(p_update_preproc=0.5, p_update_model=0.6)
    with pytest.raises(BadConfig):
        HistoryConfig(p_schema_change=1.5)
    with pytest.raises(BadConfig):
        HistoryConfig.from_dict({"iterations": 3, "colour": "red"})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"iterations": 4, "seed": 9}))
    cfg = HistoryConfig.load(path)
    assert cfg.iterations == 4 and cfg.seed == 9 and cfg.p_update_model == 0.6
    with pytest.raises(BadConfig):
        HistoryConfig.load(tmp_path / "missing.json")


def test_update_sampling_is_seeded():
    cfg = HistoryConfig(seed=3)
    a = sample_updates(cfg, 50, np.random.default_rng(3))
    assert a == sample_updates(cfg, 50, np.random.default_rng(3))
    assert all(not change for slot, change in a if slot == "model")
    none = sample_updates(HistoryConfig(p_schema_change=0.0), 50, np.random.default_rng(0))
    assert not any(change for _, change in none)


def test_schema_change_cascades(tmp_path):
    cfg = HistoryConfig(p_schema_change=1.0, p_update_preproc=1.0, p_update_model=0.0, iterations=2, **SMALL)
    b = make_builder(Repository.init(tmp_path / "r"), cfg)
    b.initial()
    steps = generate_history(b, cfg)
    assert [s.changed for s in steps] == [("preprocess", "model")] * 2
    assert [cv.version.render() for cv in b.repo.versions("preprocess")] == ["0.0", "1.0", "2.0"]
    assert [cv.version.render() for cv in b.repo.versions("model")] == ["0.0", "0.1", "0.2"]


def test_linear_curves_invariants():
    cfg = HistoryConfig(iterations=6, seed=2, **SMALL)
    points, steps = linear_experiment(cfg)
    base = [p for p in points if p.system == "baseline"]
    ours = [p for p in points if p.system == "versioned"]
    assert len(base) == len(ours) == 7
    for series in (base, ours):
        for a, b in zip(series, series[1:]):
            assert b.cet >= a.cet and b.cst >= a.cst and b.css >= a.css
    for a, b in zip(base, ours):
        assert b.cet <= a.cet + 1e-12
        assert b.css <= a.css
    exp_base, exp_ours = expected_linear_cet(cfg, steps)
    assert base[-1].cet == pytest.approx(exp_base, abs=1e-9)
    assert ours[-1].cet == pytest.approx(exp_ours, abs=1e-9)


def test_linear_is_reproducible():
    cfg = HistoryConfig(iterations=3, seed=5, **SMALL)
    assert curves_to_csv(linear_experiment(cfg)[0]) == curves_to_csv(linear_experiment(cfg)[0])


def test_model_only_history_runs_one_slot():
    cfg = HistoryConfig(iterations=4, p_update_preproc=0.0, p_update_model=1.0, **SMALL)
    points, steps = linear_experiment(cfg)
    assert all(s.changed == ("model",) for s in steps)
    ours = [p.cet for p in points if p.system == "versioned"]
    diffs = np.diff(ours)
    assert np.allclose(diffs, 0.05)


def test_nonlinear_experiment():
    cfg = HistoryConfig(seed=1, merge_updates=3, head_updates=1, **SMALL)
    points, reports = nonlinear_experiment(cfg)
    winners = {r.winner.describe() for r in reports.values()}
    assert len(winners) == 1
    calls = {k: r.nodes_executed for k, r in reports.items()}
    assert calls["pruned_reuse"] < calls["compat_only"] <= calls["full_enum"]
    rows = list(csv.DictReader(io.StringIO(curves_to_csv(points))))
    assert set(rows[0]) == {"system", "iteration", "cet_s", "cst_s", "cpt_s", "css_bytes"}
    final = {r["system"]: float(r["cpt_s"]) for r in rows}
    assert final["pruned_reuse"] < final["compat_only"] <= final["full_enum"]
