import dataclasses
import json

import numpy as np
import pytest

from rbsched.config import ExperimentSpec, load_instance_config
from rbsched.errors import AsymmetricInstance, ConfigError
from rbsched.harness import (METRIC_COLUMNS, aggregate, config_hash, constraint_counts, emit_outputs,
                             load_metrics_csv, predicted_complexity, run_experiment, run_trials)
from rbsched.model import build_drbs_grid, build_srbs_grid, make_instance, mixed_numerology_tiling

from conftest import CONFIGS


def _sym(B, F, N, K):
    fr = build_drbs_grid(N * 0.25e-3, F * 15e3, 0.25e-3, 15e3)
    return make_instance(fr, B=B, per_class={"embb": K, "mmtc": K, "urllc": K})


def test_gamma1_reference_value():
    rep = predicted_complexity(_sym(4, 16, 4, 2), "drbs")
    assert rep.gamma1 == 2580           # 8 + 8 + 512 + 512 + 4 + 1536


def test_unit_scale_theta():
    g1, g2, t1, t2 = constraint_counts(1, 1, 1, 1, 0, 0, "drbs")
    assert t1 == 3


@pytest.mark.parametrize("B,F,N,K", [(1, 2, 2, 1), (2, 8, 4, 1), (4, 16, 4, 2)])
def test_drbs_needs_more_assignment_constraints(B, F, N, K):
    inst = _sym(B, F, N, K)
    d = predicted_complexity(inst, "drbs")
    s = predicted_complexity(inst, "srbs")
    assert d.gamma2 - s.gamma2 == 4 * N * B * K
    assert d.gamma1 == s.gamma1
    assert d.iter_bound > s.iter_bound
    assert d.iter_power == pytest.approx(np.log10(d.gamma1 / 1e-8))


def test_asymmetric_instance():
    inst = _sym(2, 2, 2, 1)
    inst = inst.with_users(inst.users[:-1])
    with pytest.raises(AsymmetricInstance):
        predicted_complexity(inst)


def _tiny_spec(**kw):
    cfg = load_instance_config(CONFIGS / "tiny.yaml")
    base = dict(scenario="drbs", solver="both", sweep_variable="Rmin_e", sweep_values=(5.0,),
                trials=1, seed=11)
    base.update(kw)
    return ExperimentSpec(cfg, **base)


@pytest.fixture(scope="module")
def tiny_records():
    spec = _tiny_spec(trials=2)
    return spec, run_trials(spec)


def test_monotonic_dominates_asm(tiny_records):
    spec, recs = tiny_records
    by = {(r.trial, r.solver): r for r in recs}
    for t in range(spec.trials):
        a, m = by[(t, "asm")], by[(t, "monotonic")]
        if a.status == m.status == "ok":
            assert m.sum_rate >= a.sum_rate - 1e-6


def test_outputs_deterministic(tiny_records, tmp_path):
    spec, recs = tiny_records
    rows = aggregate(recs, spec.sweep_variable)
    assert len(rows) == 2                                   # one per (value, scenario, solver)
    emit_outputs(rows, spec, tmp_path / "a", records=recs)
    rows2 = run_experiment(spec)
    emit_outputs(rows2, spec, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "traces").is_dir()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == METRIC_COLUMNS


def test_csv_roundtrip(tiny_records, tmp_path):
    spec, recs = tiny_records
    rows = aggregate(recs, spec.sweep_variable)
    emit_outputs(rows, spec, tmp_path)
    back = load_metrics_csv(tmp_path / "metrics.csv")
    assert back == [dataclasses.replace(r, wall_time=0.0) for r in rows]


def test_empty_rows_is_usage_error(tmp_path):
    with pytest.raises(ConfigError):
        emit_outputs([], _tiny_spec(), tmp_path)


def test_manifest_hash_tracks_config(tiny_records, tmp_path):
    spec, recs = tiny_records
    rows = aggregate(recs, spec.sweep_variable)
    emit_outputs(rows, spec, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config_sha256"] == config_hash(spec)
    assert man["seed"] == spec.seed and "numpy" in man["versions"]
    h = config_hash(spec)
    assert config_hash(dataclasses.replace(spec, seed=12)) != h
    assert config_hash(dataclasses.replace(spec, trials=3)) != h
    inst2 = dataclasses.replace(spec.instance, p_max_db=39.0)
    assert config_hash(dataclasses.replace(spec, instance=inst2)) != h


def test_outage_grows_with_embb_floor():
    spec = _tiny_spec(solver="monotonic", sweep_values=(5.0, 40.0, 80.0, 120.0), trials=4, seed=3)
    rows = run_experiment(spec)
    pe = [r.outage_embb for r in rows]
    assert pe == sorted(pe) and pe[-1] > pe[0]
    assert all(r.failures <= r.trials for r in rows)


def test_failures_score_zero():
    spec = _tiny_spec(solver="monotonic", sweep_values=(1e4,), trials=1)
    (r,) = run_trials(spec)
    assert r.status == "infeasible" and r.sum_rate == 0.0
    assert not r.precheck


def test_worker_pool_matches_serial():
    spec = _tiny_spec(solver="monotonic", trials=2)
    a = run_experiment(spec, workers=1)
    b = run_experiment(spec, workers=2)
    strip = lambda rows: [dataclasses.replace(r, wall_time=0.0) for r in rows]
    assert strip(a) == strip(b)
