import pytest

from rbsched.config import ExperimentSpec, InstanceConfig, load_experiment, parse_instance
from rbsched.errors import ConfigError
from rbsched.model import Scenario, ServiceClass, validate_instance

from conftest import CONFIGS


def test_desk_file(desk_config):
    inst = desk_config.build("drbs")
    assert (inst.B, inst.U, inst.frame.F, inst.frame.N) == (2, 6, 8, 4)
    assert validate_instance(inst) == []
    s = desk_config.build("srbs")
    assert s.frame.scenario == Scenario.STATIC and s.frame.num_units == 8


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_instance({"grid": {"T": 1e-3, "bandwidth": 5}})
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_instance({"users": {"embb": {"per_cell": 1, "floor": 3}}})
    with pytest.raises(ConfigError):
        parse_instance({"grid": {"tiling": "hexagonal"}})


def test_string_numbers_and_bps_floor():
    cfg = parse_instance({"grid": {"T": "1e-3", "chi": "0.25e-3"},
                          "users": {"embb": {"per_cell": 1, "rate_floor_bps": 1e5}}})
    assert cfg.T == 1e-3
    assert cfg.embb.rate_floor == pytest.approx(100.0)
    with pytest.raises(ConfigError):
        parse_instance({"grid": {"T": "soon"}})
    with pytest.raises(ConfigError):
        parse_instance({"users": {"embb": {"rate_floor": 1, "rate_floor_bps": 1}}})


def test_explicit_tiling():
    cfg = parse_instance({"grid": {"W": 30e3, "T": 0.5e-3, "tiling": [[0, 2, 0, 1], [0, 2, 1, 1]]}})
    assert cfg.build("srbs").frame.num_units == 2


def test_sweep_points(desk_config):
    assert desk_config.with_sweep("Rmin_e", 250).build("drbs").users[0].rate_floor == 250
    m = desk_config.with_sweep("Rmin_m", 7).build("drbs")
    assert all(u.rate_floor == 7 for u in m.users if u.service == ServiceClass.MMTC)
    assert desk_config.with_sweep("users", 2).build("drbs").U == 12
    assert desk_config.with_sweep("numRBs", 64).build("drbs").frame.F == 16
    with pytest.raises(ConfigError):
        desk_config.with_sweep("numRBs", 30)


def test_experiment_file():
    spec = load_experiment(CONFIGS / "rmin_embb.yaml")
    assert spec.scenarios == ["drbs", "srbs"] and spec.solvers == ["asm"]
    assert spec.sweep_values == (100.0, 150.0, 200.0, 300.0)
    assert spec.asm == {"max_outer": 3, "max_inner": 2}
    assert spec.instance.ref_distance == 100.0


@pytest.mark.parametrize("kw", [dict(trials=0), dict(sweep_values=(2.0, 1.0)), dict(sweep_values=()),
                                dict(scenario="hybrid"), dict(solver="greedy"),
                                dict(sweep_variable="power")])
def test_experiment_invariants(kw):
    with pytest.raises(ConfigError):
        ExperimentSpec(InstanceConfig(), **kw)


def test_experiment_unknown_key(tmp_path):
    f = tmp_path / "e.yaml"
    f.write_text("instance: x.yaml\nrepeats: 3\n")
    with pytest.raises(ConfigError, match="unknown keys"):
        load_experiment(f)
