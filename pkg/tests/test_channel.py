import numpy as np

from rbsched.channel import (distances, dump_channel_csv, load_channel_csv, path_loss, sample_channel,
                             sample_placement, trial_seed)
from rbsched.model import build_drbs_grid, make_instance


def _inst():
    fr = build_drbs_grid(1e-3, 60e3, 0.25e-3, 15e3)
    return make_instance(fr, B=2, ref_distance=100.0, per_class={"embb": 1, "mmtc": 1, "urllc": 1})


def test_placement_inside_square_and_deterministic():
    inst = _inst()
    a = sample_placement(inst, 3)
    b = sample_placement(inst, 3)
    assert [u.position for u in a.users] == [u.position for u in b.users]
    for u in a.users:
        bx, by = inst.cells[u.cell].bs_position
        assert abs(u.position[0] - bx) <= 250 and abs(u.position[1] - by) <= 250


def test_channel_shape_and_path_loss_floor():
    inst = sample_placement(_inst(), 5)
    real = sample_channel(inst, 5)
    assert real.shape == (2, inst.U, 4, 4)
    assert (real.g > 0).all()
    L = path_loss(inst)
    assert (L <= 1.0).all()
    d = distances(inst)
    np.testing.assert_allclose(L, np.maximum(d / 100.0, 1.0) ** -3.0)


def test_seeds_differ():
    inst = sample_placement(_inst(), 1)
    assert not np.allclose(sample_channel(inst, 1).g, sample_channel(inst, 2).g)
    assert trial_seed(1, 0) != trial_seed(1, 1)


def test_csv_roundtrip(tmp_path):
    inst = sample_placement(_inst(), 7)
    real = sample_channel(inst, 7)
    dump_channel_csv(real, tmp_path / "g.csv")
    back = load_channel_csv(tmp_path / "g.csv")
    np.testing.assert_array_equal(back.g, real.g)
