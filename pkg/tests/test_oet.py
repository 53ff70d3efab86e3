"""Entropic unbalanced coupling solver against a brute-force reference."""

import numpy as np
import pytest

from wfrmfm import oet
from wfrmfm.config import COST_INF, NumericError
from wfrmfm.data import WeightedCloud


def cloud(points, masses, t=0.0):
    return WeightedCloud(np.atleast_2d(np.asarray(points, dtype=float)),
                         np.asarray(masses, dtype=float), time=t)


def random_instance(rng, n0, n1, delta, spread=2.0):
    src = cloud(rng.uniform(-spread, spread, size=(n0, 2)),
                rng.uniform(0.3, 2.0, size=n0))
    tgt = cloud(rng.uniform(-spread, spread, size=(n1, 2)),
                rng.uniform(0.3, 2.0, size=n1), t=1.0)
    return src, tgt


def test_cost_matrix_values():
    delta = 1.0
    src = cloud([[0.0, 0.0], [1.0, 0.0]], [1.0, 1.0])
    tgt = cloud([[0.0, 0.0], [np.pi, 0.0]], [1.0, 1.0], t=1.0)
    C = oet.wfr_cost_matrix(src, tgt, delta)
    assert C[0, 0] == 0.0
    # distance pi * delta is already out of the cone: sentinel cost
    assert C[0, 1] == COST_INF
    want = -2.0 * np.log(np.cos(0.5))
    assert C[1, 0] == pytest.approx(want, rel=1e-14)


def test_entropic_matches_brute_force_small():
    rng = np.random.default_rng(21)
    delta = 1.2
    for trial in range(10):
        n0, n1 = rng.integers(1, 5), rng.integers(1, 5)
        src, tgt = random_instance(rng, int(n0), int(n1), delta)
        plan = oet.solve_oet(src, tgt, delta, epsilon=1e-3)
        assert plan.converged
        ref_plan, ref_obj = oet.brute_force_oet(src, tgt, delta)
        got_obj = oet.oet_objective(plan.entries,
                                    oet.wfr_cost_matrix(src, tgt, delta),
                                    src.masses, tgt.masses)
        assert got_obj <= ref_obj * 1.01 + 1e-9
        assert got_obj >= ref_obj - 1e-6


def test_out_of_cone_entries_exactly_zero():
    delta = 0.5
    src = cloud([[0.0, 0.0], [10.0, 0.0]], [1.0, 1.0])
    tgt = cloud([[0.1, 0.0], [10.1, 0.0]], [1.0, 1.0], t=1.0)
    plan = oet.solve_oet(src, tgt, delta, epsilon=1e-2)
    # cross pairs are far outside the cone
    assert plan.entries[0, 1] == 0.0
    assert plan.entries[1, 0] == 0.0
    assert plan.entries[0, 0] > 0
    assert plan.entries[1, 1] > 0


def test_all_mass_destroyed_when_everything_out_of_cone():
    delta = 0.3
    src = cloud([[0.0, 0.0]], [2.0])
    tgt = cloud([[5.0, 0.0]], [1.5], t=1.0)
    plan = oet.solve_oet(src, tgt, delta, epsilon=1e-2)
    assert np.all(plan.entries == 0.0)
    sc = oet.semi_coupling(plan, src)
    assert sc.death_rows.tolist() == [True]


def test_semi_coupling_reproduces_source_marginal():
    rng = np.random.default_rng(22)
    delta = 1.5
    src, tgt = random_instance(rng, 30, 40, delta, spread=1.5)
    plan = oet.solve_oet(src, tgt, delta, epsilon=5e-3)
    sc = oet.semi_coupling(plan, src)
    live = ~sc.death_rows
    assert np.allclose(sc.entries.sum(axis=1)[live], src.masses[live],
                       rtol=1e-12, atol=1e-14)
    assert np.all(sc.entries[sc.death_rows] == 0.0)


def test_pair_masses_reproduce_target_marginal():
    # gamma0-weighted terminal masses must add up to the target measure:
    # sum_i gamma0_ij * m1(i, j) = mu1_j wherever the column is live
    rng = np.random.default_rng(23)
    delta = 1.5
    src, tgt = random_instance(rng, 25, 35, delta, spread=1.5)
    plan = oet.solve_oet(src, tgt, delta, epsilon=5e-3)
    sc = oet.semi_coupling(plan, src)
    pm = oet.pair_masses(plan, sc, tgt)
    recon = (sc.entries * pm).sum(axis=0)
    live_cols = plan.entries.sum(axis=0) > 0
    assert np.allclose(recon[live_cols], tgt.masses[live_cols],
                       rtol=1e-10, atol=1e-12)


def test_growth_ratio_consistency():
    # when everything is comfortably in cone, total implied terminal mass
    # approaches the target total as epsilon shrinks
    rng = np.random.default_rng(24)
    src, tgt = random_instance(rng, 20, 20, 2.0, spread=0.8)
    plan = oet.solve_oet(src, tgt, 2.0, epsilon=1e-3)
    sc = oet.semi_coupling(plan, src)
    pm = oet.pair_masses(plan, sc, tgt)
    implied = (sc.entries * pm).sum()
    assert implied == pytest.approx(tgt.total_mass(), rel=1e-6)


def test_solver_determinism():
    rng = np.random.default_rng(25)
    src, tgt = random_instance(rng, 12, 9, 1.1)
    a = oet.solve_oet(src, tgt, 1.1, epsilon=2e-3)
    b = oet.solve_oet(src, tgt, 1.1, epsilon=2e-3)
    assert a.entries.tobytes() == b.entries.tobytes()
    assert a.iterations == b.iterations


def test_minibatch_determinism_and_degeneracy():
    rng = np.random.default_rng(26)
    src, tgt = random_instance(rng, 40, 40, 1.4)
    a = oet.minibatch_semi_coupling(src, tgt, 16, 1.4, 1e-2, seed=5)
    b = oet.minibatch_semi_coupling(src, tgt, 16, 1.4, 1e-2, seed=5)
    assert a.entries.tobytes() == b.entries.tobytes()
    assert a.src_indices.tolist() == b.src_indices.tolist()
    assert a.entries.shape == (16, 16)
    # batch >= n degenerates to the full solve
    full = oet.minibatch_semi_coupling(src, tgt, 400, 1.4, 1e-2, seed=5)
    assert full.entries.shape == (40, 40)
    assert full.src_indices.tolist() == list(range(40))


def test_plan_round_trip(tmp_path):
    rng = np.random.default_rng(27)
    src, tgt = random_instance(rng, 7, 5, 1.3)
    plan = oet.solve_oet(src, tgt, 1.3, epsilon=3e-3)
    path = tmp_path / "plan.bin"
    oet.write_plan(plan, path)
    back = oet.read_plan(path)
    assert back.entries.tobytes() == plan.entries.tobytes()
    assert back.epsilon == plan.epsilon


def test_plan_reader_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a plan at all")
    with pytest.raises(NumericError):
        oet.read_plan(path)


def test_epsilon_must_be_positive():
    src = cloud([[0.0, 0.0]], [1.0])
    tgt = cloud([[0.5, 0.0]], [1.0], t=1.0)
    with pytest.raises(ValueError):
        oet.solve_oet(src, tgt, 1.0, epsilon=0.0)
