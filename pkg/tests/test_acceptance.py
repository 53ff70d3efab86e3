"""Acceptance gate: ten end-to-end properties of the full system.

Each test prints one PASS/FAIL line with the measured numbers next to
their required bounds.  The heavyweight artifacts (trained models) are
built once per session and shared by the criteria that score them.
"""

import json
import time

import numpy as np
import pytest
from scipy.integrate import simpson

from wfrmfm import (cli, datasets, geometry, inference, metrics, net, oet,
                    training)
from wfrmfm.config import COST_INF
from wfrmfm.data import SnapshotDataset, WeightedCloud


def _verdict(label: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


def _random_in_cone_pair(rng, delta, d=3):
    x0 = rng.standard_normal(d)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    dist = rng.uniform(0.0, 0.95 * np.pi * delta)
    x1 = x0 + dist * direction
    m0 = rng.uniform(0.2, 3.0)
    m1 = rng.uniform(0.2, 3.0)
    return x0, x1, m0, m1


# ------------------------------------------------------------ fixtures ----

@pytest.fixture(scope="session")
def gene_model():
    """Generate the gene benchmark and train the preset on it, once."""
    t0 = time.perf_counter()
    ds = datasets.gen_gene_dataset(n0=400, seed=0)
    cfg = training.preset("gene")
    params, _log = training.train(ds, cfg)
    return ds, params, time.perf_counter() - t0


@pytest.fixture(scope="session")
def dirac_model():
    """Train on a single weighted point pair with a known closed form."""
    x0 = np.array([0.0, 0.0])
    x1 = np.array([1.2, 0.9])
    m0, m1, delta = 1.0, 1.8, 1.5
    ds = SnapshotDataset([
        WeightedCloud(x0[None, :], np.array([m0]), time=0.0),
        WeightedCloud(x1[None, :], np.array([m1]), time=1.0),
    ], time_grid=np.array([0.0, 1.0]))
    cfg = training.TrainConfig(delta=delta, p_diff=0.6, growth_weight=1.0,
                               sigma=0.01, epsilon=1e-3, batch_size=256,
                               steps=2000, seed=0, checkpoint_every=10 ** 9)
    t0 = time.perf_counter()
    params, _log = training.train(ds, cfg)
    gc = geometry.geodesic_constants(x0, x1, m0, m1, delta)
    return dict(params=params, gc=gc, x0=x0, x1=x1, m0=m0, m1=m1,
                seconds=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def perturb_model():
    """Generate 50 conditions, train on 20, and keep 30 held out."""
    t0 = time.perf_counter()
    train_pairs, test_pairs = datasets.gen_perturbation_benchmark(
        n_conditions=50, n_train=20, seed=0, n_cells=200)
    all_pairs = sorted(train_pairs + test_pairs,
                       key=lambda p: p[0].condition_id)
    table = datasets.condition_embeddings(
        [s for s, _ in train_pairs], [s for s, _ in all_pairs])
    cfg = training.preset("perturb")
    conditions = [(s.condition_id, ds) for s, ds in train_pairs]
    params, _log = training.train_conditional(conditions, cfg, table)
    return dict(params=params, test_pairs=test_pairs,
                seconds=time.perf_counter() - t0)


# ------------------------------------------------------------ criteria ----

def test_point_pair_geometry_identities_and_action():
    """Distance identities, mass-curve endpoints, energy quadrature."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    delta = 1.3

    for _ in range(200):
        x0, x1, m0, m1 = _random_in_cone_pair(rng, delta)
        a = geometry.wfr_dd_sq(m0, x0, m1, x1, delta)
        b = geometry.wfr_dd_sq(m1, x1, m0, x0, delta)
        assert a == b and a >= 0.0
        x = rng.standard_normal(3)
        m = rng.uniform(0.1, 5.0)
        assert geometry.wfr_dd_sq(m, x, m, x, delta) == 0.0

    pairs = [_random_in_cone_pair(rng, delta) for _ in range(1000)]
    gc = geometry.geodesic_constants_batch(
        np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]),
        np.array([p[2] for p in pairs]), np.array([p[3] for p in pairs]),
        delta)
    end0 = np.max(np.abs(geometry.mass_at(gc, 0.0) - gc.m0) / gc.m0)
    end1 = np.max(np.abs(geometry.mass_at(gc, 1.0) - gc.m1) / gc.m1)

    worst_action = 0.0
    checked = 0
    while checked < 40:
        x0, x1, m0, m1 = _random_in_cone_pair(rng, delta)
        if m1 < 0.1:
            continue
        g1 = geometry.geodesic_constants(x0, x1, m0, m1, delta)
        want = geometry.wfr_dd_sq(m0, x0, m1, x1, delta)
        grid = np.linspace(0.0, 1.0, 20001)
        m = geometry.mass_at(g1, grid)
        u_sq = (g1.omega0 @ g1.omega0) / (m * m)
        g = (2.0 * g1.A * grid - 2.0 * g1.B) / m
        integrand = 0.5 * m * (u_sq + delta * delta * g * g)
        got = simpson(integrand, x=grid)
        worst_action = max(worst_action, abs(got - want) / want)
        checked += 1

    secs = time.perf_counter() - t0
    ok = end0 <= 1e-10 and end1 <= 1e-10 and worst_action <= 1e-4 and secs < 5
    _verdict("geometry identities", ok,
             f"endpoint rel {max(end0, end1):.1e} (<=1e-10), "
             f"action rel {worst_action:.1e} (<=1e-4), {secs:.1f}s (<5s)")


def test_entropic_solver_matches_exhaustive_reference():
    """Tiny-instance objectives within 1%; cone-violating entries zero."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    delta = 1.2
    worst_gap = 0.0
    cone_violations = 0
    out_of_cone_seen = 0
    for _ in range(50):
        n0, n1 = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        src = WeightedCloud(rng.uniform(-2.0, 2.0, size=(n0, 2)),
                            rng.uniform(0.3, 2.0, size=n0), time=0.0)
        tgt = WeightedCloud(rng.uniform(-2.0, 2.0, size=(n1, 2)),
                            rng.uniform(0.3, 2.0, size=n1), time=1.0)
        cost = oet.wfr_cost_matrix(src, tgt, delta)
        plan = oet.solve_oet(src, tgt, delta, epsilon=1e-3)
        assert plan.converged
        _ref_plan, ref_obj = oet.brute_force_oet(src, tgt, delta)
        got_obj = oet.oet_objective(plan.entries, cost,
                                    src.masses, tgt.masses)
        assert got_obj >= ref_obj - 1e-6
        denom = max(abs(ref_obj), 1e-9)
        worst_gap = max(worst_gap, (got_obj - ref_obj) / denom)
        far = cost == COST_INF
        out_of_cone_seen += int(far.sum())
        cone_violations += int(np.count_nonzero(plan.entries[far]))

    secs = time.perf_counter() - t0
    ok = (worst_gap <= 0.01 and cone_violations == 0
          and out_of_cone_seen > 0 and secs < 60)
    _verdict("entropic coupling vs reference", ok,
             f"worst objective gap {worst_gap * 100:.3f}% (<=1%), "
             f"{cone_violations} nonzero out-of-cone entries of "
             f"{out_of_cone_seen} (=0), {secs:.1f}s (<60s)")


def test_direction_derivative_and_gradients_match_finite_differences():
    """Forward-mode and backward-mode derivatives vs central differences."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(123)
    params = net.init(d=2, depth=5, width=256, seed=9)
    for arr in params.h_weights + params.h_biases:
        arr += 0.05 * rng.standard_normal(arr.shape)

    worst_jvp = 0.0
    n_jvp = tries = 0
    while n_jvp < 100 and tries < 500:
        tries += 1
        x = rng.standard_normal((1, 2))
        t = rng.random(1)
        T = t + (1.0 - t) * rng.random(1)
        dx = rng.standard_normal((1, 2))
        dt = rng.standard_normal(1)
        dT = rng.standard_normal(1)
        h = 1e-6
        vp, hp = net.forward(params, x + h * dx, t + h * dt, T + h * dT)
        vm, hm = net.forward(params, x - h * dx, t - h * dt, T - h * dT)
        v0, h0 = net.forward(params, x, t, T)
        fd_v = (vp - vm) / (2 * h)
        fd_h = (hp - hm) / (2 * h)
        scale = max(np.abs(fd_v).max(), np.abs(fd_h).max(), 1.0)
        curv = max(np.abs(vp + vm - 2 * v0).max(),
                   np.abs(hp + hm - 2 * h0).max())
        if curv > 1e-3 * h * scale:
            continue  # stencil straddles an activation kink; redraw
        rv, rh = net.jvp(params, x, t, T, dx, dt, dT)
        err = max(np.abs(rv.directional_derivative - fd_v).max(),
                  np.abs(rh.directional_derivative - fd_h).max()) / scale
        worst_jvp = max(worst_jvp, err)
        n_jvp += 1

    bn = 32
    batch = net.Batch(
        x=rng.standard_normal((bn, 2)), t=rng.random(bn),
        T=rng.random(bn) * 0.5 + 0.5,
        v_target=rng.standard_normal((bn, 2)),
        h_target=rng.standard_normal(bn),
        weight=rng.random(bn) + 0.5)
    base_loss, grads = net.loss_and_grads(params, batch, lam=0.7)
    arrays, grad_arrays = params.arrays(), grads.arrays()

    worst_g = 0.0
    n_g = tries = 0
    while n_g < 100 and tries < 500:
        tries += 1
        ai = int(rng.integers(len(arrays)))
        arr, garr = arrays[ai], grad_arrays[ai]
        if arr.size == 0:
            continue
        flat = int(rng.integers(arr.size))
        g = float(garr.flat[flat])
        h = 1e-5
        old = float(arr.flat[flat])
        arr.flat[flat] = old + h
        lp, _ = net.loss_and_grads(params, batch, lam=0.7)
        arr.flat[flat] = old - h
        lm, _ = net.loss_and_grads(params, batch, lam=0.7)
        arr.flat[flat] = old
        fd = (lp - lm) / (2 * h)
        if abs(lp + lm - 2 * base_loss) > 1e-3 * h * max(abs(fd), 1.0):
            continue
        worst_g = max(worst_g, abs(fd - g) / max(abs(g), abs(fd), 1e-6))
        n_g += 1

    secs = time.perf_counter() - t0
    ok = (n_jvp == 100 and n_g == 100 and worst_jvp <= 1e-4
          and worst_g <= 1e-4 and secs < 30)
    _verdict("derivatives vs finite differences", ok,
             f"direction worst rel {worst_jvp:.1e}, gradient worst rel "
             f"{worst_g:.1e} (both <=1e-4, 100 probes each), "
             f"{secs:.1f}s (<30s)")


def test_single_pair_training_recovers_closed_form_path(dirac_model):
    """One-step jump and equal-time field against the analytic solution."""
    params, gc = dirac_model["params"], dirac_model["gc"]
    x0, x1, m0, m1 = (dirac_model[k] for k in ("x0", "x1", "m0", "m1"))
    t0 = time.perf_counter()

    start = WeightedCloud(x0[None, :], np.array([m0]), time=0.0)
    out = inference.one_step(params, start)
    disp_err = (np.linalg.norm((out.points[0] - x0) - (x1 - x0))
                / np.linalg.norm(x1 - x0))
    mass_err = abs(out.masses[0] - m1) / m1

    worst_v = 0.0
    for s in np.linspace(0.0, 1.0, 21):
        pos, _m, u, _g = geometry.dirac_path_state(gc, float(s))
        v, _h = net.forward(params, pos[None, :], np.array([s]),
                            np.array([s]))
        worst_v = max(worst_v, np.linalg.norm(v[0] - u) / np.linalg.norm(u))

    secs = dirac_model["seconds"] + time.perf_counter() - t0
    ok = disp_err <= 5e-2 and mass_err <= 5e-2 and worst_v <= 5e-2
    ok = ok and secs < 300
    _verdict("closed-form recovery", ok,
             f"displacement rel {disp_err:.4f}, mass rel {mass_err:.4f}, "
             f"equal-time field rel {worst_v:.4f} (all <=5e-2), "
             f"{secs:.0f}s (<300s)")


def test_gene_benchmark_accuracy(gene_model):
    """Full run on the two-gene benchmark at the preset configuration."""
    ds, params, train_secs = gene_model
    t0 = time.perf_counter()
    rep = metrics.evaluate(params, ds, n_steps=1)
    secs = train_secs + time.perf_counter() - t0
    ok = rep.mean_w1 <= 0.06 and rep.mean_rme <= 0.03 and secs < 1800
    _verdict("gene benchmark", ok,
             f"mean W1 {rep.mean_w1:.4f} (<=0.06), mean RME "
             f"{rep.mean_rme:.4f} (<=0.03), {secs:.0f}s (<1800s)")


def test_one_step_speedup_over_stepwise_integration(gene_model):
    """Median one-jump latency vs a 100-step integration, 1200 points."""
    ds, params, _ = gene_model
    t0 = time.perf_counter()
    src = ds.snapshots[0]
    pts = np.tile(src.points, (3, 1))
    n = pts.shape[0]
    cloud = WeightedCloud(pts, np.full(n, 1.0 / n), time=0.0)
    assert n >= 1000

    inference.one_step(params, cloud)  # warm the kernels
    one = np.empty(1000)
    for i in range(1000):
        one[i] = inference.one_step(params, cloud).wall_ns
    euler = np.empty(20)
    for i in range(20):
        euler[i] = inference.euler_rollout(params, cloud, 100).wall_ns
    ratio = float(np.median(euler) / np.median(one))

    secs = time.perf_counter() - t0
    ok = ratio >= 50.0 and secs < 300
    _verdict("one-step speedup", ok,
             f"median speedup {ratio:.0f}x over 1000 runs, {n} points "
             f"(>=50x), {secs:.0f}s (<300s)")


def test_accuracy_holds_while_runtime_scales_with_window_count(gene_model):
    """More windows may not degrade accuracy; cost grows linearly."""
    ds, params, _ = gene_model
    t0 = time.perf_counter()
    k_list = (1, 2, 5, 10, 20, 50)
    report = metrics.bench(params, ds.snapshots[0], ds.snapshots[-1],
                           k_list=k_list, repeats=20, euler_repeats=3,
                           grid=ds.normalized_times())
    w1_first, w1_last = report.sweep_w1[0], report.sweep_w1[-1]
    medians = [t.median_ns for t in report.timing if t.method == "mean-flow"]
    _slope, _icpt, r2 = metrics.linear_fit_r2(k_list, medians)

    secs = time.perf_counter() - t0
    ok = w1_last <= 1.10 * w1_first and r2 >= 0.95 and secs < 600
    _verdict("window-count sweep", ok,
             f"W1 at 50 windows {w1_last:.4f} vs 1 window {w1_first:.4f} "
             f"(+10% allowed), runtime R2 {r2:.4f} (>=0.95), "
             f"{secs:.0f}s (<600s)")


def test_learned_field_is_additively_consistent(dirac_model):
    """Two-leg splits of any time interval agree with the direct jump."""
    params, gc = dirac_model["params"], dirac_model["gc"]
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        t, s, T = np.sort(rng.random(3))
        pos_t, _, _, _ = geometry.dirac_path_state(gc, float(t))
        x = pos_t[None, :]
        v_tT, _ = net.forward(params, x, np.array([t]), np.array([T]))
        v_ts, _ = net.forward(params, x, np.array([t]), np.array([s]))
        x_s = x + (s - t) * v_ts
        v_sT, _ = net.forward(params, x_s, np.array([s]), np.array([T]))
        lhs = (T - t) * v_tT[0] - (s - t) * v_ts[0] - (T - s) * v_sT[0]
        denom = max(np.linalg.norm((T - t) * v_tT[0]), 1e-12)
        worst = max(worst, np.linalg.norm(lhs) / denom)
    ok = worst <= 2e-2
    _verdict("additive consistency", ok,
             f"worst split residual {worst:.4f} of the direct jump "
             f"(<=2e-2, 100 triples)")


def test_conditional_model_generalizes_to_held_out_conditions(perturb_model):
    """Held-out predictions beat copying the control; mass error small."""
    params = perturb_model["params"]
    t0 = time.perf_counter()
    w1_pred, w1_noop, rmes = [], [], []
    for spec, ds in perturb_model["test_pairs"]:
        src, tgt = ds.snapshots[0], ds.snapshots[1]
        n0 = src.n
        start = WeightedCloud(src.points.copy(), np.full(n0, 1.0 / n0),
                              time=0.0, condition_id=spec.condition_id)
        out = inference.one_step(params, start, cond=spec.condition_id)
        pred = WeightedCloud(out.points, out.masses, time=1.0)
        w1_pred.append(metrics.wasserstein1(pred, tgt))
        w1_noop.append(metrics.wasserstein1(src, tgt))
        rmes.append(metrics.rme(out.masses, tgt.total_mass(),
                                src.total_mass()))
    mean_pred = float(np.mean(w1_pred))
    mean_noop = float(np.mean(w1_noop))
    mean_rme = float(np.mean(rmes))
    gain = 1.0 - mean_pred / mean_noop

    secs = perturb_model["seconds"] + time.perf_counter() - t0
    ok = gain >= 0.30 and mean_rme <= 0.15 and secs < 1800
    _verdict("held-out conditions", ok,
             f"mean W1 {mean_pred:.4f} vs no-op {mean_noop:.4f} "
             f"({gain * 100:.0f}% better, >=30%), mean RME {mean_rme:.4f} "
             f"(<=0.15), {secs:.0f}s (<1800s)")


def test_pipeline_is_bitwise_deterministic(tmp_path):
    """Generate, train, infer, evaluate twice; everything matches."""

    def run(base):
        gen = base / "data"
        rc = cli.main(["gen", "--dataset", "gene", "--out", str(gen),
                       "--seed", "0", "--n0", "40"])
        assert rc == cli.EXIT_OK
        train = base / "train"
        rc = cli.main(["train", "--data", str(gen / "snapshots.csv"),
                       "--out", str(train), "--steps", "4",
                       "--batch-size", "16", "--width", "8", "--depth", "2",
                       "--delta", "2.5", "--seed", "0",
                       "--checkpoint-every", "100"])
        assert rc == cli.EXIT_OK
        infer = base / "infer"
        rc = cli.main(["infer", "--ckpt", str(train / "ckpt.bin"),
                       "--data", str(gen / "snapshots.csv"),
                       "--out", str(infer)])
        assert rc == cli.EXIT_OK
        ev = base / "eval"
        rc = cli.main(["eval", "--pred", str(infer / "predicted.csv"),
                       "--ref", str(gen / "snapshots.csv"),
                       "--out", str(ev)])
        assert rc == cli.EXIT_OK
        report = json.loads((ev / "eval.json").read_text())
        return (train / "ckpt.bin").read_bytes(), report

    ckpt_a, rep_a = run(tmp_path / "a")
    ckpt_b, rep_b = run(tmp_path / "b")
    same_ckpt = ckpt_a == ckpt_b
    same_w1 = rep_a["w1"] == rep_b["w1"]
    same_rme = rep_a["rme"] == rep_b["rme"]
    ok = same_ckpt and same_w1 and same_rme
    _verdict("pipeline determinism", ok,
             f"checkpoint bytes equal: {same_ckpt}, W1 equal: {same_w1}, "
             f"RME equal: {same_rme}")
