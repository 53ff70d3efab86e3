"""Two-headed MLP: exact batching semantics, derivatives, checkpoints."""

import numpy as np
import pytest

from wfrmfm import net
from wfrmfm.config import DataError


def small_net(d=3, e=0, depth=3, width=16, seed=7, n_conditions=0):
    return net.init(d=d, e=e, depth=depth, width=width, seed=seed,
                    n_conditions=n_conditions)


def random_inputs(rng, n, d):
    x = rng.standard_normal((n, d))
    t = rng.uniform(0.0, 0.6, size=n)
    T = t + rng.uniform(0.0, 0.4, size=n)
    return x, t, T


def test_init_is_deterministic_and_h_head_starts_at_zero():
    a = small_net(seed=3)
    b = small_net(seed=3)
    for wa, wb in zip(a.arrays(), b.arrays()):
        assert wa.tobytes() == wb.tobytes()
    # zeroed final h layer: the initial model is exactly mass-preserving
    assert np.all(a.h_weights[-1] == 0.0)
    assert np.all(a.h_biases[-1] == 0.0)
    rng = np.random.default_rng(0)
    x, t, T = random_inputs(rng, 5, a.d)
    _, h = net.forward(a, x, t, T)
    assert np.all(h == 0.0)


@pytest.mark.parametrize("n", [1, 2, 3, 127, 128, 129, 255, 256, 257])
def test_batch_matches_single_sample_bitwise(n):
    params = small_net(d=4, width=32)
    rng = np.random.default_rng(n)
    x, t, T = random_inputs(rng, n, 4)
    v_batch, h_batch = net.forward(params, x, t, T)
    assert v_batch.shape == (n, 4)
    assert h_batch.shape == (n,)
    for i in range(n):
        v_one, h_one = net.forward(params, x[i], t[i], T[i])
        assert v_one.tobytes() == v_batch[i].tobytes()
        assert h_one == h_batch[i]


def test_jvp_value_equals_forward_bitwise():
    params = small_net()
    rng = np.random.default_rng(11)
    x, t, T = random_inputs(rng, 130, params.d)
    dx = rng.standard_normal(x.shape)
    v, h = net.forward(params, x, t, T)
    rv, rh = net.jvp(params, x, t, T, dx, 1.0, 0.0)
    assert rv.value.tobytes() == v.tobytes()
    assert rh.value.tobytes() == h.tobytes()


def test_jvp_matches_finite_differences():
    params = small_net(d=2, width=24, seed=9)
    rng = np.random.default_rng(4)
    step = 1e-6
    checked = 0
    for trial in range(20):
        x = rng.standard_normal(2)
        t = float(rng.uniform(0.1, 0.5))
        T = float(rng.uniform(0.6, 0.9))
        dx = rng.standard_normal(2)
        dt = float(rng.standard_normal())
        dT = float(rng.standard_normal())
        rv, rh = net.jvp(params, x, t, T, dx, dt, dT)
        vp, hp = net.forward(params, x + step * dx, t + step * dt, T + step * dT)
        vm, hm = net.forward(params, x - step * dx, t - step * dt, T - step * dT)
        fd_v = (vp - vm) / (2 * step)
        fd_h = (hp - hm) / (2 * step)
        # a finite-difference probe that straddles an activation kink is
        # not comparable; skip those (slope mismatch shows up as a large
        # relative gap at tiny magnitudes)
        if np.max(np.abs(fd_v - rv.directional_derivative)) > 1e-3 * max(
                1.0, np.max(np.abs(fd_v))):
            continue
        np.testing.assert_allclose(rv.directional_derivative, fd_v,
                                   rtol=1e-4, atol=1e-6)
        np.testing.assert_allclose(rh.directional_derivative, fd_h,
                                   rtol=1e-4, atol=1e-6)
        checked += 1
    assert checked >= 15


def make_batch(params, rng, n=6):
    x, t, T = random_inputs(rng, n, params.d)
    return net.Batch(
        x=x, t=t, T=T,
        v_target=rng.standard_normal((n, params.d)),
        h_target=rng.standard_normal(n),
        weight=rng.uniform(0.5, 2.0, size=n),
    )


def test_loss_gradients_match_finite_differences():
    params = small_net(d=2, depth=3, width=8, seed=5)
    rng = np.random.default_rng(6)
    batch = make_batch(params, rng)
    lam = 0.7
    loss, grads = net.loss_and_grads(params, batch, lam)
    assert loss > 0

    def loss_at(p):
        val, _ = net.loss_and_grads(p, batch, lam)
        return val

    step = 1e-5
    arrays = params.arrays()
    grad_arrays = grads.arrays()
    checked = 0
    for ai in range(len(arrays) - 1):  # skip the (empty) embedding table
        arr = arrays[ai]
        if arr.size == 0:
            continue
        flat_idx = rng.integers(0, arr.size, size=min(4, arr.size))
        for fi in np.unique(flat_idx):
            idx = np.unravel_index(int(fi), arr.shape)
            p2 = params.copy()
            p2.arrays()[ai][idx] += step
            up = loss_at(p2)
            p2.arrays()[ai][idx] -= 2 * step
            dn = loss_at(p2)
            fd = (up - dn) / (2 * step)
            an = grad_arrays[ai][idx]
            assert fd == pytest.approx(an, rel=2e-4, abs=1e-8)
            checked += 1
    assert checked >= 30


def test_lambda_zero_leaves_h_gradients_zero():
    params = small_net()
    rng = np.random.default_rng(8)
    batch = make_batch(params, rng)
    _, grads = net.loss_and_grads(params, batch, lam=0.0)
    for g in grads.h_weights + grads.h_biases:
        assert np.all(g == 0.0)
    # v-head still learns
    assert any(np.any(g != 0) for g in grads.v_weights)


def test_loss_rejects_non_finite_targets():
    params = small_net()
    rng = np.random.default_rng(12)
    batch = make_batch(params, rng)
    batch.v_target[2, 0] = np.nan
    with pytest.raises(DataError, match="sample 2"):
        net.loss_and_grads(params, batch, 1.0)
    batch2 = make_batch(params, rng)
    batch2.h_target[1] = np.inf
    with pytest.raises(DataError, match="sample 1"):
        net.loss_and_grads(params, batch2, 1.0)


def test_zero_grads_shape():
    params = small_net(e=2, n_conditions=3)
    z = net.zero_grads(params)
    for a, b in zip(params.arrays(), z.arrays()):
        assert a.shape == b.shape
        assert np.all(b == 0.0)


def test_conditional_forward_uses_embedding_row():
    params = small_net(d=2, e=2, n_conditions=3, seed=13)
    params.embedding[:] = [[0.0, 0.0], [1.0, -1.0], [2.0, 0.5]]
    x = np.zeros((4, 2))
    t = np.zeros(4)
    T = np.ones(4)
    v0, h0 = net.forward(params, x, t, T, cond=0)
    v1, h1 = net.forward(params, x, t, T, cond=1)
    assert not np.allclose(v0, v1)
    # per-row condition ids select per-row embeddings
    mixed = np.array([0, 1, 0, 1])
    vm, _ = net.forward(params, x, t, T, cond=mixed)
    assert vm[0].tobytes() == v0[0].tobytes()
    assert vm[1].tobytes() == v1[1].tobytes()


def test_conditional_forward_validates_condition():
    params = small_net(e=2, n_conditions=2)
    x = np.zeros((1, params.d))
    with pytest.raises(DataError, match="condition"):
        net.forward(params, x, 0.0, 1.0)
    with pytest.raises(DataError, match="unknown condition id 5"):
        net.forward(params, x, 0.0, 1.0, cond=5)


def test_unconditional_dimension_mismatch():
    params = small_net(d=3)
    with pytest.raises(DataError, match="dimension 3"):
        net.forward(params, np.zeros((2, 4)), 0.0, 1.0)
    with pytest.raises(DataError, match="empty"):
        net.forward(params, np.zeros((0, 3)), 0.0, 1.0)


def test_checkpoint_round_trip_bitwise(tmp_path):
    params = small_net(d=2, e=3, depth=4, width=12, seed=21, n_conditions=5)
    rng = np.random.default_rng(22)
    params.embedding[:] = rng.standard_normal(params.embedding.shape)
    path = tmp_path / "ckpt.bin"
    net.save_checkpoint(params, path)
    back = net.load_checkpoint(path)
    assert (back.d, back.e, back.depth, back.width, back.n_conditions) == \
        (2, 3, 4, 12, 5)
    for a, b in zip(params.arrays(), back.arrays()):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_rejects_corruption(tmp_path):
    params = small_net()
    good = tmp_path / "good.bin"
    net.save_checkpoint(params, good)
    blob = good.read_bytes()

    bad_magic = tmp_path / "bad_magic.bin"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DataError, match="magic"):
        net.load_checkpoint(bad_magic)

    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(blob[:-16])
    with pytest.raises(DataError, match="truncated"):
        net.load_checkpoint(truncated)

    padded = tmp_path / "padded.bin"
    padded.write_bytes(blob + b"\x00" * 8)
    with pytest.raises(DataError, match="trailing"):
        net.load_checkpoint(padded)
