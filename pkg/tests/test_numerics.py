"""Tensor autodiff, Adam, and checkpoint format tests."""

import numpy as np
import pytest

from protograph.numerics import (
    AdamConfig,
    AdamState,
    CheckpointError,
    Tape,
    Tensor,
    adam_step,
    batchnorm2d,
    concat,
    conv2d,
    euclid,
    global_avg_pool,
    load_tensors,
    log_softmax,
    logistic,
    matmul,
    maxpool2d,
    mul,
    narrow,
    pick,
    relu,
    reshape,
    roll_rows,
    save_tensors,
    softmax,
    sq_euclid,
    tensor,
    tile_rows,
    tmean,
    tsum,
)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def grad_of(build, x0: np.ndarray) -> np.ndarray:
    """Tape gradient of scalar build(x) w.r.t. leaf x."""
    x = tensor(x0, requires_grad=True)
    with Tape() as tape:
        loss = build(x)
        tape.backward(loss)
    assert x.grad is not None
    return x.grad


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    a = tensor(np.eye(2))
    b = tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_projector():
    p = tensor([[1.0, 0.0], [0.0, 0.0]])
    v = tensor([[5.0], [7.0]])
    np.testing.assert_array_equal(matmul(p, v).data, [[5.0], [0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError) as exc:
        matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_relu_sign_cases():
    np.testing.assert_array_equal(relu(tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_relu_idempotent():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    np.testing.assert_array_equal(relu(relu(tensor(x))).data, relu(tensor(x)).data)


def test_relu_gradient_piecewise():
    g = grad_of(lambda x: tsum(relu(x)), np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_logistic_at_zero():
    assert logistic(tensor([0.0])).data[0] == 0.5


def test_logistic_complement_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=3.0, size=100)
    lhs = logistic(tensor(x)).data
    rhs = 1.0 - logistic(tensor(-x)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_logistic_extreme_inputs_no_overflow():
    out = logistic(tensor([1000.0, -1000.0])).data
    assert out[0] == 1.0 and out[1] == 0.0


def test_logistic_gradient_analytic():
    rng = np.random.default_rng(2)
    x = rng.normal(scale=2.0, size=20)
    g = grad_of(lambda t: tsum(logistic(t)), x.copy())
    s = 1.0 / (1.0 + np.exp(-x))
    np.testing.assert_allclose(g, s * (1.0 - s), atol=1e-10)


def test_softmax_uniform_on_equal_inputs():
    out = softmax(tensor([3.7, 3.7, 3.7])).data
    np.testing.assert_allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_stability():
    out = softmax(tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_hand_values():
    out = softmax(tensor([-1.0, -2.0])).data
    np.testing.assert_allclose(out, [0.7311, 0.2689], atol=1e-4)


def test_softmax_sums_to_one_and_permutation_equivariant():
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.normal(scale=5.0, size=rng.integers(1, 9))
        s = softmax(tensor(x)).data
        assert abs(s.sum() - 1.0) < 1e-12
        perm = rng.permutation(x.size)
        np.testing.assert_allclose(softmax(tensor(x[perm])).data, s[perm], atol=1e-15)


def test_sq_euclid_zero_and_pythagorean():
    a = tensor([1.0, 2.0])
    assert sq_euclid(a, a).data == 0.0
    assert sq_euclid(tensor([0.0, 0.0]), tensor([3.0, 4.0])).data == 25.0


def test_sq_euclid_length_mismatch():
    with pytest.raises(ValueError):
        sq_euclid(tensor([1.0]), tensor([1.0, 2.0]))


def test_euclid_matches_norm_and_zero_subgradient():
    assert euclid(tensor([0.0, 0.0]), tensor([3.0, 4.0])).data == 5.0
    x = tensor([1.0, 1.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(euclid(x, tensor([1.0, 1.0])))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


# ---------------------------------------------------------------------------
# backward basics


def test_backward_sum_gives_ones():
    g = grad_of(lambda x: tsum(x), np.zeros(3))
    np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])


def test_backward_zero_coefficient():
    g = grad_of(lambda x: tsum(0.0 * x), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_backward_requires_scalar():
    x = tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = relu(x)
        with pytest.raises(ValueError):
            tape.backward(y)


def test_backward_accumulates_across_calls():
    x = tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
        tape.backward(loss)
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0])


def test_backward_fanout_sums_contributions():
    x = tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = x + x
        tape.backward(tsum(y * x))
    # d/dx of 2x^2 = 4x
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_outside_tape():
    x = tensor([1.0], requires_grad=True)
    y = relu(x)
    assert y.requires_grad is False


def test_nested_tape_rejected():
    with Tape():
        with pytest.raises(RuntimeError):
            with Tape():
                pass


# ---------------------------------------------------------------------------
# finite-difference property checks, one per differentiable op


def _fd_case(build, shapes, rng, tol=1e-4):
    xs = [rng.normal(scale=1.5, size=s) for s in shapes]
    leaves = [tensor(x.copy(), requires_grad=True) for x in xs]
    with Tape() as tape:
        tape.backward(build(*leaves))
    for i, leaf in enumerate(leaves):
        def f(xi, i=i):
            args = [tensor(x) for x in xs]
            args[i] = tensor(xi)
            return float(build(*args).data)

        fd = numeric_grad(f, xs[i].copy())
        assert rel_err(leaf.grad, fd) < tol, f"input {i}"


OP_CASES = {
    "add": (lambda a, b: tsum(a + b), [(3, 2), (3, 2)]),
    "add_broadcast": (lambda a, b: tsum(a + b), [(3, 2), (1, 2)]),
    "sub": (lambda a, b: tsum(a - b), [(4,), (4,)]),
    "mul": (lambda a, b: tsum(a * b), [(3, 3), (3, 3)]),
    "neg": (lambda a: tsum(-a), [(5,)]),
    "matmul": (lambda a, b: tsum(matmul(a, b)), [(3, 3), (3, 3)]),
    "relu": (lambda a: tsum(relu(a)), [(6,)]),
    "logistic": (lambda a: tsum(logistic(a)), [(6,)]),
    "softmax": (lambda a: pick(softmax(a), 0), [(5,)]),
    "log_softmax": (lambda a: pick(log_softmax(a), 1), [(5,)]),
    "tsum_axis": (lambda a: pick(tsum(a, axis=0), 1), [(4, 3)]),
    "tmean": (lambda a: tmean(a), [(4, 3)]),
    "sq_euclid": (lambda a, b: sq_euclid(a, b), [(4,), (4,)]),
    "euclid": (lambda a, b: euclid(a, b), [(4,), (4,)]),
    "concat": (lambda a, b: tsum(mul(concat([a, b], axis=0), concat([b, a], axis=0))),
               [(2, 3), (2, 3)]),
    "narrow": (lambda a: tsum(mul(narrow(a, 0, 1, 2), narrow(a, 0, 0, 2))), [(4, 2)]),
    "roll_rows": (lambda a: tsum(mul(roll_rows(a, 1), a)), [(4, 2)]),
    "tile_rows": (lambda a, b: tsum(mul(tile_rows(a, 3), b)), [(1, 4), (3, 4)]),
    "pick": (lambda a: pick(mul(a, a), 2), [(5,)]),
    "reshape": (lambda a: tsum(mul(reshape(a, (6,)), reshape(a, (6,)))), [(2, 3)]),
    "global_avg_pool": (lambda a: tsum(mul(global_avg_pool(a), global_avg_pool(a))),
                        [(2, 3, 4, 4)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradcheck_elementwise_ops(name):
    build, shapes = OP_CASES[name]
    rng = np.random.default_rng(hash(name) % (2 ** 32))
    for _ in range(5):
        _fd_case(build, shapes, rng)


def test_gradcheck_many_random_seeds():
    # Volume pass: >= 100 distinct seeds across the core op set.
    names = ["matmul", "relu", "logistic", "softmax", "sq_euclid"]
    for seed in range(100):
        name = names[seed % len(names)]
        build, shapes = OP_CASES[name]
        _fd_case(build, shapes, np.random.default_rng(seed))


def test_gradcheck_matmul_spec_tolerance():
    # Random 3x3 pairs at the tighter documented tolerance.
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a0 = rng.normal(size=(3, 3))
        b0 = rng.normal(size=(3, 3))

        ga = grad_of(lambda a: tsum(matmul(a, tensor(b0))), a0.copy())
        fd = numeric_grad(lambda a: float(tsum(matmul(tensor(a), tensor(b0))).data),
                          a0.copy())
        assert rel_err(ga, fd) < 1e-6


def test_gradcheck_conv_pool_norm_stack():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(2, 2, 4, 4))
    w0 = rng.normal(scale=0.5, size=(3, 2, 3, 3))
    g0 = rng.normal(size=3) + 2.0
    b0 = rng.normal(size=3)

    def forward(x, w, gm, bt):
        rm = np.zeros(3)
        rv = np.ones(3)
        y = conv2d(x, w)
        y = batchnorm2d(y, gm, bt, rm, rv, training=True)
        y = maxpool2d(relu(y))
        return tsum(mul(global_avg_pool(y), global_avg_pool(y)))

    leaves = [tensor(v.copy(), requires_grad=True) for v in (x0, w0, g0, b0)]
    with Tape() as tape:
        tape.backward(forward(*leaves))
    vals = [x0, w0, g0, b0]
    for i, leaf in enumerate(leaves):
        def f(v, i=i):
            args = [tensor(u) for u in vals]
            args[i] = tensor(v)
            return float(forward(*args).data)

        fd = numeric_grad(f, vals[i].copy())
        assert rel_err(leaf.grad, fd) < 1e-4, f"leaf {i}"


def test_conv2d_matches_direct_convolution():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = conv2d(tensor(x), tensor(w)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 5))
    for co in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, co, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w[co]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_maxpool_forward_and_odd_size_error():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = maxpool2d(tensor(x)).data
    np.testing.assert_array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])
    with pytest.raises(ValueError):
        maxpool2d(tensor(np.zeros((1, 1, 3, 4))))


def test_batchnorm_training_updates_buffers_eval_does_not():
    rng = np.random.default_rng(13)
    x = tensor(rng.normal(loc=2.0, size=(4, 2, 3, 3)))
    gamma, beta = tensor(np.ones(2)), tensor(np.zeros(2))
    rm, rv = np.zeros(2), np.ones(2)
    out = batchnorm2d(x, gamma, beta, rm, rv, training=True)
    # batch statistics: normalized output has ~zero mean, unit variance
    # (up to the eps=1e-5 stabilizer inside the inverse square root)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
    assert not np.allclose(rm, 0.0)
    rm2, rv2 = rm.copy(), rv.copy()
    batchnorm2d(x, gamma, beta, rm, rv, training=False)
    np.testing.assert_array_equal(rm, rm2)
    np.testing.assert_array_equal(rv, rv2)


# ---------------------------------------------------------------------------
# adam


def test_adam_zero_gradient_keeps_parameter():
    p = tensor([1.0, -2.0], requires_grad=True)
    state = AdamState()
    adam_step({"p": p}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_magnitude():
    p = tensor([0.5], requires_grad=True)
    p.grad = np.array([1.0])
    adam_step({"p": p}, AdamState())
    np.testing.assert_allclose(p.data, [0.5 - 0.001], atol=1e-6)


def test_adam_constant_gradient_monotone():
    p = tensor([0.0], requires_grad=True)
    state = AdamState()
    seen = [0.0]
    for _ in range(5):
        p.grad = np.array([2.0])
        adam_step({"p": p}, state)
        seen.append(float(p.data[0]))
    assert all(b < a for a, b in zip(seen, seen[1:]))
    assert state.step == 5


def test_adam_respects_custom_lr():
    p = tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    adam_step({"p": p}, AdamState(config=AdamConfig(lr=0.1)))
    np.testing.assert_allclose(p.data, [-0.1], atol=1e-6)


def test_adam_missing_grad_shares_step_counter():
    a = tensor([1.0], requires_grad=True)
    b = tensor([1.0], requires_grad=True)
    state = AdamState()
    a.grad = np.array([1.0])
    adam_step({"a": a, "b": b}, state)
    assert "b" in state.m and np.all(state.m["b"] == 0.0)


# ---------------------------------------------------------------------------
# determinism


def test_tape_replay_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        w = tensor(rng.normal(size=(4, 4)), requires_grad=True)
        x = tensor(rng.normal(size=(2, 4)))
        with Tape() as tape:
            h = relu(matmul(x, w))
            loss = tmean(mul(h, h))
            tape.backward(loss)
        return float(loss.data), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


# ---------------------------------------------------------------------------
# checkpoint format


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {
        "w": rng.normal(size=(3, 4)),
        "scalar": np.asarray(2.5),
        "vec": rng.normal(size=7),
    }
    path = str(tmp_path / "model.ckpt")
    save_tensors(path, tensors, meta={"preset": "tiny", "seed": 42})
    loaded, meta = load_tensors(path)
    assert meta == {"preset": "tiny", "seed": 42}
    assert sorted(loaded) == sorted(tensors)
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], np.asarray(arr, dtype=np.float64))
        assert loaded[name].shape == np.asarray(arr).shape


def test_checkpoint_write_is_deterministic(tmp_path):
    tensors = {"b": np.ones((2, 2)), "a": np.arange(3, dtype=np.float64)}
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_tensors(p1, tensors, meta={"k": 1})
    save_tensors(p2, dict(reversed(list(tensors.items()))), meta={"k": 1})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_rejects_bad_names(tmp_path):
    with pytest.raises(ValueError):
        save_tensors(str(tmp_path / "x.ckpt"), {"has space": np.zeros(1)})


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTCKPT 9\nmeta {}\nend\n")
    with pytest.raises(CheckpointError):
        load_tensors(str(path))


def test_checkpoint_truncated_block(tmp_path):
    path = str(tmp_path / "t.ckpt")
    save_tensors(path, {"w": np.ones((4, 4))})
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-8])
    with pytest.raises(CheckpointError) as exc:
        load_tensors(path)
    assert "truncated" in str(exc.value)


def test_checkpoint_trailing_bytes(tmp_path):
    path = str(tmp_path / "t.ckpt")
    save_tensors(path, {"w": np.ones(2)})
    with open(path, "ab") as f:
        f.write(b"\x00" * 8)
    with pytest.raises(CheckpointError):
        load_tensors(path)


def test_checkpoint_missing_terminator(tmp_path):
    path = tmp_path / "t.ckpt"
    path.write_bytes(b"PGCKPT 1\nmeta {}\n")
    with pytest.raises(CheckpointError):
        load_tensors(str(path))
