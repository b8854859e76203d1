import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from threadpoolctl import threadpool_limits

from seqfuse import tensor as T
from seqfuse.errors import ContractError, DimensionError
from seqfuse.tensor import GradTape, Tensor

from reference import finite_difference, max_rel, naive_matmul

mpmath.mp.dps = 50


# ---------------------------------------------------------------- matmul


def test_matmul_identity(f64):
    b = [[5.0, 6.0], [7.0, 8.0]]
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(b)).data, b)


def test_matmul_small_product(f64):
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_seed7_against_triple_loop(f64):
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    assert max_rel(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b)) <= 1e-12


def _bounded_error(out, ref, a, b):
    # rounding error of a dot product is bounded by |a|@|b| times a few ulps
    scale = np.abs(a) @ np.abs(b)
    return float((np.abs(out - ref) / np.maximum(scale, 1e-300)).max(initial=0.0))


def test_matmul_random_shapes_against_triple_loop(f64):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        p, q, r = (int(x) for x in rng.integers(1, 24, size=3))
        a, b = rng.normal(size=(p, q)), rng.normal(size=(q, r))
        out = T.matmul(Tensor(a), Tensor(b)).data
        worst = max(worst, _bounded_error(out, naive_matmul(a, b), a, b))
    assert worst <= 1e-12


def test_matmul_batched_shapes_match_per_matrix_oracle(f64):
    rng = np.random.default_rng(5)
    for _ in range(20):
        bsz, p, q, r = (int(x) for x in rng.integers(1, 10, size=4))
        a = rng.normal(size=(bsz, p, q))
        shared = rng.normal(size=(q, r))
        stacked = rng.normal(size=(bsz, q, r))
        out_shared = T.matmul(Tensor(a), Tensor(shared)).data
        out_stacked = T.matmul(Tensor(a), Tensor(stacked)).data
        for i in range(bsz):
            assert _bounded_error(out_shared[i], naive_matmul(a[i], shared), a[i], shared) <= 1e-12
            assert _bounded_error(out_stacked[i], naive_matmul(a[i], stacked[i]), a[i], stacked[i]) <= 1e-12


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


@pytest.mark.parametrize("prec", ["f32", "f64"])
def test_matmul_rows_do_not_depend_on_surrounding_rows(prec):
    # a row must round identically in a 3-row and a 3000-row product
    rng = np.random.default_rng(0)
    with T.precision(prec):
        a = Tensor(rng.normal(size=(3000, 54)))
        b = Tensor(rng.normal(size=(54, 40)))
        full = (a @ b).data
        for lo, hi in [(0, 1), (5, 8), (100, 148), (2990, 3000)]:
            part = (Tensor(a.data[lo:hi]) @ b).data
            np.testing.assert_array_equal(part, full[lo:hi])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**31))
def test_matmul_batch_layout_is_bitwise_irrelevant(rows, q, r, seed):
    rng = np.random.default_rng(seed)
    with T.precision("f32"):
        a = rng.normal(size=(2, rows, q))
        b = rng.normal(size=(q, r))
        stacked = (Tensor(a) @ Tensor(b)).data
        flat = (Tensor(a.reshape(-1, q)) @ Tensor(b)).data.reshape(2, rows, r)
        single = (Tensor(a[1]) @ Tensor(b)).data
    np.testing.assert_array_equal(stacked, flat)
    np.testing.assert_array_equal(stacked[1], single)


def test_results_independent_of_thread_count():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(600, 300)), rng.normal(size=(300, 200))
    outs = []
    for threads in (1, 4):
        with threadpool_limits(limits=threads), T.precision("f32"):
            outs.append(T.softmax_rows(Tensor(a) @ Tensor(b)).data.astype(np.float64))
    assert max_rel(outs[0], outs[1], floor=1e-30) <= 1e-6


# ---------------------------------------------------------------- softmax


def test_softmax_uniform(f64):
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=1e-15)


def test_softmax_extreme_without_overflow(f64):
    out = T.softmax_rows(Tensor([[1000.0, -1000.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [[1.0, 0.0]])


def test_softmax_against_extended_precision(f64):
    xs = [1.0, 2.0, 3.0]
    z = mpmath.fsum(mpmath.exp(x) for x in xs)
    expected = [float(mpmath.exp(x) / z) for x in xs]
    out = T.softmax_rows(Tensor([xs])).data[0]
    assert max_rel(out, expected) <= 1e-14


@pytest.mark.parametrize("prec", ["f32", "f64"])
def test_softmax_rows_sum_to_one_for_huge_magnitudes(prec):
    rng = np.random.default_rng(3)
    x = rng.choice([-1e9, 1e9, 0.0, 3.5], size=(50, 17)) + rng.normal(size=(50, 17))
    with T.precision(prec):
        out = T.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_empty_rows(f64):
    assert T.softmax_rows(Tensor(np.zeros((3, 0)))).shape == (3, 0)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_is_zero(f64):
    out = T.layer_norm(Tensor([[4.0, 4.0, 4.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])


def test_layer_norm_normalized_row(f64):
    out = T.layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_against_extended_precision(f64):
    rng = np.random.default_rng(11)
    x, g, b = rng.normal(size=9), rng.normal(size=9), rng.normal(size=9)
    eps = 1e-5
    xm = [mpmath.mpf(float(v)) for v in x]
    mu = mpmath.fsum(xm) / len(xm)
    var = mpmath.fsum((v - mu) ** 2 for v in xm) / len(xm)
    expected = [float((v - mu) / mpmath.sqrt(var + eps) * float(gi) + float(bi)) for v, gi, bi in zip(xm, g, b)]
    out = T.layer_norm(Tensor(x[None, :]), Tensor(g), Tensor(b), eps).data[0]
    assert max_rel(out, expected) <= 1e-10


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ContractError):
        T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


# ---------------------------------------------------------------- autodiff


def test_linear_map_gradient_is_input(f64):
    x = np.array([[1.0, -2.0, 3.0]])
    w = Tensor(np.zeros((3, 1)), requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_all(Tensor(x) @ w)
    (g,) = tape.backward(loss, [w])
    np.testing.assert_array_equal(g, x.T)


def test_unused_parameter_gets_zero_gradient(f64):
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    unused = Tensor(np.ones(4), requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_all(w * w)
    gw, gu = tape.backward(loss, [w, unused])
    np.testing.assert_array_equal(gw, 2 * np.ones((2, 2)))
    np.testing.assert_array_equal(gu, np.zeros(4))


def test_backward_rejects_non_scalar_loss(f64):
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        y = w * w
    with pytest.raises(ContractError):
        tape.backward(y, [w])


def test_tape_records_only_when_grad_needed(f64):
    with GradTape() as tape:
        Tensor(np.ones(3)) + Tensor(np.ones(3))
    assert len(tape) == 0


def test_shared_node_gradients_accumulate(f64):
    w = Tensor(np.array([3.0]), requires_grad=True)
    with GradTape() as tape:
        y = w * w
        loss = T.sum_all(y + y * w)
    (g,) = tape.backward(loss, [w])
    np.testing.assert_allclose(g, [2 * 3.0 + 3 * 9.0])


def _check_grad(fn, shapes, rng, positive=False):
    arrays = [rng.normal(size=s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    probe = None

    def loss_np(*arrs):
        out = fn(*[Tensor(a) for a in arrs]).data
        return float((out * probe).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradTape() as tape:
        out = fn(*tensors)
        probe = rng.normal(size=out.shape)
        loss = T.sum_all(out * Tensor(probe))
    analytic = tape.backward(loss, tensors)
    numeric = finite_difference(loss_np, arrays)
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        assert err.max(initial=0.0) <= 1e-4


PRIMITIVES = {
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "matmul_stacked_shared": (lambda a, b: a @ b, [(2, 3, 4), (4, 2)]),
    "matmul_stacked": (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 5)]),
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub_broadcast": (lambda a, b: a - b, [(2, 3, 4), (3, 1)]),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (4,)]),
    "scale": (lambda a: T.scale(a, -0.7), [(3, 4)]),
    "relu": (lambda a: T.relu(a), [(5, 4)]),
    "softmax": (lambda a: T.softmax_rows(a), [(2, 3, 5)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "transpose": (lambda a: T.transpose(a), [(2, 3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=-2), [(2, 3, 4), (2, 1, 4)]),
    "slice": (lambda a: T.slice_axis(a, 1, 1, 3), [(2, 4, 3)]),
    "gather": (lambda t: T.gather_rows(t, np.array([[0, 2, 2], [1, 0, 3]])), [(4, 3)]),
    "reshape": (lambda a: T.reshape(a, (4, 6)), [(2, 3, 4)]),
    "broadcast": (lambda a: T.broadcast_to(a, (3, 2, 4)), [(1, 4)]),
    "sum": (lambda a: T.reshape(T.sum_all(a), (1, 1)), [(3, 4)]),
    "mean": (lambda a: T.reshape(T.mean_all(a), (1, 1)), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_matches_central_differences(name, f64):
    fn, shapes = PRIMITIVES[name]
    _check_grad(fn, shapes, np.random.default_rng(sorted(PRIMITIVES).index(name)))


# ---------------------------------------------------------------- misc


def test_more_than_three_extents_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1)))


def test_precision_context_restores_previous_mode():
    before = T.get_precision()
    with T.precision("f64"):
        assert Tensor([1.0]).data.dtype == np.float64
        with T.precision("f32"):
            assert Tensor([1.0]).data.dtype == np.float32
        assert T.get_precision() == "f64"
    assert T.get_precision() == before


def test_unknown_precision_rejected():
    with pytest.raises(ValueError):
        T.set_precision("f16")


def test_flop_tally_conventions(f64):
    a, b = Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5)))
    with T.count_flops() as tally:
        y = a @ b
        T.softmax_rows(y)
        T.layer_norm(y, Tensor(np.ones(5)), Tensor(np.zeros(5)))
        T.relu(y)
        T.concat([y, y])
    assert tally.by_op["matmul"] == 2 * 3 * 4 * 5
    assert tally.by_op["softmax"] == 5 * 15
    assert tally.by_op["layer_norm"] == 8 * 15
    assert tally.by_op["relu"] == 15
    assert "concat" not in tally.by_op


def test_finite_inputs_give_finite_outputs(f64):
    x = Tensor(np.array([[1e300, -1e300, 0.0]]))
    assert np.all(np.isfinite(T.softmax_rows(x).data))
    y = T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert T.parameters_finite([y])
