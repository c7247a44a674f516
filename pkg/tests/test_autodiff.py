"""Gradient engine: op contracts, independent oracles, FD verification."""

import numpy as np
import pytest

from xmal import autodiff as ad
from xmal.errors import ContractError, DimensionError
from xmal.verify import primitive_checks


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(ad.Tensor(np.eye(2)), ad.Tensor(m)).value
    assert np.array_equal(out, m)


def test_matmul_orthogonal_selection():
    out = ad.matmul(ad.Tensor([[1.0, 0.0]]), ad.Tensor([[0.0], [5.0]])).value
    assert np.array_equal(out, [[0.0]])


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    out = ad.matmul(ad.Tensor(a), ad.Tensor(b)).value
    assert np.abs(out - expected).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        ad.matmul(ad.Tensor(np.ones((3, 4))), ad.Tensor(np.ones((5, 2))))
    assert "(3, 4)" in str(exc.value) and "(5, 2)" in str(exc.value)


def test_row_softmax_symmetric_pair():
    out = ad.row_softmax(ad.Tensor([0.0, 0.0]), 1.0).value
    assert np.abs(out - [0.5, 0.5]).max() < 1e-15


def test_row_softmax_single_element():
    out = ad.row_softmax(ad.Tensor([3.7]), 5.0).value
    assert out.shape == (1,) and out[0] == 1.0


def test_row_softmax_matches_direct_formula():
    row = np.array([1.0, 2.0, 3.0])
    direct = np.exp(2.0 * row) / np.exp(2.0 * row).sum()
    out = ad.row_softmax(ad.Tensor(row), 2.0).value
    assert np.abs(out - direct).max() < 1e-12


def test_row_softmax_rows_sum_to_one_large_magnitudes():
    rng = np.random.default_rng(1)
    for _ in range(100):
        scale_up = rng.choice([1.0, 1e3])
        m = rng.normal(size=(3, 4)) * scale_up
        out = ad.row_softmax(ad.Tensor(m), float(rng.uniform(0.2, 3.0))).value
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12
        assert (out >= 0).all() and (out <= 1.0).all()
        if scale_up == 1.0:  # huge spreads underflow to exact zero, correctly
            assert (out > 0).all()


def test_row_softmax_rejects_nonpositive_scale():
    with pytest.raises(ContractError):
        ad.row_softmax(ad.Tensor([1.0, 2.0]), 0.0)


@pytest.mark.parametrize("value,expected", [(-3.0, 0.0), (0.0, 0.0), (2.5, 2.5)])
def test_hinge_scalar_cases(value, expected):
    assert float(ad.hinge(ad.Tensor([value])).value[0]) == expected


def test_hinge_idempotent_exactly():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m = rng.normal(size=(4, 3))
        once = ad.hinge(ad.Tensor(m)).value
        twice = ad.hinge(ad.Tensor(once)).value
        assert np.array_equal(once, twice)


def test_hinge_subgradient_zero_at_zero():
    x = ad.parameter(np.array([0.0, -1.0, 2.0]), "x")
    grads = ad.gradients(ad.reduce_sum(ad.hinge(x)), [x])
    assert np.array_equal(grads["x"], [0.0, 0.0, 1.0])


def test_l2_normalize_345_triangle():
    out = ad.l2_normalize(ad.Tensor([3.0, 4.0])).value
    assert np.abs(out - [0.6, 0.8]).max() < 1e-15


def test_l2_normalize_zero_vector_guarded():
    out = ad.l2_normalize(ad.Tensor([0.0, 0.0])).value
    assert np.array_equal(out, [0.0, 0.0])


def test_l2_normalize_unit_norm():
    rng = np.random.default_rng(3)
    v = rng.normal(size=8)
    out = ad.l2_normalize(ad.Tensor(v)).value
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12


def test_l2_normalize_rejects_bad_eps():
    with pytest.raises(ContractError):
        ad.l2_normalize(ad.Tensor([1.0, 2.0]), eps=0.0)


def test_grad_square_analytic():
    x = ad.parameter(np.array(3.0), "x")
    assert float(ad.gradients(ad.mul(x, x), [x])["x"]) == 6.0


def test_grad_of_softmax_sum_is_zero():
    rng = np.random.default_rng(4)
    x = ad.parameter(rng.normal(size=(3, 5)), "x")
    grads = ad.gradients(ad.reduce_sum(ad.row_softmax(x, 1.7)), [x])
    assert np.abs(grads["x"]).max() < 1e-14


def test_grad_rejects_nonscalar_target():
    x = ad.parameter(np.ones((2, 2)), "x")
    with pytest.raises(ContractError):
        ad.gradients(ad.mul(x, 2.0), [x])


def test_grad_unused_parameter_is_exact_zero():
    x = ad.parameter(np.array(2.0), "x")
    unused = ad.parameter(np.ones((3, 2)), "unused")
    grads = ad.gradients(ad.mul(x, x), [x, unused])
    assert np.array_equal(grads["unused"], np.zeros((3, 2)))


def test_grad_shared_subexpression_accumulates_once_per_op():
    # f = (x@x) summed twice through one shared node; diamond reuse must not
    # double- or under-count.
    x = ad.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]), "x")
    shared = ad.matmul(x, x)
    loss = ad.add(ad.reduce_sum(shared), ad.reduce_sum(shared))

    def fn():
        s = ad.matmul(x, x)
        return ad.add(ad.reduce_sum(s), ad.reduce_sum(s))

    assert ad.finite_difference_check(fn, [x]) < 1e-8
    grads = ad.gradients(loss, [x])
    assert np.isfinite(grads["x"]).all()


def test_grad_linearity_on_random_compositions():
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = ad.parameter(rng.normal(size=(3, 3)), "x")
        c = rng.normal(size=(3, 3))

        def f():
            return ad.reduce_sum(ad.mul(ad.hinge(x), c))

        def g():
            return ad.reduce_sum(ad.power(x, 2))

        gf = ad.gradients(f(), [x])["x"]
        gg = ad.gradients(g(), [x])["x"]
        gsum = ad.gradients(ad.add(f(), g()), [x])["x"]
        assert np.abs(gsum - (gf + gg)).max() < 1e-12


def test_finite_difference_exact_on_linear():
    rng = np.random.default_rng(6)
    x = ad.parameter(rng.normal(size=(4,)), "x")
    c = rng.normal(size=(4,))
    err = ad.finite_difference_check(lambda: ad.reduce_sum(ad.mul(x, c)), [x])
    assert err < 1e-10


def test_finite_difference_cubic():
    x = ad.parameter(np.array(1.0), "x")
    err = ad.finite_difference_check(lambda: ad.power(x, 3), [x], h=1e-5)
    assert err < 1e-9


def test_finite_difference_nt_xent_random_matrix():
    from xmal.objective import nt_xent

    rng = np.random.default_rng(7)
    s = ad.parameter(rng.normal(size=(3, 3)), "s")
    err = ad.finite_difference_check(lambda: nt_xent(s, 0.5), [s], h=1e-5)
    assert err < 1e-6


def test_finite_difference_rejects_bad_step():
    x = ad.parameter(np.array(1.0), "x")
    with pytest.raises(ContractError):
        ad.finite_difference_check(lambda: ad.mul(x, x), [x], h=0.5)


def test_every_primitive_passes_randomized_gradient_check():
    for result in primitive_checks(seeds=10, h=1e-5, tol=1e-6):
        assert result.passed, f"{result.name}: {result.worst:.3e}"


def test_grad_override_hook_breaks_named_op_only():
    x = ad.parameter(np.array([1.0, -2.0, 3.0]), "x")

    def fn():
        return ad.reduce_sum(ad.mul(ad.hinge(x), ad.hinge(x)))

    clean = ad.finite_difference_check(fn, [x])
    ad.GRAD_OVERRIDES["hinge"] = 1.5
    try:
        broken = ad.finite_difference_check(fn, [x])
    finally:
        ad.GRAD_OVERRIDES.clear()
    assert clean < 1e-8 and broken > 1e-3


def test_backward_visits_each_op_once_in_reverse_order():
    rng = np.random.default_rng(9)
    x = ad.parameter(rng.normal(size=(3, 3)), "x")
    shared = ad.hinge(ad.matmul(x, x))
    loss = ad.add(ad.reduce_sum(shared), ad.reduce_sum(ad.mul(shared, shared)))

    calls = []
    stack, seen = [loss], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is not None:
            original = node._backward
            node._backward = (
                lambda g, _orig=original, _n=node: (calls.append(_n._id), _orig(g))[1]
            )
        stack.extend(node._parents)

    ad.gradients(loss, [x])
    assert len(calls) == len(set(calls))  # each op exactly once
    assert calls == sorted(calls, reverse=True)  # reverse recording order


def test_values_stay_finite_through_composites():
    rng = np.random.default_rng(8)
    for _ in range(20):
        m = rng.normal(size=(4, 4)) * 100.0
        out = ad.row_softmax(ad.normalize_rows(ad.Tensor(m)), 9.0)
        assert np.isfinite(out.value).all()
