"""Confidence network and the weighted factor-pair similarity."""

import numpy as np
import pytest

from xmal import autodiff as ad
from xmal.confidence import (
    confidence,
    confidence_batch,
    factor_pair_similarity,
    factor_pair_similarity_matrix,
    init_confidence_params,
)
from xmal.errors import DimensionError


def zero_params(factor_dim, hidden):
    return {
        "conf.w1": ad.parameter(np.zeros((hidden, 2 * factor_dim)), "conf.w1"),
        "conf.b1": ad.parameter(np.zeros(hidden), "conf.b1"),
        "conf.w2": ad.parameter(np.zeros((1, hidden)), "conf.w2"),
        "conf.b2": ad.parameter(np.zeros(1), "conf.b2"),
    }


def test_zero_network_outputs_half():
    params = zero_params(3, 4)
    g = confidence(ad.Tensor([1.0, -2.0, 0.5]), ad.Tensor([0.3, 0.0, 1.0]), params)
    assert float(g.value) == 0.5


def test_large_output_bias_saturates_toward_one():
    params = zero_params(2, 3)
    params["conf.b2"].value = np.array([50.0])
    g = confidence(ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, 4.0]), params)
    assert float(g.value) > 0.999


def test_confidence_matches_layer_by_layer_oracle():
    rng = np.random.default_rng(0)
    d, hidden = 3, 5
    params = init_confidence_params(d, hidden, rng)
    e_t = rng.normal(size=d)
    e_a = rng.normal(size=d)
    x = np.concatenate([e_t, e_a])
    h = np.maximum(params["conf.w1"].value @ x + params["conf.b1"].value, 0.0)
    y = params["conf.w2"].value @ h + params["conf.b2"].value
    expected = 1.0 / (1.0 + np.exp(-y[0]))
    got = float(confidence(ad.Tensor(e_t), ad.Tensor(e_a), params).value)
    assert abs(got - expected) < 1e-12


def test_confidence_dim_mismatch():
    params = zero_params(3, 4)
    with pytest.raises(DimensionError):
        confidence(ad.Tensor([1.0, 2.0]), ad.Tensor([1.0, 2.0, 3.0]), params)
    with pytest.raises(DimensionError):
        confidence(ad.Tensor([1.0, 2.0]), ad.Tensor([1.0, 2.0]), params)


def test_confidence_bounded_in_unit_interval():
    rng = np.random.default_rng(1)
    params = init_confidence_params(4, 4, rng)
    for _ in range(100):
        g = float(
            confidence(ad.Tensor(rng.normal(size=4) * 3), ad.Tensor(rng.normal(size=4) * 3), params).value
        )
        assert 0.0 < g < 1.0
    # far outside the operating range the squash may round to the endpoints
    for _ in range(20):
        g = float(
            confidence(
                ad.Tensor(rng.normal(size=4) * 1e4), ad.Tensor(rng.normal(size=4) * 1e4), params
            ).value
        )
        assert 0.0 <= g <= 1.0


def test_pair_similarity_saturated_identical_factor():
    params = zero_params(2, 3)
    params["conf.b2"].value = np.array([50.0])
    v = ad.Tensor([0.6, -0.8])
    s = float(factor_pair_similarity([v], [v], params).value)
    assert abs(s - 1.0) < 1e-3


def test_pair_similarity_orthogonal_factors_zero():
    rng = np.random.default_rng(2)
    params = init_confidence_params(2, 2, rng)
    text = [ad.Tensor([1.0, 0.0]), ad.Tensor([0.0, 2.0])]
    audio = [ad.Tensor([0.0, 3.0]), ad.Tensor([-5.0, 0.0])]
    assert abs(float(factor_pair_similarity(text, audio, params).value)) < 1e-15


def test_pair_similarity_matches_composed_oracle():
    rng = np.random.default_rng(3)
    d, k = 3, 4
    params = init_confidence_params(d, d, rng)
    text = [rng.normal(size=d) for _ in range(k)]
    audio = [rng.normal(size=d) for _ in range(k)]
    expected = 0.0
    for e_t, e_a in zip(text, audio):
        x = np.concatenate([e_t, e_a])
        h = np.maximum(params["conf.w1"].value @ x + params["conf.b1"].value, 0.0)
        y = (params["conf.w2"].value @ h + params["conf.b2"].value)[0]
        g = 1.0 / (1.0 + np.exp(-y))
        expected += g * (e_t @ e_a) / (np.linalg.norm(e_t) * np.linalg.norm(e_a))
    got = float(
        factor_pair_similarity(
            [ad.Tensor(t) for t in text], [ad.Tensor(a) for a in audio], params
        ).value
    )
    assert abs(got - expected) < 1e-10


def test_pair_similarity_factor_count_mismatch():
    params = zero_params(2, 2)
    with pytest.raises(DimensionError):
        factor_pair_similarity([ad.Tensor([1.0, 2.0])], [], params)


def test_pair_similarity_bounded_by_factor_count():
    rng = np.random.default_rng(4)
    k, d = 4, 3
    params = init_confidence_params(d, d, rng)
    for _ in range(50):
        text = [ad.Tensor(rng.normal(size=d)) for _ in range(k)]
        audio = [ad.Tensor(rng.normal(size=d)) for _ in range(k)]
        s = float(factor_pair_similarity(text, audio, params).value)
        assert abs(s) < k


def test_cosine_scale_invariance_exact():
    rng = np.random.default_rng(5)
    e_t = rng.normal(size=4)
    e_a = rng.normal(size=4)

    def cos(x, y):
        return float(
            ad.reduce_sum(ad.mul(ad.l2_normalize(ad.Tensor(x)), ad.l2_normalize(ad.Tensor(y)))).value
        )

    base = cos(e_t, e_a)
    for c in (2.0, 8.0, 0.25):
        assert abs(cos(c * e_t, c * e_a) - base) < 1e-12


def test_unsquashed_mode_returns_raw_output():
    rng = np.random.default_rng(6)
    params = init_confidence_params(3, 3, rng)
    raw = confidence(ad.Tensor(rng.normal(size=3)), ad.Tensor(rng.normal(size=3)), params, squash="none")
    assert np.isfinite(raw.value)
    with pytest.raises(Exception):
        confidence(ad.Tensor([1.0]), ad.Tensor([1.0]), zero_params(1, 2), squash="hard")


def test_similarity_matrix_matches_per_pair_calls():
    rng = np.random.default_rng(7)
    b, d, k = 3, 2, 3
    params = init_confidence_params(d, d, rng)
    text = [ad.Tensor(rng.normal(size=(b, d))) for _ in range(k)]
    audio = [ad.Tensor(rng.normal(size=(b, d))) for _ in range(k)]
    s = factor_pair_similarity_matrix(text, audio, params).value
    for i in range(b):
        for j in range(b):
            t_item = [ad.Tensor(f.value[j]) for f in text]
            a_item = [ad.Tensor(f.value[i]) for f in audio]
            direct = float(factor_pair_similarity(t_item, a_item, params).value)
            assert abs(s[i, j] - direct) < 1e-10


def test_gradients_vs_finite_differences():
    rng = np.random.default_rng(8)
    d, k = 2, 3
    params = init_confidence_params(d, d, rng)
    text = [ad.parameter(rng.normal(size=d), f"t{i}") for i in range(k)]
    audio = [ad.parameter(rng.normal(size=d), f"a{i}") for i in range(k)]
    everything = text + audio + list(params.values())

    def fn():
        return factor_pair_similarity(text, audio, params)

    assert ad.finite_difference_check(fn, everything, h=1e-5) < 1e-4
