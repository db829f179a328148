import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssi_lab.errors import ConfigError, GridGuardError, NonFiniteError
from ssi_lab.hermite import (
    BEYOND_TRUNCATION,
    HermiteTensor,
    contract_all_ones,
    custom_link,
    hermite_coeffs_1d,
    hermite_expansion,
    hermite_poly,
    hermite_sum_expansion,
    hermite_sum_link,
    hermite_table,
    hermite_tensor_coeff,
    operator_norm,
    separable_expansion,
    sequence_information_exponent,
)
from ssi_lab.quadrature import gh_rule

# ReLU coefficients c_0..c_6, frozen from symbolic integration (sympy)
RELU_COEFFS = [
    0.39894228040143267794,
    0.5,
    0.19947114020071633897,
    0.0,
    -0.016622595016726361581,
    0.0,
    0.0016622595016726361581,
]
# |x| coefficients c_0..c_4, same oracle
ABS_COEFFS = [0.79788456080286535588, 0.0, 0.39894228040143267794, 0.0, -0.033245190033452723162]


@pytest.mark.parametrize("k,x,expected", [(2, 2.0, 3.0), (0, 7.3, 1.0), (4, 0.0, 3.0), (3, 1.5, 1.5**3 - 4.5)])
def test_hermite_poly_values(k, x, expected):
    assert hermite_poly(k, x) == pytest.approx(expected, abs=1e-12)


def test_hermite_poly_rejects_negative_order():
    with pytest.raises(ConfigError):
        hermite_poly(-1, 0.0)


def test_hermite_table_matches_numpy_hermite_e():
    x = np.linspace(-3, 3, 11)
    H = hermite_table(6, x)
    for k in range(7):
        ref = np.polynomial.hermite_e.hermeval(x, [0] * k + [1])
        np.testing.assert_allclose(H[:, k], ref, atol=1e-10)


def test_orthogonality_up_to_six():
    rule = gh_rule(17)
    for j in range(7):
        for k in range(7):
            val = rule.expect(lambda x: hermite_poly(j, x) * hermite_poly(k, x))
            target = math.factorial(k) if j == k else 0.0
            assert abs(val - target) < 1e-8


def test_coeffs_of_square():
    np.testing.assert_allclose(hermite_coeffs_1d(lambda x: x**2, 4), [1, 0, 1, 0, 0], atol=1e-12)


def test_coeffs_of_he3():
    np.testing.assert_allclose(hermite_coeffs_1d(lambda x: hermite_poly(3, x), 4), [0, 0, 0, 1, 0], atol=1e-12)


def test_relu_coeffs_against_symbolic_oracle():
    c = hermite_coeffs_1d(lambda x: np.maximum(x, 0.0), 6, kinks=(0.0,))
    np.testing.assert_allclose(c, RELU_COEFFS, atol=1e-10)
    assert abs(c[0] - 1 / math.sqrt(2 * math.pi)) < 1e-8
    assert abs(c[1] - 0.5) < 1e-8


def test_abs_coeffs_against_symbolic_oracle():
    c = hermite_coeffs_1d(np.abs, 4, kinks=(0.0,))
    np.testing.assert_allclose(c, ABS_COEFFS, atol=1e-10)


def test_plain_gauss_hermite_is_inaccurate_at_a_kink():
    # motivates the kinks argument
    c = hermite_coeffs_1d(lambda x: np.maximum(x, 0.0), 2, n_quad=20)
    assert abs(c[0] - RELU_COEFFS[0]) > 1e-5


def test_coeffs_need_enough_nodes():
    with pytest.raises(ConfigError):
        hermite_coeffs_1d(np.sin, 10, n_quad=5)


def test_coeffs_reject_non_finite():
    with pytest.raises(NonFiniteError):
        hermite_coeffs_1d(lambda x: np.full_like(x, np.nan), 2, n_quad=4)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=7))
def test_polynomial_round_trip(coefs):
    K = len(coefs) - 1
    f = np.polynomial.Polynomial(coefs)
    c = hermite_coeffs_1d(f, K, n_quad=K + 8)
    pts = np.random.default_rng(0).uniform(-3, 3, 100)
    recon = hermite_table(K, pts) @ c
    np.testing.assert_allclose(recon, f(pts), atol=1e-8 * max(1.0, np.max(np.abs(f(pts)))))


def test_product_link_tensor():
    g = custom_link(lambda z: z[:, 0] * z[:, 1], 2)
    C = hermite_tensor_coeff(g, 2)
    np.testing.assert_allclose(C.to_dense(), [[0, 0.5], [0.5, 0]], atol=1e-8)


def test_sum_he2_is_identity():
    g = custom_link(lambda z: hermite_poly(2, z[:, 0]) + hermite_poly(2, z[:, 1]), 2)
    np.testing.assert_allclose(hermite_tensor_coeff(g, 2).to_dense(), np.eye(2), atol=1e-8)


def test_even_link_has_zero_order_one():
    g = custom_link(lambda z: np.cos(z[:, 0]) * z[:, 1] ** 2, 2)
    np.testing.assert_allclose(hermite_tensor_coeff(g, 1).to_dense(), 0.0, atol=1e-8)


def test_tensor_grid_guard():
    g = custom_link(lambda z: z.sum(axis=1), 8)
    with pytest.raises(GridGuardError):
        hermite_expansion(g, 4, n_quad=20)


def test_parseval_of_dense_expansion():
    g = custom_link(lambda z: z[:, 0] ** 2 * z[:, 1] + z[:, 1], 2)
    exp = hermite_expansion(g, 4)
    assert abs(exp.residual_norm) < 1e-8


def test_separable_expansion_identity():
    exp = separable_expansion([lambda x: hermite_poly(2, x)] * 3, 4)
    C = exp[2]
    assert C.is_odeco
    np.testing.assert_allclose(C.eigenvalues, 1.0, atol=1e-12)
    np.testing.assert_allclose(C.to_dense(), np.eye(3), atol=1e-12)


def test_separable_expansion_signs():
    exp = separable_expansion([lambda x: x, lambda x: -x], 2)
    np.testing.assert_allclose(exp[1].to_dense(), [1.0, -1.0], atol=1e-12)


def test_separable_zero_parts():
    exp = separable_expansion([lambda x: 0 * x] * 2, 3)
    for k in range(4):
        assert exp[k].max_abs() == 0.0


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_dense_and_separable_agree(k):
    parts = [np.tanh, lambda x: x**3 - np.sin(x)]
    g = custom_link(lambda z: parts[0](z[:, 0]) + parts[1](z[:, 1]), 2)
    dense = hermite_tensor_coeff(g, k, n_quad=40)
    sep = separable_expansion(parts, 4)[k]
    np.testing.assert_allclose(dense.to_dense(), sep.to_dense(), atol=1e-6)


def test_dense_tensor_must_be_symmetric():
    with pytest.raises(ConfigError):
        HermiteTensor(2, 2, dense=np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_odeco_vectors_must_be_orthonormal():
    with pytest.raises(ConfigError):
        HermiteTensor.from_odeco(2, [1.0, 1.0], [[1.0, 0.0], [1.0, 1.0]])


def test_odeco_densify_entries():
    rng = np.random.default_rng(3)
    V = np.linalg.qr(rng.standard_normal((3, 3)))[0].T
    lam = np.array([2.0, -1.0, 0.5])
    T = HermiteTensor.from_odeco(3, lam, V).to_dense()
    for idx in itertools.product(range(3), repeat=3):
        ref = sum(lam[i] * V[i, idx[0]] * V[i, idx[1]] * V[i, idx[2]] for i in range(3))
        assert T[idx] == pytest.approx(ref, abs=1e-14)


SIE_CASES = [
    ([(1.0, (1, 0, 0, 0)), (1.0, (0, 1, 0, 0)), (1.0, (0, 0, 1, 0)), (1.0, (0, 0, 0, 1))], 4, 1),
    ([(1.0, (1, 1))], 2, 2),
    ([(1.0, (1, 4, 0, 0)), (1.0, (0, 0, 2, 2))], 4, 4),
    ([(1.0, (2, 3))], 2, 5),
]


@pytest.mark.parametrize("terms,L,expected", SIE_CASES)
def test_sie_examples(terms, L, expected):
    exp = hermite_sum_expansion(terms, L, 6)
    assert sequence_information_exponent(exp) == expected


def test_sie_quadrature_path_matches_exact():
    g = hermite_sum_link([(1.0, (1, 1))], 2)
    assert sequence_information_exponent(hermite_expansion(g, 4)) == 2


def test_sie_beyond_truncation():
    exp = hermite_sum_expansion([(1.0, (3, 3))], 2, 4)
    assert sequence_information_exponent(exp) == BEYOND_TRUNCATION


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 2.0), st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=3))
def test_even_links_have_even_sie(raw):
    # products of even-degree Hermite polynomials are even functions
    terms = [(c, (2 * a, 2 * b)) for c, a, b in raw if a + b > 0]
    if not terms:
        return
    exp = hermite_sum_expansion(terms, 2, 8)
    sie = sequence_information_exponent(exp)
    assert sie == BEYOND_TRUNCATION or sie % 2 == 0
    for k in range(1, 9, 2):
        assert exp[k].max_abs() == 0.0


@pytest.mark.parametrize("L", [2, 5, 16])
def test_contract_all_ones_identity(L):
    C = HermiteTensor(2, L, dense=np.eye(L))
    assert contract_all_ones(C) == pytest.approx(L)
    assert operator_norm(C) == pytest.approx(1.0)


def test_contract_and_norm_order_one():
    C = HermiteTensor(1, 2, dense=np.array([1.0, -1.0]))
    assert contract_all_ones(C) == pytest.approx(0.0, abs=1e-15)
    assert operator_norm(C) == pytest.approx(math.sqrt(2))
    L = 9
    C = HermiteTensor(1, L, dense=np.full(L, 1 / math.sqrt(L)))
    assert contract_all_ones(C) == pytest.approx(math.sqrt(L))


def test_odeco_operator_norm():
    C = HermiteTensor.from_odeco(3, [3.0, -5.0], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert operator_norm(C) == pytest.approx(5.0)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_odeco_dense_agreement(order):
    rng = np.random.default_rng(order)
    V = np.linalg.qr(rng.standard_normal((4, 4)))[0].T
    lam = np.array([1.5, -0.7, 0.3, 2.2])
    odeco = HermiteTensor.from_odeco(order, lam, V)
    dense = HermiteTensor(order, 4, dense=odeco.to_dense())
    tol = 1e-10 if order <= 2 else 1e-6
    assert abs(contract_all_ones(odeco) - contract_all_ones(dense)) < tol
    assert abs(operator_norm(odeco) - operator_norm(dense)) < tol


def test_power_iteration_matches_brute_force():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((2, 2, 2))
    T = sum(A.transpose(p) for p in itertools.permutations(range(3))) / 6
    C = HermiteTensor(3, 2, dense=T)
    th = np.linspace(0, 2 * np.pi, 20001)
    X = np.stack([np.cos(th), np.sin(th)], axis=1)
    brute = np.max(np.abs(np.einsum("ijk,ni,nj,nk->n", T, X, X, X)))
    assert operator_norm(C) == pytest.approx(brute, rel=1e-6)


def test_hermite_sum_link_evaluates_terms():
    g = hermite_sum_link([(2.0, (1, 2)), (-1.0, (0, 3))], 2)
    z = np.array([[0.3, -1.2], [1.1, 0.4]])
    ref = 2 * z[:, 0] * (z[:, 1] ** 2 - 1) - (z[:, 1] ** 3 - 3 * z[:, 1])
    np.testing.assert_allclose(g(z), ref, atol=1e-14)


def test_hermite_sum_expansion_matches_quadrature():
    terms = [(2.0, (1, 2)), (-1.0, (0, 3)), (0.5, (1, 1))]
    exact = hermite_sum_expansion(terms, 2, 4)
    quad = hermite_expansion(hermite_sum_link(terms, 2), 4)
    for k in range(5):
        np.testing.assert_allclose(exact[k].to_dense(), quad[k].to_dense(), atol=1e-10)


def test_link_is_deterministic_and_square_integrable():
    g = hermite_sum_link([(1.0, (2, 0)), (1.0, (0, 2))], 2)
    z = np.random.default_rng(0).standard_normal((50, 2))
    assert np.array_equal(g(z), g(z))
    assert g.second_moment() == pytest.approx(4.0, abs=1e-10)


def test_unknown_link_kind():
    from ssi_lab.hermite import LinkFunction

    with pytest.raises(ConfigError):
        LinkFunction(2, 1, lambda z: z, kind="mystery")
