import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geehd.correlation import (
    AutoRegressive1,
    Exchangeable,
    Independence,
    SingularCorrelationError,
    Unstructured,
    correlation_matrix,
    estimate_ar1_tau,
    estimate_exchangeable_tau,
    estimate_unstructured,
    inverse_correlation,
)
from geehd.model import BINARY_LOGIT, POISSON_LOG, ClusterObservation, ClusteredDataset
from geehd.numerics import eigen_extremes

CLAMP = 1e-6


def test_independence_matrix_is_identity():
    np.testing.assert_array_equal(correlation_matrix(Independence(), 3), np.eye(3))


def test_exchangeable_matrix():
    np.testing.assert_array_equal(
        correlation_matrix(Exchangeable(0.5), 2), [[1.0, 0.5], [0.5, 1.0]]
    )


def test_ar1_matrix_powers():
    R = correlation_matrix(AutoRegressive1(0.5), 3)
    assert R[0, 2] == R[2, 0] == pytest.approx(0.25)
    assert np.all(np.diag(R) == 1.0)


def test_exchangeable_validity_depends_on_m():
    Exchangeable(-0.6).matrix(2)  # fine: -1 < tau for m = 2
    with pytest.raises(ValueError):
        Exchangeable(-0.6).matrix(3)  # needs tau > -1/2


def test_ar1_rejects_unit_tau():
    with pytest.raises(ValueError):
        AutoRegressive1(1.0)


def test_unstructured_requires_matching_dimension():
    u = Unstructured(np.eye(3))
    with pytest.raises(ValueError):
        u.matrix(2)


def test_unstructured_diagonal_sanity_warning():
    R = np.eye(2)
    R[0, 0] = 3.0
    with pytest.warns(UserWarning, match="diagonal"):
        Unstructured(R)


def test_unit_diagonal_for_parametric_structures():
    for s in (Independence(), Exchangeable(0.3), AutoRegressive1(-0.4)):
        np.testing.assert_array_equal(np.diag(s.matrix(4)), np.ones(4))


def test_exchangeable_spd_closed_form_eigenvalues():
    for m, tau in [(3, 0.5), (4, -0.2), (2, 0.9)]:
        lo, hi = eigen_extremes(Exchangeable(tau).matrix(m))
        expected = sorted([1.0 - tau, 1.0 + (m - 1) * tau])
        assert lo == pytest.approx(expected[0], rel=1e-12)
        assert hi == pytest.approx(expected[1], rel=1e-12)
        assert lo > 0


def test_inverse_correlation_examples():
    np.testing.assert_allclose(inverse_correlation(np.eye(3)), np.eye(3), atol=1e-15)
    got = inverse_correlation(np.array([[1.0, 0.5], [0.5, 1.0]]))
    np.testing.assert_allclose(got, np.array([[1.0, -0.5], [-0.5, 1.0]]) / 0.75, rtol=1e-12)


def test_inverse_correlation_product_is_identity():
    R = AutoRegressive1(0.7).matrix(5)
    np.testing.assert_allclose(R @ inverse_correlation(R), np.eye(5), atol=1e-10)


def test_singular_correlation_reports_pivot():
    with pytest.raises(SingularCorrelationError) as err:
        inverse_correlation(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert err.value.pivot_index == 1


def _dataset_with_residuals(ys):
    # zero covariates + binary family at beta = 0 give mu = 0.5, sd = 0.5,
    # so residuals are (y - 0.5) / 0.5 = 2 y - 1
    clusters = [ClusterObservation(np.array(y, dtype=float), np.zeros((len(y), 1))) for y in ys]
    return ClusteredDataset(clusters)


def test_estimate_unstructured_outer_product_average():
    data = _dataset_with_residuals([[1, 1], [0, 0]])  # residuals (1,1), (-1,-1)
    est = estimate_unstructured(data, BINARY_LOGIT, [0.0])
    np.testing.assert_allclose(est.structure.R, [[1.0, 1.0], [1.0, 1.0]], atol=1e-14)
    assert est.sample_size_used == 2

    data = _dataset_with_residuals([[1, 0], [0, 1]])  # residuals (1,-1), (-1,1)
    est = estimate_unstructured(data, BINARY_LOGIT, [0.0])
    np.testing.assert_allclose(est.structure.R, [[1.0, -1.0], [-1.0, 1.0]], atol=1e-14)


def test_estimate_unstructured_degenerate_residuals():
    # Poisson with y = mu exactly gives all-zero residuals
    clusters = [ClusterObservation(np.array([1.0, 1.0]), np.zeros((2, 1)))]
    with pytest.raises(ValueError, match="degenerate"):
        estimate_unstructured(ClusteredDataset(clusters), POISSON_LOG, [0.0])


def test_estimate_unstructured_rejects_ragged():
    a = ClusterObservation(np.array([1.0, 0.0]), np.zeros((2, 1)))
    b = ClusterObservation(np.array([1.0]), np.zeros((1, 1)))
    with pytest.raises(ValueError, match="common"):
        estimate_unstructured(ClusteredDataset([a, b]), BINARY_LOGIT, [0.0])


def test_estimate_unstructured_converges_to_truth():
    # Gaussian residuals with known correlation, injected through the Poisson
    # identity-variance path: mu = v = 1 at beta = 0, so eps = y - 1.
    rng = np.random.default_rng(42)
    m, n = 3, 4000
    R0 = Exchangeable(0.4).matrix(m)
    L = np.linalg.cholesky(R0)
    eps = rng.standard_normal((n, m)) @ L.T
    clusters = [ClusterObservation(1.0 + eps[i], np.zeros((m, 1))) for i in range(n)]
    est = estimate_unstructured(ClusteredDataset(clusters), POISSON_LOG, [0.0])
    assert np.max(np.abs(est.structure.R - R0)) <= 0.06
    assert est.condition_number >= 1.0


def test_estimate_unstructured_normalize_flag():
    rng = np.random.default_rng(5)
    eps = 2.0 * rng.standard_normal((200, 2))
    clusters = [ClusterObservation(1.0 + eps[i], np.zeros((2, 1))) for i in range(200)]
    est = estimate_unstructured(ClusteredDataset(clusters), POISSON_LOG, [0.0], normalize=True)
    np.testing.assert_allclose(np.diag(est.structure.R), [1.0, 1.0], atol=1e-12)


def test_exchangeable_tau_clamps_at_one():
    tau = estimate_exchangeable_tau([np.array([1.0, 1.0, 1.0])])
    assert tau == pytest.approx(1.0 - CLAMP)


def test_exchangeable_tau_clamps_at_lower_bound():
    tau = estimate_exchangeable_tau([np.array([1.0, -1.0])])
    assert tau == pytest.approx(-1.0 + CLAMP)


def test_exchangeable_tau_average_of_pair_products():
    tau = estimate_exchangeable_tau([np.array([1.0, 1.0]), np.array([1.0, -1.0])])
    assert tau == pytest.approx(0.0, abs=1e-15)


def test_ar1_tau_values():
    assert estimate_ar1_tau([np.array([1.0, 1.0, 1.0])]) == pytest.approx(1.0 - CLAMP)
    assert estimate_ar1_tau([np.array([1.0, 0.0, -1.0])]) == pytest.approx(0.0, abs=1e-15)
    assert estimate_ar1_tau([np.array([1.0, 1.0]), np.array([-1.0, 1.0])]) == pytest.approx(
        0.0, abs=1e-15
    )


def test_tau_estimators_reject_empty_and_short():
    for fn in (estimate_exchangeable_tau, estimate_ar1_tau):
        with pytest.raises(ValueError):
            fn([])
        with pytest.raises(ValueError):
            fn([np.array([1.0])])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(-2, 2), min_size=2, max_size=5), min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_tau_estimators_invariant_under_cluster_permutation(clusters, rnd):
    residuals = [np.array(c) for c in clusters]
    shuffled = residuals[:]
    rnd.shuffle(shuffled)
    assert estimate_exchangeable_tau(residuals) == pytest.approx(
        estimate_exchangeable_tau(shuffled), rel=1e-12, abs=1e-12
    )
    assert estimate_ar1_tau(residuals) == pytest.approx(
        estimate_ar1_tau(shuffled), rel=1e-12, abs=1e-12
    )
