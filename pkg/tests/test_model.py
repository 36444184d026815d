import numpy as np
import pytest

from geehd.model import (
    BINARY_LOGIT,
    POISSON_LOG,
    ClusterObservation,
    ClusteredDataset,
    DimensionError,
    get_model,
    linear_predictor,
    marginal_mean,
    marginal_variance,
    pearson_residuals,
    validate_responses,
)


def test_linear_predictor_identity_design():
    c = ClusterObservation(np.array([1.0, 0.0]), np.eye(2))
    np.testing.assert_array_equal(linear_predictor(c, [0.7, -0.2]), [0.7, -0.2])


def test_linear_predictor_zero_vector():
    c = ClusterObservation(np.array([1.0]), np.array([[1.0, 2.0, 3.0]]))
    assert linear_predictor(c, [0.0, 0.0, 0.0])[0] == 0.0


def test_linear_predictor_hand_dot_product():
    c = ClusterObservation(np.array([1.0]), np.array([[1.0, -1.0]]))
    assert linear_predictor(c, [0.4, 0.2])[0] == pytest.approx(0.2, abs=1e-15)


def test_linear_predictor_dimension_mismatch():
    c = ClusterObservation(np.array([1.0]), np.array([[1.0, -1.0]]))
    with pytest.raises(DimensionError):
        linear_predictor(c, [0.4, 0.2, 0.1])


def test_logit_mean_values():
    assert marginal_mean(BINARY_LOGIT, np.array([0.0]))[0] == 0.5
    # closed form exp(t)/(1+exp(t)) at t = log 3
    assert marginal_mean(BINARY_LOGIT, np.array([np.log(3.0)]))[0] == pytest.approx(0.75, abs=1e-14)


def test_poisson_mean_value():
    assert marginal_mean(POISSON_LOG, np.array([0.0]))[0] == 1.0


def test_variance_values():
    assert marginal_variance(BINARY_LOGIT, np.array([0.0]))[0] == 0.25
    assert marginal_variance(BINARY_LOGIT, np.array([np.log(3.0)]))[0] == pytest.approx(
        0.1875, abs=1e-14
    )
    assert marginal_variance(POISSON_LOG, np.array([1.0]))[0] == pytest.approx(
        np.e, rel=1e-15
    )


def test_logit_mean_stays_inside_unit_interval_for_large_theta():
    theta = np.array([-40.0, -35.0, 35.0, 40.0, 700.0, -700.0])
    mu = marginal_mean(BINARY_LOGIT, theta)
    assert np.all(mu > 0.0) and np.all(mu < 1.0)


def test_mean_is_monotone_for_both_families():
    theta = np.linspace(-6, 6, 101)
    for model in (BINARY_LOGIT, POISSON_LOG):
        assert np.all(np.diff(model.mean(theta)) > 0)


@pytest.mark.parametrize("model", [BINARY_LOGIT, POISSON_LOG], ids=lambda m: m.family)
def test_derivative_chain_matches_finite_differences(model):
    h = 1e-6
    theta = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    pairs = [(model.mean, model.dmean), (model.dmean, model.d2mean), (model.d2mean, model.d3mean)]
    for f, df in pairs:
        fd = (f(theta + h) - f(theta - h)) / (2 * h)
        np.testing.assert_allclose(df(theta), fd, rtol=1e-6, atol=1e-9)


def test_pearson_residuals_symmetric_case():
    c = ClusterObservation(np.array([1.0, 0.0]), np.zeros((2, 2)))
    np.testing.assert_allclose(
        pearson_residuals(c, BINARY_LOGIT, [0.0, 0.0]), [1.0, -1.0], atol=1e-14
    )


def test_pearson_residuals_direct_formula():
    # theta = log 3 so mu = 0.75, v = 0.1875
    c = ClusterObservation(np.array([1.0]), np.array([[1.0]]))
    r = pearson_residuals(c, BINARY_LOGIT, [np.log(3.0)])
    assert r[0] == pytest.approx(0.25 / np.sqrt(0.1875), rel=1e-12)


def test_pearson_residuals_zero_when_response_equals_mean():
    c = ClusterObservation(np.array([1.0, 1.0]), np.zeros((2, 3)))
    np.testing.assert_array_equal(pearson_residuals(c, POISSON_LOG, [0.0, 0.0, 0.0]), [0.0, 0.0])


def test_cluster_observation_validation():
    with pytest.raises(DimensionError):
        ClusterObservation(np.array([1.0, 0.0]), np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        ClusterObservation(np.array([]), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        ClusterObservation(np.array([np.nan]), np.zeros((1, 2)))


def test_dataset_requires_shared_dimension():
    a = ClusterObservation(np.array([1.0]), np.zeros((1, 2)))
    b = ClusterObservation(np.array([1.0]), np.zeros((1, 3)))
    with pytest.raises(DimensionError):
        ClusteredDataset([a, b])


def test_dataset_common_size_detection():
    a = ClusterObservation(np.array([1.0, 0.0]), np.zeros((2, 2)))
    b = ClusterObservation(np.array([0.0]), np.zeros((1, 2)))
    assert ClusteredDataset([a, a]).m_common == 2
    assert ClusteredDataset([a, b]).m_common is None


def test_dataset_groups_pack_by_size():
    a = ClusterObservation(np.array([1.0, 0.0]), np.ones((2, 2)))
    b = ClusterObservation(np.array([0.0]), np.zeros((1, 2)))
    data = ClusteredDataset([a, b, a])
    groups = data.groups()
    assert [g.m for g in groups] == [1, 2]
    assert groups[1].Y.shape == (2, 2)
    np.testing.assert_array_equal(groups[1].indices, [0, 2])


def test_validate_responses_binary():
    bad = ClusteredDataset([ClusterObservation(np.array([2.0]), np.zeros((1, 1)))])
    with pytest.raises(ValueError, match="cluster 0"):
        validate_responses(bad, BINARY_LOGIT)
    ok = ClusteredDataset([ClusterObservation(np.array([2.0]), np.zeros((1, 1)))])
    validate_responses(ok, POISSON_LOG)
    frac = ClusteredDataset([ClusterObservation(np.array([1.5]), np.zeros((1, 1)))])
    with pytest.raises(ValueError):
        validate_responses(frac, POISSON_LOG)


def test_get_model_rejects_unknown_family():
    with pytest.raises(ValueError):
        get_model("probit")
