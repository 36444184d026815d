import numpy as np
import pytest

from geehd.correlation import Exchangeable, inverse_correlation
from geehd.estimator import FitResult, fit_gee, fisher_information
from geehd.inference import (
    ConsistencyReport,
    Hypothesis,
    chi2_sf,
    confidence_interval,
    high_dim_test,
    normal_upper_quantile,
    sandwich_consistency_probe,
    sandwich_covariance,
    wald_test,
)
from geehd.model import BINARY_LOGIT, ClusterObservation, ClusteredDataset


def _fit_result(beta, sigma):
    beta = np.asarray(beta, dtype=float)
    p = beta.shape[0]
    sigma = np.asarray(sigma, dtype=float)
    return FitResult(
        beta_hat=beta,
        structure_final=Exchangeable(0.0),
        H=np.eye(p),
        M_hat=sigma,
        sigma_hat=sigma,
        iterations=1,
        converged=True,
        final_score_norm=0.0,
        family="binary_logit",
        structure_kind="exchangeable",
        n=100,
        p=p,
    )


def _binary_data(rng, n, m, p, beta):
    X = 0.5 * rng.standard_normal((n, m, p))
    mu = BINARY_LOGIT.mean(X @ beta)
    Y = (rng.random((n, m)) < mu).astype(float)
    return ClusteredDataset.from_stacked(Y, X)


def test_sandwich_closed_form_intercept_only_m1():
    rng = np.random.default_rng(0)
    y = (rng.random(150) < 0.65).astype(float)
    clusters = [ClusterObservation(np.array([v]), np.ones((1, 1))) for v in y]
    data = ClusteredDataset(clusters)
    fit = fit_gee(data, BINARY_LOGIT, "independence")
    sigma = sandwich_covariance(fit, data, BINARY_LOGIT)
    pihat = BINARY_LOGIT.mean(fit.beta_hat)[0]
    expected = ((y - pihat) ** 2).sum() / (150 * pihat * (1 - pihat)) ** 2
    assert sigma[0, 0] == pytest.approx(expected, rel=1e-10)


def test_sandwich_requires_convergence():
    fit = _fit_result([0.0], [[1.0]])
    fit.converged = False
    with pytest.raises(ValueError):
        sandwich_covariance(fit, None, BINARY_LOGIT)


def test_model_based_collapse_gives_inverse_information():
    # replacing each residual outer product by the working correlation
    # collapses the middle matrix to the information, so the sandwich is its
    # inverse; verified at the formula level on a random instance
    rng = np.random.default_rng(1)
    beta = np.array([0.3, -0.2])
    data = _binary_data(rng, 40, 3, 2, beta)
    R = Exchangeable(0.35).matrix(3)
    Rinv = inverse_correlation(R)
    (g,) = data.groups()
    theta = g.X @ beta
    sq = np.sqrt(BINARY_LOGIT.variance(theta))
    G = sq[:, :, None] * g.X
    B = np.matmul(Rinv, G)
    M_collapsed = np.einsum("nmp,mk,nkq->pq", B, R, B)
    H = fisher_information(data, BINARY_LOGIT, beta, Rinv)
    np.testing.assert_allclose(M_collapsed, H, rtol=1e-9)
    sigma = np.linalg.solve(H, np.linalg.solve(H, M_collapsed).T)
    np.testing.assert_allclose(sigma, np.linalg.inv(H), rtol=1e-8)


def test_sandwich_psd_on_fitted_data():
    rng = np.random.default_rng(2)
    data = _binary_data(rng, 100, 3, 4, np.array([0.4, -0.3, 0.2, -0.1]))
    fit = fit_gee(data, BINARY_LOGIT, "exchangeable")
    w = np.linalg.eigvalsh(fit.sigma_hat)
    assert w[0] >= -1e-10 * w[-1]


def test_confidence_interval_degenerate_alpha_collapses():
    fit = _fit_result([0.4], [[0.01]])
    lo, hi = confidence_interval(fit, 1, 1.0)
    assert lo == hi == pytest.approx(0.4)


def test_confidence_interval_standard_normal_quantile():
    fit = _fit_result([0.4, 0.1], [[0.01, 0.0], [0.0, 0.04]])
    lo, hi = confidence_interval(fit, 1, 0.05)
    assert lo == pytest.approx(0.4 - 1.959964 * 0.1, abs=5e-7)
    assert hi == pytest.approx(0.4 + 1.959964 * 0.1, abs=5e-7)


def test_confidence_interval_index_range():
    fit = _fit_result([0.4], [[0.01]])
    with pytest.raises(IndexError):
        confidence_interval(fit, 0, 0.05)
    with pytest.raises(IndexError):
        confidence_interval(fit, 2, 0.05)


def test_normal_quantile_value():
    assert normal_upper_quantile(0.025) == pytest.approx(1.959964, abs=1e-6)


def test_chi2_sf_against_even_df_finite_sum():
    # for df = 4 the upper tail is exp(-x/2) (1 + x/2)
    for x in (0.5, 2.0, 7.78, 20.0):
        assert chi2_sf(x, 4) == pytest.approx(np.exp(-x / 2) * (1 + x / 2), rel=1e-12)
    # df = 2: exp(-x/2)
    assert chi2_sf(3.0, 2) == pytest.approx(np.exp(-1.5), rel=1e-12)


def test_wald_zero_at_null_point():
    fit = _fit_result([0.2, -0.1], np.diag([0.01, 0.02]))
    res = wald_test(fit, Hypothesis(np.array([[1.0, 0.0]]), np.array([0.2])))
    assert res.statistic == pytest.approx(0.0, abs=1e-14)
    assert res.p_value == pytest.approx(1.0)
    assert res.df == 1


def test_wald_one_df_reduction_matches_ci():
    sigma = np.array([[0.04, 0.01], [0.01, 0.09]])
    fit = _fit_result([0.5, -0.4], sigma)
    h = 0.1
    res = wald_test(fit, Hypothesis(np.array([[1.0, 0.0]]), np.array([h])))
    assert res.statistic == pytest.approx((0.5 - h) ** 2 / sigma[0, 0], rel=1e-12)
    # agreement between the test at level alpha and interval coverage of h
    alpha = 0.05
    crit = normal_upper_quantile(alpha / 2) ** 2
    lo, hi = confidence_interval(fit, 1, alpha)
    assert (res.statistic > crit) == not_in(lo, hi, h)


def not_in(lo, hi, v):
    return v < lo or v > hi


def test_wald_ci_agreement_randomized():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = rng.integers(2, 6)
        G = rng.standard_normal((p, p))
        sigma = G @ G.T / p + 0.05 * np.eye(p)
        fit = _fit_result(rng.standard_normal(p) * 0.3, sigma)
        j = int(rng.integers(1, p + 1))
        h = float(rng.standard_normal() * 0.2)
        L = np.zeros((1, p))
        L[0, j - 1] = 1.0
        res = wald_test(fit, Hypothesis(L, np.array([h])))
        alpha = 0.05
        lo, hi = confidence_interval(fit, j, alpha)
        crit = normal_upper_quantile(alpha / 2) ** 2
        assert (res.statistic > crit) == not_in(lo, hi, h)


def test_wald_invariance_under_row_transformations():
    rng = np.random.default_rng(4)
    p, l = 6, 3
    G = rng.standard_normal((p, p))
    fit = _fit_result(rng.standard_normal(p), G @ G.T / p + 0.1 * np.eye(p))
    L = rng.standard_normal((l, p))
    base = wald_test(fit, Hypothesis(L)).statistic
    for _ in range(5):
        T = rng.standard_normal((l, l)) + 2 * np.eye(l)
        assert abs(np.linalg.det(T)) > 1e-6
        trans = wald_test(fit, Hypothesis(T @ L)).statistic
        assert trans == pytest.approx(base, rel=1e-8)


def test_hypothesis_validation():
    with pytest.raises(ValueError):
        Hypothesis(np.array([[1.0, 0.0], [2.0, 0.0]]))  # dependent rows
    with pytest.raises(ValueError):
        Hypothesis(np.eye(3), np.zeros(2))


def test_high_dim_test_trivial_points():
    p = 24
    sigma = np.eye(p) * 0.01
    beta = np.full(p, 0.2)
    fit = _fit_result(beta, sigma)
    res = high_dim_test(fit, beta)
    assert res.quadratic_form == pytest.approx(0.0, abs=1e-12)
    assert res.z == pytest.approx(-np.sqrt(p / 2.0), rel=1e-12)
    # quadratic form exactly p centers the statistic
    shifted = beta + 0.1 * np.sqrt(np.diag(sigma)) * 0  # same point
    delta = np.zeros(p)
    delta[0] = np.sqrt(p * sigma[0, 0])
    res = high_dim_test(fit, beta - delta)
    assert res.z == pytest.approx(0.0, abs=1e-12)
    assert res.p_n == p


def test_consistency_probe_zero_gap_when_sandwich_matches_mc():
    # betas alternating +/-1 have sample variance 100/99; set each fit's
    # sandwich to exactly that value so the scaled gap is zero
    betas = [np.array([1.0]) if i % 2 == 0 else np.array([-1.0]) for i in range(100)]
    var = np.var([b[0] for b in betas], ddof=1)
    fits = [_fit_result(b, [[var]]) for b in betas]
    for f in fits:
        f.n = 50
    fits2 = [_fit_result(b, [[var]]) for b in betas]
    for f in fits2:
        f.n = 200
    report = sandwich_consistency_probe([fits, fits2], np.array([[1.0]]))
    assert report.scaled_gaps == (0.0, 0.0)
    assert isinstance(report, ConsistencyReport)


def test_consistency_probe_detects_decrease():
    rng = np.random.default_rng(5)
    groups = []
    for n, wobble in ((100, 0.5), (400, 0.1)):
        sigma_true = np.array([[1.0 / n]])
        betas = rng.standard_normal(300) / np.sqrt(n)
        fits = [_fit_result(np.array([b]), sigma_true * (1 + wobble)) for b in betas]
        for f in fits:
            f.n = n
        groups.append(fits)
    report = sandwich_consistency_probe(groups, np.array([[1.0]]))
    assert report.decreasing
    assert len(report.scaled_gaps) == 2


def test_consistency_probe_needs_replications():
    fits = [_fit_result(np.array([0.0]), [[1.0]]) for _ in range(40)]
    with pytest.raises(ValueError, match="100"):
        sandwich_consistency_probe([fits, fits], np.array([[1.0]]))
