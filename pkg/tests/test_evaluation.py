import math

import numpy as np
import pytest
from scipy import stats

from firespde.evaluation import (
    U_BA,
    U_CNT,
    apply_mask,
    benchmark_ba,
    benchmark_cnt,
    challenge_score,
    make_cv_mask,
    ols_fit,
    poisson_irls,
    raw_weights,
    read_mask_csv,
    thresholds,
    validate_cdf,
    weight_vector,
    write_mask_csv,
)
from firespde.exceptions import ParameterError, ValidationError
from firespde.mcmc import make_rng
from firespde.synthetic import SimConfig, simulate

GOLDEN_CNT = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16, 18, 20, 22, 24, 26, 28, 30,
              40, 50, 60, 70, 80, 90, 100]
GOLDEN_BA = [0, 1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 150, 200, 250, 300, 400, 500,
             1000, 1500, 2000, 5000, 10000, 20000, 30000, 40000, 50000, 100000]


def test_threshold_golden_values():
    np.testing.assert_array_equal(U_CNT, GOLDEN_CNT)
    np.testing.assert_array_equal(U_BA, GOLDEN_BA)
    for u in (U_CNT, U_BA):
        assert len(u) == 28 and np.all(np.diff(u) > 0)
    np.testing.assert_array_equal(thresholds("BA"), U_BA)
    with pytest.raises(ParameterError):
        thresholds("area")


def test_weight_golden_values():
    assert raw_weights(0.0) == pytest.approx(1 - 1.001 ** -0.25, rel=1e-14)
    assert raw_weights(0.0) == pytest.approx(2.4984e-4, abs=1e-8)
    assert raw_weights(100.0) == pytest.approx(0.4534, abs=1e-4)
    for u in (U_CNT, U_BA):
        assert np.all(np.diff(raw_weights(u)) > 0)
        assert abs(weight_vector(u).sum() - 1) < 1e-12


def test_score_examples():
    u = U_CNT
    y = np.array([3.0, 0.0, 57.0])
    perfect = (y[:, None] <= u[None, :]).astype(float)
    assert challenge_score(perfect, y, u) == 0.0
    assert challenge_score(np.full((1, 28), 0.5), [1000.0], u) == pytest.approx(0.25, abs=1e-14)
    F = np.tile(stats.poisson.cdf(u, 4.0), (3, 1))
    s = challenge_score(F, y, u)
    assert challenge_score(np.vstack([F, F]), np.concatenate([y, y]), u) == pytest.approx(2 * s, rel=1e-14)


def test_score_rejects_invalid_cdf():
    with pytest.raises(ValidationError):
        challenge_score(np.full((1, 28), 1.2), [1.0], U_CNT)
    bad = np.linspace(1, 0, 28)[None, :]
    with pytest.raises(ValidationError):
        challenge_score(bad, [1.0], U_CNT)
    with pytest.raises(ParameterError):
        challenge_score(np.zeros((2, 28)), [1.0], U_CNT)
    with pytest.raises(ValidationError):
        validate_cdf([[0.1, np.nan]])


def test_true_cdf_minimizes_expected_score(rng):
    rate = rng.gamma(2.0, 3.0, size=300)
    y = rng.poisson(rate)
    true = stats.poisson.cdf(U_CNT[None, :], rate[:, None])
    s_true = challenge_score(true, y, U_CNT)
    wins = 0
    for _ in range(200):
        factor = np.exp(0.3 * rng.standard_normal(len(rate)))
        pert = stats.poisson.cdf(U_CNT[None, :], (rate * factor)[:, None])
        wins += s_true <= challenge_score(pert, y, U_CNT)
    assert wins >= 0.95 * 200


def test_ols_exact():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(40), rng.standard_normal((40, 2))])
    beta = np.array([0.5, -1.25, 2.0])
    b, s2 = ols_fit(X, X @ beta)
    np.testing.assert_allclose(b, beta, atol=1e-8)
    assert s2 < 1e-20
    with pytest.raises(ParameterError):
        ols_fit(np.column_stack([X, X[:, 1]]), X @ beta)


def test_poisson_intercept_only():
    y = np.array([2, 6, 3, 5, 4, 4, 1, 7])
    b = poisson_irls(np.ones((8, 1)), y)
    assert b[0] == pytest.approx(math.log(4.0), abs=1e-6)


def test_poisson_recovers_slope(rng):
    X = np.column_stack([np.ones(4000), rng.standard_normal(4000)])
    y = rng.poisson(np.exp(0.5 + 0.3 * X[:, 1]))
    b = poisson_irls(X, y)
    np.testing.assert_allclose(b, [0.5, 0.3], atol=0.05)


def test_benchmark_cdfs_valid(rng):
    X = np.column_stack([np.ones(50), rng.standard_normal(50)])
    F = benchmark_cnt(X, rng.poisson(3.0, 50), X[:5])
    validate_cdf(F)
    G = benchmark_ba(X, rng.standard_normal(50) + 2, X[:5], np.full(5, 0.3))
    validate_cdf(G)
    np.testing.assert_allclose(G[:, 0], 0.7)


def _panel_with_missing(seed):
    cfg = SimConfig(nx=6, ny=5, T=28, p_both=0.1, p_ba=0.05, p_cnt=0.05, missing_period_frac=0.5)
    panel, _ = simulate(cfg, make_rng(seed))
    return panel


@pytest.mark.parametrize("scheme", ["fixed-month", "random-month"])
def test_cv_mask_properties(scheme):
    for seed in range(5):
        panel = _panel_with_missing(seed)
        mask = make_cv_mask(panel, scheme, make_rng(100 + seed))
        assert mask.donors
        missing = ~panel.ba_obs | ~panel.cnt_obs
        for t, d in mask.donors:
            assert not missing[:, t].any()
            assert missing[:, d].any()
            if scheme == "fixed-month":
                assert panel.months[t] == panel.months[d]
            assert mask.ba[:, t].sum() == (~panel.ba_obs[:, d]).sum()
            assert mask.cnt[:, t].sum() == (~panel.cnt_obs[:, d]).sum()
        assert not (mask.ba & ~panel.ba_obs).any()
        assert not (mask.cnt & ~panel.cnt_obs).any()
        targets = [t for t, _ in mask.donors]
        assert len(set(targets)) == len(targets)
        total = sum((~panel.ba_obs[:, d]).sum() + (~panel.cnt_obs[:, d]).sum() for _, d in mask.donors)
        assert mask.n_masked == total


def test_mask_csv_round_trip(tmp_path):
    panel = _panel_with_missing(0)
    mask = make_cv_mask(panel, "fixed-month", make_rng(1))
    write_mask_csv(mask, panel, tmp_path / "m.csv")
    back = read_mask_csv(tmp_path / "m.csv", panel)
    np.testing.assert_array_equal(back.ba, mask.ba)
    np.testing.assert_array_equal(back.cnt, mask.cnt)
    masked = apply_mask(panel, mask)
    assert (~masked.ba_obs).sum() == (~panel.ba_obs).sum() + mask.ba.sum()


def test_mask_errors():
    cfg = SimConfig(nx=4, ny=4, T=7)
    panel, _ = simulate(cfg, make_rng(0))
    with pytest.raises(ParameterError):
        make_cv_mask(panel, "fixed-month", make_rng(0))
    with pytest.raises(ParameterError):
        make_cv_mask(panel, "weekly", make_rng(0))
    full = panel.masked(ba_hide=np.ones((panel.N, panel.T), bool))
    with pytest.raises(ParameterError):
        make_cv_mask(full, "random-month", make_rng(0))
