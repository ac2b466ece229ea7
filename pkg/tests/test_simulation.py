import numpy as np
import pytest

from oufactor.estimation import FitConfig
from oufactor.measurement import MeasurementParams, ModelParams, ModelSpec, as_batch, neg2_loglik_structured
from oufactor.ou import OUParams, stationary_variance
from oufactor.simulation import (
    TRUTHS,
    SelectionSummary,
    SimDesign,
    candidate_specs,
    generate_dataset,
    replicate_recovery,
    replicate_selection,
    target_params,
)


def test_catalog_values():
    s1 = TRUTHS["setting1"].params
    np.testing.assert_array_equal(s1.ou.theta, [[1, 0.6], [4, 5]])
    np.testing.assert_array_equal(s1.ou.sigma_diag, [1, 2])
    np.testing.assert_array_equal(s1.meas.loadings[:, :].sum(axis=1), [1.2, 1.8, -0.4, 2.0])
    np.testing.assert_array_equal(s1.meas.var_u, [1.1, 1.3, 1.4, 0.9])
    np.testing.assert_array_equal(s1.meas.var_eps, [0.6, 0.5, 0.4, 0.7])
    assert [s.p for s in candidate_specs()] == [1, 2, 3]


def test_design_validation():
    truth = TRUTHS["setting2"].params
    for bad in (dict(N=0), dict(n_range=(0, 3)), dict(n_range=(5, 3)), dict(gap_range=(0.0, 1.0))):
        with pytest.raises(ValueError):
            SimDesign(truth, **bad)


def test_generator_is_deterministic():
    design = SimDesign(TRUTHS["setting1"].params, N=15, seed=99)
    a, b = generate_dataset(design), generate_dataset(design)
    for x, y in zip(a, b):
        assert x.subject_id == y.subject_id
        np.testing.assert_array_equal(x.times, y.times)
        np.testing.assert_array_equal(x.Y, y.Y)


def test_design_ranges():
    data = generate_dataset(SimDesign(TRUTHS["setting1"].params, N=60, seed=1))
    for sp in data:
        assert 10 <= sp.n <= 20
        assert sp.times[0] == 0.0
        gaps = np.diff(sp.times)
        assert np.all((gaps >= 0.1) & (gaps <= 2.0))


def test_single_draw_design():
    data = generate_dataset(SimDesign(TRUTHS["setting1"].params, N=1, n_range=(1, 1), seed=0))
    assert len(data) == 1 and data[0].Y.shape == (1, 4)


def test_pooled_first_occasion_covariance():
    truth = TRUTHS["setting1"].params
    lam, V = truth.meas.loadings, stationary_variance(truth.ou)
    expected = lam @ V @ lam.T + np.diag(truth.meas.var_u + truth.meas.var_eps)
    N, reps = 2000, 10
    # Monte Carlo SE of a zero-mean Gaussian second moment: sqrt((s_ij^2 + s_ii s_jj) / N)
    mcse = np.sqrt((expected**2 + np.outer(np.diag(expected), np.diag(expected))) / N)
    z = []
    for seed in range(reps):
        data = generate_dataset(SimDesign(truth, N=N, n_range=(1, 1), seed=seed))
        Y = np.array([sp.Y[0] for sp in data])
        z.append((Y.T @ Y / N - expected) / mcse)
    # entrywise deviations of one dataset are strongly correlated, so average replicates
    assert np.all(np.abs(np.mean(z, axis=0)) < 3 / np.sqrt(reps))


def test_target_of_setting2_is_nearly_unchanged():
    # the published sigma values are rounded, so the generating variance is unit only to ~3e-3
    truth = TRUTHS["setting2"].params
    scaled = target_params(truth)
    np.testing.assert_allclose(np.diag(stationary_variance(scaled.ou)), 1.0, atol=1e-12)
    np.testing.assert_allclose(scaled.ou.theta, truth.ou.theta, rtol=5e-3)
    np.testing.assert_allclose(scaled.ou.sigma_diag, truth.ou.sigma_diag, rtol=5e-3)
    np.testing.assert_allclose(scaled.meas.lam, truth.meas.lam, rtol=5e-3)


def test_target_univariate_closed_form():
    spec = ModelSpec.from_assignment([0])
    p = ModelParams(MeasurementParams.from_spec(spec, [2.0], [1.0], [1.0]), OUParams.from_diag([[0.8]], [1.0]))
    t = target_params(p)
    assert t.meas.lam[0] == pytest.approx(2 * np.sqrt(0.625), rel=1e-12)
    assert t.meas.lam[0] == pytest.approx(1.5811388, rel=1e-7)
    again = target_params(t)
    np.testing.assert_allclose(again.meas.lam, t.meas.lam, rtol=1e-14)
    np.testing.assert_allclose(again.ou.theta, t.ou.theta, rtol=1e-14)


def test_target_preserves_likelihood():
    truth = TRUTHS["setting1"]
    data = as_batch(generate_dataset(SimDesign(truth.params, N=20, seed=5)))
    raw = ModelParams(truth.params.meas, OUParams.from_diag(truth.params.ou.theta, [3.0, 0.5]))
    assert neg2_loglik_structured(target_params(raw, truth.spec), data) == pytest.approx(
        neg2_loglik_structured(raw, data), rel=1e-10)


def test_recovery_needs_two_replicates():
    design = SimDesign(TRUTHS["setting2"].params, N=10, seed=1)
    with pytest.raises(ValueError):
        replicate_recovery(design, TRUTHS["setting2"].spec, 0)


def test_small_recovery_run():
    truth = TRUTHS["setting2"]
    design = SimDesign(truth.params, N=30, n_range=(5, 8), seed=4)
    cfg = FitConfig(max_block_iters=20, bootstrap=False)
    table = replicate_recovery(design, truth.spec, 2, cfg)
    rows = table.summary()
    assert [r["parameter"] for r in rows][:2] == ["lambda[y1]", "lambda[y2]"]
    assert len(rows) == 4 + 4 + 4 + 4 + 2
    assert all(r["n_used"] + sum(1 for x in table.reasons if x == "failure") == 2 for r in rows)
    assert table.to_csv().startswith("parameter,target,mean,bias,empirical_sd,mcse,mean_se,se_sd_ratio")
    again = replicate_recovery(design, truth.spec, 2, cfg)
    assert again.to_csv() == table.to_csv()


def test_selection_summary_percentages():
    s = SelectionSummary("x", [1, 2, 3], [2, 2, 1, None], [1, 1, 1, None], [True, True, True, False])
    aic = s.percentages("aic")
    assert aic[2] == pytest.approx(200 / 3) and sum(aic.values()) == pytest.approx(100)
    assert s.percentages("bic") == {1: 100.0, 2: 0.0, 3: 0.0}
    assert s.n_usable == 3


def test_selection_preconditions():
    with pytest.raises(KeyError):
        replicate_selection("nope", 1)
    with pytest.raises(ValueError):
        replicate_selection("one_factor", 0)
