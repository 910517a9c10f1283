import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doda import sde
from doda.config import OracleConfig
from doda.errors import ConfigError, MissingConditionError
from doda.oracle import (
    AnalyticEpsModel,
    GaussianCondModel,
    GaussianMixtureCondModel,
    OracleScoreNet,
    analytic_score,
    compare_scores,
    evaluation_grid,
    fit_score_net,
    independence_statistic,
    irreducible_loss,
    verify_prop1,
)
from doda.ReportPlotter import loss_decreased

SCHEDULE = sde.NoiseSchedule(T=100, rescale=True)


def gaussian_log_density(x, t, y1, y2, toy):
    ab = SCHEDULE.alpha_bars[t]
    var = ab * toy.sigma ** 2 + 1 - ab
    mu = np.sqrt(ab) * toy.mean(y1, y2)
    return -0.5 * np.sum((x - mu) ** 2) / var


def test_condition_pairs_have_distinct_means():
    toy = GaussianCondModel()
    means = {tuple(np.round(toy.mean(i, j), 9)) for i in range(3) for j in range(3)}
    assert len(means) == 9


def test_unknown_condition_raises():
    toy = GaussianCondModel()
    with pytest.raises(MissingConditionError):
        toy.mean(3, 0)
    with pytest.raises(ConfigError):
        GaussianCondModel(n_y1=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 100), st.integers(0, 2), st.integers(0, 2), st.integers(0, 10_000))
def test_analytic_score_is_gradient_of_log_density(t, y1, y2, seed):
    toy = GaussianCondModel()
    x = np.random.default_rng(seed).standard_normal(2)
    score = analytic_score(x, t, y1, y2, toy, SCHEDULE)[0]
    h = 1e-5
    fd = [(gaussian_log_density(x + h * e, t, y1, y2, toy) - gaussian_log_density(x - h * e, t, y1, y2, toy))
          / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(score, fd, rtol=1e-6, atol=1e-6)


def test_single_component_mixture_is_the_gaussian():
    toy = GaussianCondModel()
    mix = GaussianMixtureCondModel(toy, np.zeros((1, 2)))
    x = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_allclose(mix.score(x, 30, 1, 2, SCHEDULE), analytic_score(x, 30, 1, 2, toy, SCHEDULE))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 100), st.integers(0, 10_000))
def test_mixture_score_is_gradient_of_log_density(t, seed):
    r = np.random.default_rng(seed)
    mix = GaussianMixtureCondModel(GaussianCondModel(), r.standard_normal((3, 2)))
    x = r.standard_normal((1, 2))
    h = 1e-5
    fd = [(mix.log_density(x + h * e, t, 0, 1, SCHEDULE) - mix.log_density(x - h * e, t, 0, 1, SCHEDULE))[0]
          / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(mix.score(x, t, 0, 1, SCHEDULE)[0], fd, rtol=1e-5, atol=1e-6)


def test_exact_score_attains_the_irreducible_loss():
    toy = GaussianCondModel()
    rng = np.random.default_rng(0)
    y1, y2 = toy.sample_conditions(20000, rng)
    oh1, oh2 = toy.onehots(y1, y2)
    batch = sde.Batch(toy.sample_x0(y1, y2, rng), domain=oh1, layout=oh2)
    value = sde.loss(AnalyticEpsModel(toy, SCHEDULE), batch, SCHEDULE, sde.LossConfig(dropout=0.0), rng).item()
    assert value == pytest.approx(irreducible_loss(toy, SCHEDULE), rel=0.1)


def test_analytic_model_needs_both_conditions():
    model = AnalyticEpsModel(GaussianCondModel(), SCHEDULE)
    with pytest.raises(MissingConditionError):
        model.predict_eps(np.zeros((1, 2)), np.array([5]), domain=np.eye(3)[:1])


def test_exact_score_scores_perfectly():
    toy = GaussianCondModel()
    cos, rmse, rel = compare_scores(AnalyticEpsModel(toy, SCHEDULE), toy, SCHEDULE)
    assert cos == pytest.approx(1.0)
    assert rel == pytest.approx(0.0, abs=1e-9)


def test_noise_is_independent_of_conditions():
    toy = GaussianCondModel()
    assert independence_statistic(toy, SCHEDULE, 8192, np.random.default_rng(0)) < 0.1


def test_evaluation_grid_stays_in_window():
    toy = GaussianCondModel()
    xs, ts, y1, y2 = evaluation_grid(toy, SCHEDULE)
    assert len(xs) == len(ts) == len(y1) == len(y2)
    assert ts.min() >= 10 and ts.max() <= 90
    assert set(y1) == {0, 1, 2} and set(y2) == {0, 1, 2}


def test_score_net_output_shape():
    net = OracleScoreNet(2, 3, 3, width=8, depth=2)
    out = net.predict_eps(np.zeros((4, 2)), np.array([1, 2, 3, 4]), domain=np.eye(3)[[0, 1, 2, 0]])
    assert out.shape == (4, 2)


def test_short_fit_reduces_the_loss():
    cfg = OracleConfig(steps=300, width=32, depth=2, batch_size=128, lr=2e-3)
    net, toy, schedule, task = fit_score_net(cfg, seed=0)
    assert len(task.losses) == 300
    assert loss_decreased(task.losses)


def test_quick_report_fields():
    cfg = OracleConfig(steps=50, width=16, depth=2, batch_size=64, sample_count=0)
    report = verify_prop1(cfg, seed=1)
    data = report.to_dict()
    assert "pass" in data and "seconds" not in data
    assert np.isfinite(report.cosine_mean) and np.isfinite(report.relative_rmse)
    assert report.irreducible > 0


@pytest.mark.slow
def test_full_run_passes_and_withholding_fails():
    report = verify_prop1(OracleConfig(), seed=0)
    assert report.passed
    withheld = verify_prop1(OracleConfig(), seed=0, withhold_y2=True)
    assert not withheld.passed
