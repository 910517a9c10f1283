import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doda import diffmath as dm
from doda import sde
from doda.errors import ConfigError, MissingConditionError, ScheduleError
from doda.UNet import DiffusionModel


class ZeroEps:
    """Predicts no noise at all."""

    def predict_eps(self, x_t, t, domain=None, layout=None):
        return dm.Tensor(np.zeros(x_t.shape))


def test_schedule_is_decreasing_and_starts_at_one(schedule):
    assert schedule.alpha_bars[0] == 1.0
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert len(schedule.alpha_bars) == schedule.T + 1


def test_betas_are_linear_over_t():
    schedule = sde.NoiseSchedule(T=200)
    np.testing.assert_allclose(schedule.betas[1:], np.linspace(1e-4, 2e-2, 200))
    assert schedule.betas[1] == pytest.approx(1e-4) and schedule.betas[-1] == pytest.approx(2e-2)
    assert sde.NoiseSchedule(T=1000).alpha_bars[-1] < 1e-4


@pytest.mark.parametrize("T", [1, 2, 10])
def test_short_schedules_are_valid(T):
    schedule = sde.NoiseSchedule(T=T)
    assert len(schedule.alpha_bars) == T + 1
    assert np.all(np.diff(schedule.alpha_bars) < 0)


def test_rescaled_schedule_ends_close_to_noise():
    schedule = sde.NoiseSchedule(T=200, rescale=True)
    np.testing.assert_allclose(schedule.betas[1:], np.linspace(1e-4, 2e-2, 200) * 5.0)
    assert schedule.alpha_bars[-1] < 0.01
    with pytest.raises(ScheduleError):
        sde.NoiseSchedule(T=10, rescale=True)


def test_invalid_schedules_are_rejected():
    with pytest.raises(ScheduleError):
        sde.NoiseSchedule(T=0)
    with pytest.raises(ScheduleError):
        sde.NoiseSchedule(T=10, beta_min=0.1, beta_max=1.0)
    with pytest.raises(ScheduleError):
        sde.NoiseSchedule(T=10, beta_min=0.2, beta_max=0.1)


def test_schedule_round_trips_through_dict():
    schedule = sde.NoiseSchedule(T=30, rescale=True, lambda_kind="unit")
    assert sde.NoiseSchedule.from_dict(schedule.to_dict()) == schedule


def test_unknown_lambda_kind_is_rejected():
    with pytest.raises(ConfigError):
        sde.NoiseSchedule(T=50, lambda_kind="snr")


def test_timestep_range_is_checked(schedule):
    with pytest.raises(ScheduleError):
        schedule.weight(0)
    with pytest.raises(ScheduleError):
        schedule.alpha_bar(schedule.T + 1)


def test_weights(schedule):
    t = np.arange(1, schedule.T + 1)
    np.testing.assert_allclose(schedule.weight(t), 1 - schedule.alpha_bars[t])
    unit = sde.NoiseSchedule(T=50, lambda_kind="unit")
    np.testing.assert_array_equal(unit.weight(t), np.ones(len(t)))


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=50), st.integers(min_value=0, max_value=10_000))
def test_score_target_is_scaled_negative_noise(t, seed):
    schedule = sde.NoiseSchedule(T=50)
    r = np.random.default_rng(seed)
    x0, eps = r.standard_normal((3, 4)), r.standard_normal((3, 4))
    x_t = sde.perturb(x0, t, eps, schedule)
    expected = -eps / np.sqrt(1 - schedule.alpha_bars[t])
    np.testing.assert_allclose(sde.score_target(x_t, x0, t, schedule), expected, rtol=1e-8, atol=1e-8)


def test_score_target_undefined_at_zero(schedule):
    x = np.zeros((1, 2))
    with pytest.raises(ScheduleError):
        sde.score_target(x, x, 0, schedule)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        sde.LossConfig(kind="triple")
    with pytest.raises(ConfigError):
        sde.LossConfig(dropout=1.0)


def test_dual_loss_needs_layout(schedule, rng):
    batch = sde.Batch(np.zeros((2, 2)), domain=np.zeros((2, 3)))
    with pytest.raises(MissingConditionError):
        sde.loss(ZeroEps(), batch, schedule, sde.LossConfig(kind="dual"), rng)


def test_zero_predictor_loss_is_weighted_noise_energy(schedule):
    """With eps_hat = 0 and lambda = 1 - alpha_bar the loss is the mean squared noise norm."""
    x0 = np.zeros((4000, 2))
    value = sde.loss(ZeroEps(), sde.Batch(x0), schedule, sde.LossConfig(kind="uncond"),
                     np.random.default_rng(0)).item()
    assert value == pytest.approx(2.0, rel=0.05)


def test_fresh_dual_model_loss_equals_domain_loss(tiny_config, schedule, tiny_batch):
    x, tokens, layout = tiny_batch
    batch = sde.Batch(x, domain=tokens, layout=layout)
    dual = DiffusionModel(tiny_config, kind="dual", T=schedule.T, seed=3)
    domain = DiffusionModel(tiny_config, kind="domain", T=schedule.T, seed=3)
    a = sde.loss(dual, batch, schedule, sde.LossConfig(kind="dual"), np.random.default_rng(9)).item()
    b = sde.loss(domain, batch, schedule, sde.LossConfig(kind="domain"), np.random.default_rng(9)).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_sampler_validation(schedule, rng):
    with pytest.raises(ConfigError):
        sde.sample(ZeroEps(), schedule, (1, 2), rng, mode="euler")
    with pytest.raises(ConfigError):
        sde.sample(ZeroEps(), schedule, (1, 2), rng, mode="ancestral", stride=2)


@pytest.mark.parametrize("mode, stride", [("ancestral", 1), ("deterministic", 1), ("deterministic", 5)])
def test_sampler_output_shape(schedule, mode, stride):
    out = sde.sample(ZeroEps(), schedule, (3, 2), np.random.default_rng(0), mode=mode, stride=stride)
    assert out.shape == (3, 2)
    assert np.all(np.isfinite(out))


def test_deterministic_sampling_repeats_exactly(tiny_config, tiny_batch, schedule):
    _, tokens, layout = tiny_batch
    model = DiffusionModel(tiny_config, kind="dual", T=schedule.T, seed=11)
    runs = [sde.sample(model, schedule, (2, 3, 8, 8), np.random.default_rng(4), domain=tokens, layout=layout,
                       mode="deterministic", stride=10) for _ in range(2)]
    np.testing.assert_array_equal(runs[0], runs[1])


@pytest.mark.parametrize("T", [50, 1000])
def test_perturb_moments_at_the_last_step(T):
    schedule = sde.NoiseSchedule(T=T)
    x0 = np.full(200_000, 0.7)
    eps = np.random.default_rng(3).standard_normal(x0.shape)
    x_t = sde.perturb(x0, T, eps, schedule)
    ab = schedule.alpha_bars[T]
    assert x_t.mean() == pytest.approx(np.sqrt(ab) * 0.7, abs=0.01)
    assert x_t.var() == pytest.approx(1.0 - ab, rel=0.02)
