"""Analytic check that the dual-condition objective learns the conditional score.

The toy data model has two discrete conditions and a Gaussian per condition
pair::

    x0 | y1, y2  ~  N(a[y1] + b[y2], sigma^2 I)

so the perturbed marginal is Gaussian too and its score is known in closed
form. :func:`verify_prop1` trains a small MLP score network with the same
:func:`doda.sde.loss` the image models use and compares what it learned with
:func:`analytic_score` on a held-out grid.

The generator draws ``y1`` and ``y2`` independently and produces ``x_t``
from ``x0`` and fresh noise only; :func:`independence_statistic` measures
that numerically.

.. note::
    Nothing here depends on the image stack beyond :mod:`doda.diffmath`,
    :mod:`doda.sde` and :class:`doda.Adam.Adam`, so a failure points at the
    objective or the autodiff, not at the U-Net.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from doda import diffmath as dm
from doda import sde
from doda.Adam import Adam
from doda.config import OracleConfig, substream
from doda.errors import ConfigError, MissingConditionError
from doda.layers import MLP
from doda.TrainTask import TrainTask
from doda.UNet import sinusoid

logger = logging.getLogger(__name__)

TIME_FEATURES = 16
EVAL_RADII = (0.5, 1.0, 1.5, 2.0)
EVAL_ANGLES = 8
EVAL_TIMESTEPS = 9
#: Evaluation window as fractions of T.
EVAL_WINDOW = (0.1, 0.9)
SAMPLE_SE_LIMIT = 3.0


@dataclass
class GaussianCondModel:
    """Gaussian data model indexed by two independent discrete conditions.

    The means are laid out on two circles (radius 1 for ``y1``, 0.5 for
    ``y2``, rotated half a step) so every pair has its own mean.
    """

    k: int = 2
    n_y1: int = 3
    n_y2: int = 3
    sigma: float = 0.25
    a: np.ndarray = field(init=False, repr=False)
    b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_y1 < 2 or self.n_y2 < 2:
            raise ConfigError("each condition needs at least two values")
        if self.k < 2 or self.sigma < 0:
            raise ConfigError(f"invalid toy model k={self.k} sigma={self.sigma}")
        self.a = np.zeros((self.n_y1, self.k))
        self.b = np.zeros((self.n_y2, self.k))
        ang1 = 2 * np.pi * np.arange(self.n_y1) / self.n_y1
        ang2 = 2 * np.pi * (np.arange(self.n_y2) + 0.5) / self.n_y2
        self.a[:, 0], self.a[:, 1] = np.cos(ang1), np.sin(ang1)
        self.b[:, 0], self.b[:, 1] = 0.5 * np.cos(ang2), 0.5 * np.sin(ang2)
        means = self.mean(*np.meshgrid(np.arange(self.n_y1), np.arange(self.n_y2), indexing="ij"))
        flat = means.reshape(-1, self.k)
        if len(np.unique(np.round(flat, 9), axis=0)) != len(flat):
            raise ConfigError("condition pairs do not have distinct means")

    def check(self, y1, y2):
        y1, y2 = np.asarray(y1), np.asarray(y2)
        if np.any((y1 < 0) | (y1 >= self.n_y1)) or np.any((y2 < 0) | (y2 >= self.n_y2)):
            raise MissingConditionError(f"unknown condition value (y1 in [0,{self.n_y1}), y2 in [0,{self.n_y2}))")
        return y1.astype(np.int64), y2.astype(np.int64)

    def mean(self, y1, y2) -> np.ndarray:
        y1, y2 = self.check(y1, y2)
        return self.a[y1] + self.b[y2]

    def sample_x0(self, y1, y2, rng) -> np.ndarray:
        mu = self.mean(y1, y2)
        return mu + self.sigma * rng.standard_normal(mu.shape)

    def sample_conditions(self, n: int, rng):
        return rng.integers(0, self.n_y1, size=n), rng.integers(0, self.n_y2, size=n)

    def onehots(self, y1, y2):
        y1, y2 = self.check(y1, y2)
        return np.eye(self.n_y1)[y1], np.eye(self.n_y2)[y2]

    def marginal_variance(self, t, schedule: sde.NoiseSchedule) -> np.ndarray:
        ab = schedule.alpha_bar(t)
        return ab * self.sigma ** 2 + 1.0 - ab


def _per_row(values, n):
    return np.broadcast_to(np.asarray(values), (n,))


def analytic_score(x_t, t, y1, y2, model: GaussianCondModel, schedule: sde.NoiseSchedule) -> np.ndarray:
    """``grad log p(x_t | y1, y2)`` of the toy model, row-wise.

    ``x_t | y1, y2 ~ N(sqrt(ab) mu, (ab sigma^2 + 1 - ab) I)``.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    n = x_t.shape[0]
    t = _per_row(schedule.check_t(t), n)
    mu = model.mean(_per_row(y1, n), _per_row(y2, n))
    ab = schedule.alpha_bars[t][:, None]
    var = model.marginal_variance(t, schedule)[:, None]
    return -(x_t - np.sqrt(ab) * mu) / var


@dataclass
class GaussianMixtureCondModel:
    """Each condition pair is a mixture of equal-weight Gaussians around its mean.

    Args:
        base: Supplies the means and ``sigma``.
        offsets: ``m x k`` latent offsets added to every pair's mean.
    """

    base: GaussianCondModel
    offsets: np.ndarray

    def component_means(self, y1, y2) -> np.ndarray:
        """``(n, m, k)`` component means."""
        return self.base.mean(y1, y2)[:, None, :] + np.asarray(self.offsets)[None, :, :]

    def _components(self, x_t, t, y1, y2, schedule):
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        n = x_t.shape[0]
        t = _per_row(schedule.check_t(t), n)
        centers = np.sqrt(schedule.alpha_bars[t])[:, None, None] * self.component_means(
            _per_row(y1, n), _per_row(y2, n))
        var = self.base.marginal_variance(t, schedule)[:, None]
        diff = x_t[:, None, :] - centers
        k = x_t.shape[1]
        logp = -0.5 * np.sum(diff ** 2, axis=2) / var - 0.5 * k * np.log(2 * np.pi * var)
        return diff, var, logp - np.log(len(self.offsets))

    def log_density(self, x_t, t, y1, y2, schedule: sde.NoiseSchedule) -> np.ndarray:
        _, _, logp = self._components(x_t, t, y1, y2, schedule)
        return logsumexp(logp, axis=1)

    def score(self, x_t, t, y1, y2, schedule: sde.NoiseSchedule) -> np.ndarray:
        """Gradient of :meth:`log_density`: responsibility-weighted component scores."""
        diff, var, logp = self._components(x_t, t, y1, y2, schedule)
        resp = softmax(logp, axis=1)
        return -np.sum(resp[:, :, None] * diff, axis=1) / var


def irreducible_loss(model: GaussianCondModel, schedule: sde.NoiseSchedule) -> float:
    """Loss the exact conditional score attains, averaged over ``t`` uniform on ``1..T``.

    Per step the residual noise variance is ``ab sigma^2 / v`` per dimension.
    """
    t = np.arange(1, schedule.T + 1)
    ab = schedule.alpha_bars[t]
    var = model.marginal_variance(t, schedule)
    w = schedule.weight(t) / (1.0 - ab)
    return float(np.mean(w * model.k * ab * model.sigma ** 2 / var))


class AnalyticEpsModel:
    """Noise predictor that returns the exact conditional optimum.

    Conditions arrive as the one-hot vectors :func:`doda.sde.loss` passes as
    ``domain`` (``y1``) and ``layout`` (``y2``).
    """

    def __init__(self, model: GaussianCondModel, schedule: sde.NoiseSchedule):
        self.model = model
        self.schedule = schedule

    def predict_eps(self, x_t, t, domain=None, layout=None) -> dm.Tensor:
        if domain is None or layout is None:
            raise MissingConditionError("the analytic predictor needs both conditions")
        x = x_t.data if isinstance(x_t, dm.Tensor) else np.asarray(x_t)
        y1, y2 = np.argmax(domain, axis=1), np.argmax(layout, axis=1)
        s = analytic_score(x, t, y1, y2, self.model, self.schedule)
        ab = self.schedule.alpha_bars[np.asarray(t)][:, None]
        return dm.Tensor(-np.sqrt(1.0 - ab) * s)


class OracleScoreNet(dm.Module):
    """MLP noise predictor on ``[x_t, onehot(y1), onehot(y2), time features]``."""

    def __init__(self, k: int, n_y1: int, n_y2: int, width: int, depth: int, seed: int = 0):
        self.k, self.n_y1, self.n_y2 = k, n_y1, n_y2
        self.mlp = MLP(k + n_y1 + n_y2 + TIME_FEATURES, width, depth, k, substream(seed, "oracle/net"))

    def predict_eps(self, x_t, t, domain=None, layout=None) -> dm.Tensor:
        x = dm._as_tensor(x_t)
        n = x.shape[0]
        dtype = self.mlp.out.weight.dtype
        y1 = np.zeros((n, self.n_y1)) if domain is None else np.asarray(domain)
        y2 = np.zeros((n, self.n_y2)) if layout is None else np.asarray(layout)
        temb = sinusoid(_per_row(t, n), TIME_FEATURES)
        feats = [x, dm.Tensor(y1.astype(dtype)), dm.Tensor(y2.astype(dtype)), dm.Tensor(temb.astype(dtype))]
        return self.mlp(dm.concat(feats, axis=1))


def _fit_steps(net, toy, schedule, cfg: OracleConfig, rng, withhold_y2: bool):
    opt = Adam(net.parameters(), lr=cfg.lr)
    loss_cfg = sde.LossConfig(kind="dual", dropout=0.0)
    while True:
        y1, y2 = toy.sample_conditions(cfg.batch_size, rng)
        x0 = toy.sample_x0(y1, y2, rng)
        oh1, oh2 = toy.onehots(y1, y2)
        if withhold_y2:
            oh2 = np.zeros_like(oh2)
        opt.zero_grad()
        loss = sde.loss(net, sde.Batch(x0, domain=oh1, layout=oh2), schedule, loss_cfg, rng)
        dm.backward(loss, params=opt.params)
        opt.step()
        yield loss.item()


def fit_score_net(cfg: OracleConfig, seed: int = 0, withhold_y2: bool = False, progress: bool = False):
    """Train the MLP score network on toy data with the dual-condition loss.

    Returns:
        tuple: ``(net, toy model, schedule, TrainTask)``.
    """
    toy = GaussianCondModel(cfg.k, cfg.n_y1, cfg.n_y2, cfg.sigma)
    schedule = sde.NoiseSchedule(T=cfg.T, rescale=cfg.rescale)
    with dm.default_dtype(np.float64):
        net = OracleScoreNet(cfg.k, cfg.n_y1, cfg.n_y2, cfg.width, cfg.depth, seed=seed)
        name = "oracle-y2-withheld" if withhold_y2 else "oracle"
        task = TrainTask(_fit_steps, net, toy, schedule, cfg, substream(seed, "oracle/train"), withhold_y2,
                         name=name, steps=cfg.steps, progress=progress)
        task.run()
    return net, toy, schedule, task


def evaluation_grid(toy: GaussianCondModel, schedule: sde.NoiseSchedule):
    """Points around every pair's perturbed mean, at several radii and timesteps.

    Radii are in units of the marginal standard deviation so every point
    lies in a region the network has seen.
    """
    lo, hi = (int(round(f * schedule.T)) for f in EVAL_WINDOW)
    ts = np.unique(np.linspace(max(lo, 1), hi, EVAL_TIMESTEPS).round().astype(np.int64))
    angles = 2 * np.pi * np.arange(EVAL_ANGLES) / EVAL_ANGLES
    direction = np.zeros((EVAL_ANGLES, toy.k))
    direction[:, 0], direction[:, 1] = np.cos(angles), np.sin(angles)
    xs, tt, y1s, y2s = [], [], [], []
    for t in ts:
        std = np.sqrt(toy.marginal_variance(t, schedule))
        center_scale = np.sqrt(schedule.alpha_bars[t])
        for y1 in range(toy.n_y1):
            for y2 in range(toy.n_y2):
                center = center_scale * toy.mean(y1, y2)
                for r in EVAL_RADII:
                    xs.append(center + r * std * direction)
                    n = EVAL_ANGLES
                    tt.append(np.full(n, t))
                    y1s.append(np.full(n, y1))
                    y2s.append(np.full(n, y2))
    return np.concatenate(xs), np.concatenate(tt), np.concatenate(y1s), np.concatenate(y2s)


def independence_statistic(toy: GaussianCondModel, schedule: sde.NoiseSchedule, n: int, rng) -> float:
    """Largest absolute correlation between the forward noise and the condition one-hots.

    ``x_t`` is built from ``x0`` and fresh noise only, so the noise carries
    no information about ``(y1, y2)`` once ``x0`` is known; the correlation
    should be at the ``1/sqrt(n)`` level.
    """
    y1, y2 = toy.sample_conditions(n, rng)
    x0 = toy.sample_x0(y1, y2, rng)
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    x_t = sde.perturb(x0, t, eps, schedule)
    recovered = (x_t - np.sqrt(schedule.alpha_bars[t])[:, None] * x0) / np.sqrt(1 - schedule.alpha_bars[t])[:, None]
    conds = np.concatenate(toy.onehots(y1, y2), axis=1)
    corr = np.corrcoef(np.concatenate([recovered, conds], axis=1), rowvar=False)
    return float(np.nanmax(np.abs(corr[:toy.k, toy.k:])))


@dataclass
class Prop1Report:
    cosine_mean: float
    rmse: float
    relative_rmse: float
    thresholds: dict
    passed: bool
    withheld_y2: bool = False
    sample_mean_error_se: float = float("nan")
    sample_pass: bool = False
    independence: float = float("nan")
    final_loss: float = float("nan")
    irreducible: float = float("nan")
    seconds: float = 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pass"] = out.pop("passed")
        out.pop("seconds")
        return out

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)


def compare_scores(net, toy, schedule, withhold_y2: bool = False):
    """``(cosine mean, rmse, relative rmse)`` of the net against the analytic score on the grid."""
    xs, ts, y1s, y2s = evaluation_grid(toy, schedule)
    oh1, oh2 = toy.onehots(y1s, y2s)
    if withhold_y2:
        oh2 = np.zeros_like(oh2)
    learned = sde.model_score(net, xs, ts, schedule, domain=oh1, layout=oh2)
    truth = analytic_score(xs, ts, y1s, y2s, toy, schedule)
    dot = np.sum(learned * truth, axis=1)
    cos = dot / (np.linalg.norm(learned, axis=1) * np.linalg.norm(truth, axis=1) + 1e-12)
    rmse = float(np.sqrt(np.mean(np.sum((learned - truth) ** 2, axis=1))))
    return float(cos.mean()), rmse, rmse / float(np.mean(np.linalg.norm(truth, axis=1)))


def sampling_check(net, toy, schedule, count: int, rng, y1: int = 0, y2: int = 0) -> float:
    """Distance of the ancestral sample mean from ``mu(y1, y2)`` in standard errors (worst axis)."""
    oh1, oh2 = toy.onehots(np.full(count, y1), np.full(count, y2))
    x = sde.sample(net, schedule, (count, toy.k), rng, domain=oh1, layout=oh2, mode="ancestral")
    se = x.std(axis=0, ddof=1) / np.sqrt(count)
    return float(np.max(np.abs(x.mean(axis=0) - toy.mean(y1, y2)) / se))


def verify_prop1(cfg: OracleConfig = None, seed: int = 0, withhold_y2: bool = False,
                 progress: bool = False) -> Prop1Report:
    """Train on toy data and check the learned score against the closed form.

    Passing needs a mean cosine of at least ``cfg.cos_threshold`` and an RMSE
    of at most ``cfg.rmse_threshold`` times the mean analytic score norm,
    over ``t`` in ``[0.1 T, 0.9 T]``. With ``withhold_y2`` the network never
    sees ``y2``; that run is expected to fail.
    """
    cfg = cfg or OracleConfig()
    net, toy, schedule, task = fit_score_net(cfg, seed=seed, withhold_y2=withhold_y2, progress=progress)
    with dm.default_dtype(np.float64):
        cos, rmse, rel = compare_scores(net, toy, schedule, withhold_y2)
        sample_se = float("nan")
        if not withhold_y2 and cfg.sample_count > 1:
            sample_se = sampling_check(net, toy, schedule, cfg.sample_count, substream(seed, "oracle/sample"))
    indep = independence_statistic(toy, schedule, 4096, substream(seed, "oracle/independence"))
    passed = cos >= cfg.cos_threshold and rel <= cfg.rmse_threshold
    tail = task.losses[-max(1, len(task.losses) // 20):] if task.losses else [float("nan")]
    report = Prop1Report(
        cosine_mean=cos,
        rmse=rmse,
        relative_rmse=rel,
        thresholds={"cosine": cfg.cos_threshold, "relative_rmse": cfg.rmse_threshold},
        passed=bool(passed),
        withheld_y2=withhold_y2,
        sample_mean_error_se=sample_se,
        sample_pass=bool(sample_se <= SAMPLE_SE_LIMIT),
        independence=indep,
        final_loss=float(np.mean(tail)),
        irreducible=irreducible_loss(toy, schedule),
        seconds=task.total_time,
    )
    level = logging.INFO if passed != withhold_y2 else logging.WARNING
    logger.log(level, "prop1%s: cos %.4f rel-rmse %.4f -> %s", " (y2 withheld)" if withhold_y2 else "",
               cos, rel, "pass" if passed else "fail")
    return report
