"""Variance-preserving diffusion: schedule, perturbation kernel, objectives and samplers.

Every score network in the package predicts the added noise ``eps``; the
score it stands for is ``-eps / sqrt(1 - alpha_bar_t)``. Models implement
:class:`ScoreModel`, so the same loss and samplers serve the U-Net and the
toy oracle network.

Three objective kinds are supported:

* ``uncond``: no conditions.
* ``domain``: the domain tokens only (pre-training on unlabeled images).
* ``dual``: domain tokens and layout image together (post-training).

.. note::
    Dropout masks for both conditions are drawn on every batch, whatever
    the kind, so all kinds consume the random stream identically. A dual
    loss with the layout branch zeroed therefore equals the domain loss on
    the same batch and seed.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from doda import diffmath as dm
from doda.errors import ConfigError, MissingConditionError, ScheduleError, ShapeError

logger = logging.getLogger(__name__)

#: Reference step count the beta range is stated for.
REFERENCE_STEPS = 1000

LAMBDA_KINDS = ("noise", "unit")
OBJECTIVE_KINDS = ("uncond", "domain", "dual")
SAMPLER_MODES = ("ancestral", "deterministic")


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta variance-preserving schedule.

    ``beta_t`` runs linearly from ``beta_min`` to ``beta_max`` over ``T`` steps.
    With ``rescale`` the range is read as stated for a 1000-step process and
    multiplied by ``1000 / T``, so a short schedule still ends close to pure
    noise; ``beta_T`` must then stay below 1.

    Args:
        T: Number of steps, at least 1.
        beta_min: First beta.
        beta_max: Last beta.
        lambda_kind: ``"noise"`` for ``lambda(t) = 1 - alpha_bar_t`` or
            ``"unit"`` for ``lambda(t) = 1``.
        rescale: Multiply the betas by ``1000 / T``.
    """

    T: int = 200
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    lambda_kind: str = "noise"
    rescale: bool = False
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1 or not 0 < self.beta_min <= self.beta_max:
            raise ScheduleError(f"invalid schedule T={self.T}, beta=[{self.beta_min}, {self.beta_max}]")
        if self.lambda_kind not in LAMBDA_KINDS:
            raise ConfigError(f"unknown lambda_kind '{self.lambda_kind}'")
        if self.beta_max >= 1.0:
            raise ScheduleError(f"beta_max {self.beta_max} is not below 1")
        betas = np.linspace(self.beta_min, self.beta_max, self.T)
        if self.rescale:
            betas = betas * (REFERENCE_STEPS / self.T)
        if betas[-1] >= 1.0:
            raise ScheduleError(f"rescaled beta_T = {betas[-1]:.3f} is not below 1; raise T")
        alphas = 1.0 - betas
        # index 0 holds alpha_bar_0 = 1, index t holds alpha_bar_t
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        object.__setattr__(self, "betas", np.concatenate([[0.0], betas]))
        object.__setattr__(self, "alphas", np.concatenate([[1.0], alphas]))
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def check_t(self, t, allow_zero: bool = False) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.T):
            raise ScheduleError(f"timestep outside [{lo}, {self.T}]: {t.min()}..{t.max()}")
        return t

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[self.check_t(t, allow_zero=True)]

    def weight(self, t) -> np.ndarray:
        """lambda(t) for the configured kind."""
        t = self.check_t(t)
        if self.lambda_kind == "noise":
            return 1.0 - self.alpha_bars[t]
        return np.ones(t.shape)

    def snr(self, t) -> np.ndarray:
        ab = self.alpha_bar(t)
        return ab / (1.0 - ab)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max,
                "lambda_kind": self.lambda_kind, "rescale": self.rescale}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls(**{k: data[k] for k in ("T", "beta_min", "beta_max", "lambda_kind", "rescale") if k in data})


@dataclass
class LossConfig:
    kind: str = "dual"
    dropout: float = 0.1

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"unknown objective kind '{self.kind}'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")


@dataclass
class Batch:
    """Training batch: clean data and optional conditions, batch-first."""

    x0: np.ndarray
    domain: Optional[np.ndarray] = None
    layout: Optional[np.ndarray] = None


class ScoreModel(Protocol):
    """What the objectives and samplers need from a network."""

    def predict_eps(self, x_t: dm.Tensor, t: np.ndarray, domain=None, layout=None) -> dm.Tensor:
        ...


def _expand_t(values: np.ndarray, ndim: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def perturb(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Draw ``x_t`` from the forward kernel given the noise ``eps``.

    ``t`` is a scalar or one timestep per leading-axis item.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"perturb: x0 {x0.shape} vs eps {eps.shape}")
    ab = _expand_t(schedule.alpha_bars[schedule.check_t(t)], x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def score_target(x_t: np.ndarray, x0: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """Score of the forward kernel ``grad log p(x_t | x0)``.

    Raises:
        ScheduleError: If ``t`` is 0 (the kernel is a point mass) or out of range.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x_t.shape != x0.shape:
        raise ShapeError(f"score_target: x_t {x_t.shape} vs x0 {x0.shape}")
    t = schedule.check_t(t, allow_zero=True)
    if np.any(t == 0):
        raise ScheduleError("score_target is undefined at t=0")
    ab = _expand_t(schedule.alpha_bars[t], x_t.ndim)
    return -(x_t - np.sqrt(ab) * x0) / (1.0 - ab)


def model_score(model: ScoreModel, x_t, t, schedule: NoiseSchedule, domain=None, layout=None) -> np.ndarray:
    """Evaluate the score a noise-predicting model stands for, without a graph."""
    t = schedule.check_t(np.broadcast_to(np.asarray(t), (np.shape(x_t)[0],)))
    with dm.no_grad():
        eps = model.predict_eps(dm.Tensor(x_t), t, domain=domain, layout=layout).data
    return -eps.astype(np.float64) / np.sqrt(_expand_t(1.0 - schedule.alpha_bars[t], np.ndim(x_t)))


def _conditions(batch: Batch, cfg: LossConfig, drop_domain: np.ndarray, drop_layout: np.ndarray):
    domain = layout = None
    if cfg.kind in ("domain", "dual"):
        if batch.domain is None:
            raise MissingConditionError(f"objective '{cfg.kind}' needs domain tokens")
        domain = np.where(_expand_t(drop_domain, batch.domain.ndim), 0.0, batch.domain)
    if cfg.kind == "dual":
        if batch.layout is None:
            raise MissingConditionError("objective 'dual' needs a layout image")
        layout = np.where(_expand_t(drop_layout, batch.layout.ndim), 0.0, batch.layout)
    return domain, layout


def loss(model: ScoreModel, batch: Batch, schedule: NoiseSchedule, cfg: LossConfig, rng) -> dm.Tensor:
    """Weighted denoising score-matching loss, averaged over the batch.

    Per item: ``lambda(t) * ||s(x_t, conds, t) - score_target||^2`` summed
    over data dimensions. Written in terms of the predicted noise this is
    ``lambda(t) / (1 - alpha_bar_t) * ||eps_hat - eps||^2``.

    Raises:
        MissingConditionError: If the batch lacks a condition the kind needs.
    """
    x0 = np.asarray(batch.x0)
    n = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    drop_domain = rng.random(n) < cfg.dropout
    drop_layout = rng.random(n) < cfg.dropout
    domain, layout = _conditions(batch, cfg, drop_domain, drop_layout)
    x_t = perturb(x0, t, eps, schedule)
    dtype = dm.DEFAULT_DTYPE
    eps_hat = model.predict_eps(dm.Tensor(x_t.astype(dtype)), t, domain=domain, layout=layout)
    diff = dm.sub(eps_hat, dm.Tensor(eps.astype(dtype)))
    flat = dm.reshape(diff, (n, -1))
    per_item = dm.reduce_sum(dm.mul(flat, flat), axis=1)
    w = schedule.weight(t) / (1.0 - schedule.alpha_bars[t])
    return dm.reduce_mean(dm.mul(per_item, dm.Tensor(w.astype(dtype))))


def sample(model: ScoreModel, schedule: NoiseSchedule, shape, rng, domain=None, layout=None,
           mode: str = "ancestral", stride: int = 1) -> np.ndarray:
    """Run the reverse process from pure noise down to ``t = 0``.

    Args:
        model: Noise-predicting network.
        schedule: Schedule the model was trained with.
        shape: Output shape, batch first.
        rng: ``numpy.random.Generator`` for the initial noise and ancestral noise.
        domain: Optional domain tokens, one set per batch item.
        layout: Optional layout images, one per batch item.
        mode: ``"ancestral"`` (stochastic, every step) or ``"deterministic"``
            (noise-free update, may skip steps with ``stride``).
        stride: Step skip for the deterministic sampler.

    Returns:
        np.ndarray: Samples of ``shape``.
    """
    if mode not in SAMPLER_MODES:
        raise ConfigError(f"unknown sampler mode '{mode}'")
    if stride < 1 or (mode == "ancestral" and stride != 1):
        raise ConfigError("stride must be 1 for ancestral sampling and >= 1 otherwise")
    x = rng.standard_normal(shape)
    n = shape[0]
    steps = list(range(schedule.T, 0, -stride))
    for t in steps:
        tt = np.full(n, t)
        s = model_score(model, x, tt, schedule, domain=domain, layout=layout)
        if mode == "ancestral":
            beta = schedule.betas[t]
            x = (x + beta * s) / np.sqrt(schedule.alphas[t])
            if t > 1:
                x = x + np.sqrt(beta) * rng.standard_normal(shape)
        else:
            ab = schedule.alpha_bars[t]
            ab_prev = schedule.alpha_bars[max(t - stride, 0)]
            eps = -s * np.sqrt(1.0 - ab)
            x0_hat = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
            x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps
    return x
