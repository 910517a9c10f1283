"""Adam optimizer for :mod:`doda.diffmath` parameters."""

import logging
from dataclasses import dataclass, field

import numpy as np

from doda.errors import ShapeError

logger = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators and the shared step count."""

    lr: float
    betas: tuple = BETAS
    eps: float = EPS
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: OptimizerState) -> None:
    """Apply one bias-corrected Adam update in place.

    Args:
        params: Sequence of :class:`~doda.diffmath.Parameter`.
        grads: Gradients aligned with ``params`` (``None`` counts as zero).
        state: Moments are created lazily on the first call.

    Raises:
        ShapeError: If a gradient does not match its parameter.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} for parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


class Adam:
    """Adam over a fixed parameter list.

    This optimizer drives every training loop in the package: diffusion
    pre/post-training, the detector and the oracle score network. It keeps
    its moments in an :class:`OptimizerState` and reads gradients from the
    parameters' ``grad`` slots after :func:`doda.diffmath.backward`.

    .. note::
        Parameters left out of ``params`` are never touched, which is how
        the domain branch is frozen during post-training.
    """

    def __init__(self, params, lr: float, betas: tuple = BETAS, eps: float = EPS):
        """Initialize the optimizer.

        Args:
            params: Parameters to update.
            lr: Learning rate.
            betas: Decay rates of the first and second moments.
            eps: Denominator guard.
        """
        self.params = list(params)
        self.state = OptimizerState(lr=float(lr), betas=tuple(betas), eps=float(eps))

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = float(value)

    def step(self) -> None:
        """Update every parameter from its current gradient."""
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        """Clear gradients before the next backward pass."""
        for p in self.params:
            p.grad = None

    def reset(self) -> None:
        """Drop the moments and the step count, keeping the learning rate."""
        self.state = OptimizerState(lr=self.state.lr, betas=self.state.betas, eps=self.state.eps)
