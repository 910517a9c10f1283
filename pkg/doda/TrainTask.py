"""Generator-driven training tasks.

Every training loop in the package is written as a generator function that
performs one optimisation step per ``next()`` and yields the step's loss. A
:class:`TrainTask` drives such a generator, keeps a profile of step times
and, optionally, a trace of the losses.

Example:
    .. code-block:: python

        def fit_fun():
            while True:
                loss = one_step()
                yield loss

        task = TrainTask(fit_fun, name="oracle", steps=20000, trace=True)
        task.run()
        print(task)
"""

import logging
import math
import time

from tqdm import tqdm

from doda.errors import DivergenceError

logger = logging.getLogger(__name__)


class TrainTask:
    """One named training loop.

    Args:
        run_fun: Generator function yielding the loss of each step. Called
            once with ``*args`` to obtain the generator.
        name: Name shown in progress bars and summaries.
        steps: Number of steps :meth:`run` performs; ``None`` runs until the
            generator is exhausted.
        profile: Keep step-time statistics.
        trace: Keep every yielded loss in :attr:`losses`.
        progress: Show a ``tqdm`` bar while running.
    """

    def __init__(self, run_fun, *args, name: str = "NoName", steps=None, profile: bool = True,
                 trace: bool = True, progress: bool = False):
        self._run_gen = run_fun(*args)
        self.name = name
        self.steps = steps
        self._prof = profile
        self._trace = trace
        self.progress = progress
        self.losses = []
        self.reset_profile()

    def reset_profile(self):
        """Reset the step-time statistics."""
        self._runs = 0
        self._run_sum = 0.0
        self._slowest = 0.0

    def schedule(self) -> bool:
        """Run one step.

        Returns:
            bool: ``False`` once the generator is exhausted.

        Raises:
            DivergenceError: If the step's loss is not finite.
        """
        stime = time.perf_counter()
        try:
            loss = next(self._run_gen)
        except StopIteration:
            return False
        if self._prof:
            runt = time.perf_counter() - stime
            self._runs += 1
            self._run_sum += runt
            self._slowest = max(self._slowest, runt)
        loss = float(loss)
        if not math.isfinite(loss):
            raise DivergenceError(f"task '{self.name}' diverged at step {self._runs}")
        if self._trace:
            self.losses.append(loss)
        return True

    def run(self) -> list:
        """Drive the generator for :attr:`steps` steps (or to exhaustion)."""
        bar = tqdm(total=self.steps, desc=self.name, disable=not self.progress, leave=False)
        done = 0
        while self.steps is None or done < self.steps:
            if not self.schedule():
                break
            done += 1
            bar.update(1)
            if self.losses:
                bar.set_postfix(loss=f"{self.losses[-1]:.4f}", refresh=False)
        bar.close()
        logger.info("%s", self)
        return self.losses

    @property
    def mean_step_time(self) -> float:
        return self._run_sum / self._runs if self._runs else 0.0

    @property
    def total_time(self) -> float:
        return self._run_sum

    def get_trace(self) -> str:
        """Loss trace as ``step: loss`` lines."""
        out = "Task " + self.name + ":"
        if not self._trace:
            return out + " not traced"
        return out + "\n" + "".join(f"{k: 8d}: {v:.6f}\n" for k, v in enumerate(self.losses))

    def __repr__(self) -> str:
        rst = f"{self.name:<16s}{self._runs: 8d}"
        if self._prof and self._runs:
            rst += f"{self.mean_step_time * 1000: 10.3f}{self._slowest * 1000: 10.3f} ms"
        if self.losses:
            rst += f"  last loss {self.losses[-1]:.5f}"
        return rst
