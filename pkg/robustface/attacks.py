"""
L-infinity PGD driven by an arbitrary differentiable loss closure.

The closure receives the perturbed batch as a Tensor and returns a scalar
loss; it decides which encoder branch and which objective (contrastive or
triplet) the attack ascends. Attacks never touch model parameters: parameter
gradients recorded on the attack tape are dropped with it.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Union

import numpy as np

from .errors import AttackError, BudgetError, ShapeError
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

LossClosure = Callable[[Tensor], Tensor]

BUDGET_TOLERANCE = 1e-7


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 7
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.iterations > 0 and not self.alpha > 0:
            raise ValueError(f"alpha must be > 0 when iterations > 0, got {self.alpha}")

    def with_seed(self, seed: int) -> "AttackConfig":
        return replace(self, seed=int(seed))

    def as_fgsm(self) -> "AttackConfig":
        """One signed step of size epsilon from the clean input."""
        if self.epsilon == 0:
            return replace(self, iterations=0, random_start=False)
        return replace(self, alpha=self.epsilon, iterations=1, random_start=False)


def _as_array(x: Union[Tensor, np.ndarray]) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.asarray(data, dtype=np.float32)


def pgd(loss_of_input: LossClosure, x: Union[Tensor, np.ndarray], config: AttackConfig) -> Tensor:
    """
    Signed-gradient ascent on ``loss_of_input(x + delta)`` inside the
    epsilon ball, returning the final delta.

    Per iteration: step ``alpha * sign(grad)``, clip delta to [-eps, eps], then
    re-derive delta for pixels where ``x + delta`` left [0, 1].
    """
    x_data = _as_array(x)
    if x_data.ndim != 2:
        raise ShapeError("pgd input", x_data.shape)
    eps = np.float32(config.epsilon)
    if eps == 0:
        return Tensor(np.zeros_like(x_data))

    delta = np.zeros_like(x_data)
    if config.random_start:
        rng = np.random.default_rng(config.seed)
        delta = rng.uniform(-eps, eps, size=x_data.shape).astype(np.float32)
        delta = _project_range(x_data, delta)

    alpha = np.float32(config.alpha)
    for iteration in range(config.iterations):
        candidate = Tensor(x_data + delta, requires_grad=True)
        with Tape() as tape:
            loss = loss_of_input(candidate)
        grad = tape.backward(loss)[candidate]
        if not np.all(np.isfinite(grad)):
            raise AttackError(iteration)
        delta = np.clip(delta + alpha * np.sign(grad).astype(np.float32), -eps, eps)
        delta = _project_range(x_data, delta)
        logger.debug("pgd iteration %d: loss %.6f", iteration, loss.item())
    return Tensor(delta)


def _project_range(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    # Only pixels pushed outside [0, 1] are rewritten so interior deltas stay exact.
    adv = x + delta
    outside = (adv < 0) | (adv > 1)
    if not outside.any():
        return delta
    return np.where(outside, np.clip(adv, 0, 1) - x, delta).astype(np.float32)


def fgsm(loss_of_input: LossClosure, x: Union[Tensor, np.ndarray], epsilon: float) -> Tensor:
    """Single signed-gradient step of size epsilon; PGD with one iteration."""
    return pgd(loss_of_input, x, AttackConfig(epsilon=epsilon).as_fgsm())


def assert_within_budget(x: Union[Tensor, np.ndarray], delta: Union[Tensor, np.ndarray], epsilon: float) -> float:
    """Raise BudgetError unless ``|delta| <= eps`` and ``x + delta`` stays in [0, 1]; returns max |delta|."""
    x_data, d = _as_array(x), _as_array(delta)
    if x_data.shape != d.shape:
        raise ShapeError("budget check", x_data.shape, d.shape)
    worst = float(np.max(np.abs(d))) if d.size else 0.0
    if worst > epsilon + BUDGET_TOLERANCE:
        raise BudgetError(f"max |delta| = {worst:.9f} exceeds epsilon {epsilon:.9f}")
    adv = x_data + d
    if adv.size and (adv.min() < -BUDGET_TOLERANCE or adv.max() > 1 + BUDGET_TOLERANCE):
        raise BudgetError(f"perturbed pixels leave [0, 1]: range [{adv.min():.9f}, {adv.max():.9f}]")
    return worst
