"""
Parameter update rules: Adam with L2 decay folded into the gradient, and plain SGD.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from fedseg.errors import ConfigError, NonFiniteError
from fedseg.params import ModelParams


@dataclass
class AdamState:
    """Adam hyper-parameters plus the running moments.

    Moments stay ``None`` until the first step; ``step_count`` counts steps
    taken with this state.
    """

    learning_rate: float = 1.0e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1.0e-8
    l2_lambda: float = 1.0e-4
    first_moment: Optional[ModelParams] = None
    second_moment: Optional[ModelParams] = None
    step_count: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")

    def reset(self) -> None:
        self.first_moment = None
        self.second_moment = None
        self.step_count = 0


def _check_grads(params: ModelParams, grads: ModelParams) -> None:
    params.require_layout(grads, 'gradient')
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"gradient for {name} contains NaN or Inf")


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState) -> ModelParams:
    """
    Apply one Adam update and advance ``state`` in place.

    The effective gradient is ``g + l2_lambda * p``. Nothing in ``state`` is
    touched when the gradients are rejected.

    Args:
        params: Current parameters
        grads: Gradients with the same layout
        state: Optimizer state, updated in place

    Returns:
        New parameters

    Raises:
        ShapeMismatchError: Layouts differ
        NonFiniteError: A gradient holds NaN or Inf
    """
    _check_grads(params, grads)
    if state.first_moment is None or state.second_moment is None:
        first, second = params.zeros_like(), params.zeros_like()
    else:
        first, second = state.first_moment, state.second_moment
        params.require_layout(first, 'Adam moment')

    step = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step

    new_params, new_first, new_second = [], [], []
    for name, p in params.items():
        g = grads[name] + state.l2_lambda * p
        m = b1 * first[name] + (1.0 - b1) * g
        v = b2 * second[name] + (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params.append((name, p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)))
        new_first.append((name, m))
        new_second.append((name, v))

    state.first_moment = ModelParams(new_first)
    state.second_moment = ModelParams(new_second)
    state.step_count = step
    return ModelParams(new_params)


def sgd_step(params: ModelParams, grads: ModelParams, learning_rate: float,
             l2_lambda: float = 0.0) -> ModelParams:
    """Plain gradient descent with the same L2 convention as :func:`adam_step`."""
    _check_grads(params, grads)
    return params.map(lambda name, p: p - learning_rate * (grads[name] + l2_lambda * p))
