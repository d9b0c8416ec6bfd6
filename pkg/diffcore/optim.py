from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from errors import OptimizerError
from diffcore.tensor import Tensor


@dataclass
class AdamState:
    """
    Adam hyper-parameters plus per-parameter moment estimates.

    Moments are keyed by parameter name and created lazily on the first step.
    """

    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def parameter_key(param: Tensor, index: int) -> str:
    return param.name if param.name else f"param{index}"


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """
    One Adam update with bias correction.

    Weight decay is classic L2: `weight_decay * w` is added to the gradient
    before the moment updates.
    """
    keys = [parameter_key(p, i) for i, p in enumerate(params)]
    for key, param in zip(keys, params):
        if param.grad is None:
            raise OptimizerError(f"parameter '{key}' has no gradient", parameter=key)
        if param.grad.shape != param.shape:
            raise OptimizerError(
                f"parameter '{key}' gradient shape {param.grad.shape} != {param.shape}", parameter=key
            )
        for moments in (state.first_moment, state.second_moment):
            if key in moments and moments[key].shape != param.shape:
                raise OptimizerError(
                    f"moment shape {moments[key].shape} does not match parameter '{key}' {param.shape}", parameter=key
                )

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step

    for key, param in zip(keys, params):
        grad = param.grad
        if state.weight_decay:
            grad = grad + state.weight_decay * param.data

        if key not in state.first_moment:
            state.first_moment[key] = np.zeros_like(param.data)
            state.second_moment[key] = np.zeros_like(param.data)
        m = state.first_moment[key]
        v = state.second_moment[key]

        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)

        m_hat = m / bias1
        v_hat = v / bias2
        param.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def zero_grad(params: Sequence[Tensor]) -> None:
    for param in params:
        param.zero_grad()
