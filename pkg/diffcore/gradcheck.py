from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from diffcore.tensor import Tape, Tensor, no_grad


@dataclass
class GradCheckResult:
    ok: bool
    max_abs_error: float
    max_rel_error: float
    worst_input: int


def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar `fn()` w.r.t. every entry of `target`."""
    flat = target.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = fn().item()
            flat[i] = original - eps
            minus = fn().item()
            flat[i] = original
            grad[i] = (plus - minus) / (2.0 * eps)
    return grad.reshape(target.shape)


def analytic_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> List[np.ndarray]:
    for tensor in inputs:
        tensor.zero_grad()
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> GradCheckResult:
    """
    Compare tape gradients of scalar `fn()` against central differences.

    An entry passes when |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|).
    """
    analytic = analytic_gradients(fn, inputs)
    ok = True
    max_abs, max_rel, worst = 0.0, 0.0, -1
    for index, (tensor, exact) in enumerate(zip(inputs, analytic)):
        numeric = numerical_gradient(fn, tensor, eps)
        diff = np.abs(exact - numeric)
        scale = np.maximum(np.abs(exact), np.abs(numeric))
        if not np.all(diff <= atol + rtol * scale):
            ok = False
        if diff.size:
            abs_err = float(diff.max())
            rel_err = float(np.max(diff / np.maximum(scale, atol)))
            if rel_err > max_rel:
                worst = index
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
    return GradCheckResult(ok=ok, max_abs_error=max_abs, max_rel_error=max_rel, worst_input=worst)
