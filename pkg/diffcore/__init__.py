from diffcore.tensor import Tape, Tensor, as_tensor, backward, forward_primitive, no_grad, PRIMITIVES
from diffcore import ops
from diffcore.optim import AdamState, adam_step, zero_grad
from diffcore.gradcheck import check_gradients, numerical_gradient
from diffcore.checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__all__ = [
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "forward_primitive",
    "no_grad",
    "PRIMITIVES",
    "ops",
    "AdamState",
    "adam_step",
    "zero_grad",
    "check_gradients",
    "numerical_gradient",
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
]
