from .autodiff import (Tape, Tensor, as_tensor, backward, concat, custom_op,
                       no_grad, stack, where, zero_grads)
from . import autodiff as ops
from .adam import AdamState, adam_step
from .checkpoint import (checkpoint_hash, load_checkpoint, params_to_tensors,
                         save_checkpoint)
from .mlp import (MlpSpec, eval_mlp, init_mlp_params, mlp_input_grad,
                  positional_encode, positional_encode_vjp)

__all__ = [
    "Tape", "Tensor", "as_tensor", "backward", "concat", "custom_op",
    "no_grad", "stack", "where", "zero_grads", "ops",
    "AdamState", "adam_step",
    "checkpoint_hash", "load_checkpoint", "params_to_tensors", "save_checkpoint",
    "MlpSpec", "eval_mlp", "init_mlp_params", "mlp_input_grad",
    "positional_encode", "positional_encode_vjp",
]
