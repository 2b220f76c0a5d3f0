from .gradcheck import check_gradients, relative_error
from .params import (AdamHyper, ParamStore, adam_step, dumps_checkpoint, load_checkpoint,
                     loads_checkpoint, save_checkpoint)
from .tensor import (Tensor, add, backward, concat, conv1d, cross_entropy, embedding,
                     gather_rows, gelu, layer_norm, log_softmax, matmul, mean, mul, no_grad,
                     reshape, scatter_rows, softmax, sub, transpose, tsum)

__all__ = [
    "AdamHyper", "ParamStore", "Tensor", "adam_step", "add", "backward", "check_gradients",
    "concat", "conv1d", "cross_entropy", "dumps_checkpoint", "embedding", "gather_rows", "gelu",
    "layer_norm", "load_checkpoint", "loads_checkpoint", "log_softmax", "matmul", "mean", "mul",
    "no_grad", "relative_error", "reshape", "save_checkpoint", "scatter_rows", "softmax", "sub",
    "transpose", "tsum",
]
