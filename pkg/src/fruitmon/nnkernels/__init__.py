"""Hand-rolled differentiable kernels for sparse 3D networks.

Everything is plain numpy: a replayable gradient tape (`tape`), the
operator set with analytic gradients (`ops`), parameter storage with Adam
and checkpoint I/O (`params`), and finite-difference verification
(`gradcheck`).
"""
from .tape import Tape, Var
from .ops import (
    add,
    batch_norm,
    concat_cols,
    concat_rows,
    cross_entropy,
    gather_rows,
    global_avg_pool,
    layer_norm,
    leaky_relu,
    linear,
    lovasz_softmax,
    mhsa_encoder_layer,
    relu,
    segment_mean,
    slice_cols,
    softmax,
    sparse_conv,
)
from .params import (
    AdamState,
    ParamStore,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)
from .gradcheck import grad_check

__all__ = [
    "Tape", "Var",
    "add", "batch_norm", "concat_cols", "concat_rows", "cross_entropy",
    "gather_rows", "global_avg_pool", "layer_norm", "leaky_relu", "linear",
    "lovasz_softmax", "mhsa_encoder_layer", "relu", "segment_mean",
    "slice_cols", "softmax", "sparse_conv",
    "AdamState", "ParamStore", "adam_step", "load_checkpoint", "save_checkpoint",
    "grad_check",
]
