from treeformer.autodiff.tensor import (
    Tape,
    Tensor,
    add,
    add_const,
    as_tensor,
    backward,
    concat_last,
    concat_rows,
    cross_entropy,
    current_tape,
    dropout,
    exp,
    get_dtype,
    grad_enabled,
    layer_norm,
    linear,
    log_softmax_last,
    masked_softmax_last,
    matmul,
    mean,
    mul,
    mul_const,
    new_tape,
    no_grad,
    parameter,
    permute,
    precision,
    relu,
    reshape,
    scale,
    set_default_dtype,
    slice_last,
    softmax_last,
    stack,
    sub,
    sum_,
    take_rows,
    tanh,
    transpose_last,
)
from treeformer.autodiff.optim import OptimConfig, Optimizer, learning_rate, optimizer_step
from treeformer.autodiff.gradcheck import GradCheckReport, grad_check, numeric_gradient, relative_error
