from .autograd import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cumsum,
    default_dtype,
    div,
    dot,
    exp,
    getitem,
    global_grad_norm,
    log,
    log_scaled_softplus,
    log_softmax,
    matmul,
    mean_rows,
    mul,
    no_grad,
    precision,
    reshape,
    scaled_softplus,
    segment_mean,
    set_default_dtype,
    sigmoid,
    sub,
    take_rows,
    tanh,
    tmean,
    transpose,
    tsum,
)
from .quadrature import cumulative_trapezoid, cumulative_trapezoid_matrix, trapezoid, trapezoid_weights
from .serialize import load_tensor, save_tensor
