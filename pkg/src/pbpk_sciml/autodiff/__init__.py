from .gradcheck import check_gradients, numerical_grad, relative_error
from .nn import Checkpoint, glorot_uniform, linear, load_checkpoint, mlp, save_checkpoint, zeros
from .optim import AdamState, adam_step
from .tensor import (
    GradientError,
    NumericError,
    Record,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    exp,
    index,
    matmul,
    mean,
    mse_loss,
    mul,
    neg,
    relu,
    reshape,
    scale,
    shift,
    softmax_rows,
    sub,
    sum,
    tanh,
    transpose,
)
