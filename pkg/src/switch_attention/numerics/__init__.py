from .tensor import Tensor, backward, no_grad, parameter
