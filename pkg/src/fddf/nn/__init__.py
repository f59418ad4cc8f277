from fddf.nn import functional
from fddf.nn.layers import BatchNorm2d, Conv2d, ConvBN, Linear, Module, Parameter
from fddf.nn.optim import SGD, sgd_step
from fddf.nn.tensor import Tensor, concat, default_dtype, no_grad, precision, set_precision

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "ConvBN",
    "Linear",
    "Module",
    "Parameter",
    "SGD",
    "Tensor",
    "concat",
    "default_dtype",
    "functional",
    "no_grad",
    "precision",
    "set_precision",
    "sgd_step",
]
