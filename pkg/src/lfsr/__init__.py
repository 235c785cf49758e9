from lfsr.tensor import Tensor, backward

__version__ = "0.1.0"
