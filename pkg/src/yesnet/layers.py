"""Small parameterized building blocks shared by the backbone and heads."""

import numpy as np

from . import autodiff as ad


def uniform_init(rng, shape, fan_in, gain=1.0):
    """Uniform +-gain/sqrt(fan_in). gain 1 is the plain fan-in rule; the
    backbone stacks need He/Xavier gains or the signal vanishes by the last
    pool (~0.45x per layer over 19 weighted layers)."""
    bound = gain / np.sqrt(fan_in)
    return ad.Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


CONV_GAIN = np.sqrt(6.0)  # He-uniform, matches the leaky-ReLU stacks
CELL_GAIN = np.sqrt(3.0)  # Xavier-uniform for the tanh recurrences


class Conv:
    """k x k convolution with bias and same-padding, optional leaky ReLU."""

    def __init__(self, in_ch, out_ch, ksize, rng, stride=1, act="leaky"):
        self.stride = stride
        self.pad = ksize // 2
        self.act = act
        self.w = uniform_init(rng, (out_ch, in_ch, ksize, ksize), in_ch * ksize * ksize,
                              gain=CONV_GAIN)
        self.b = ad.Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x):
        y = ad.conv2d(x, self.w, stride=self.stride, pad=self.pad)
        y = ad.add(y, self.b.reshape((1, self.b.size, 1, 1)))
        if self.act == "leaky":
            y = ad.leaky_relu(y, alpha=0.1)
        return y

    def params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def linear_params(rng, in_dim, out_dim):
    """Weight [in, out] plus zero bias [out], uniform-initialized by fan-in."""
    w = uniform_init(rng, (in_dim, out_dim), in_dim)
    b = ad.Tensor(np.zeros(out_dim), requires_grad=True)
    return w, b


def load_into(params, loaded, prefix=""):
    """Copy snapshot arrays into parameter tensors by name, in place."""
    for name, tensor in params.items():
        key = prefix + name
        if key not in loaded:
            raise KeyError(f"snapshot is missing parameter {key!r}")
        arr = loaded[key]
        if arr.shape != tensor.shape:
            raise ValueError(f"snapshot {key!r} has shape {arr.shape}, expected {tensor.shape}")
        tensor.data[...] = arr
