import numpy as np
import pytest

from gaitprop.layers import ConvLayer, DenseLayer
from gaitprop.linalg import orthogonal_init


def naive_conv(x, kernel, bias, stride):
    """Direct nested-loop cross-correlation of a single (C, H, W) input."""
    c_out, c_in, kh, kw = kernel.shape
    _, h, w = x.shape
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = bias[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += kernel[o, c, u, v] * x[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def random_conv_layer(rng, c_in, k, stride, hw, forward_channels=None, slope=0.2, orthogonal=False):
    c_out = c_in * k * k
    if orthogonal:
        m = orthogonal_init(c_out, int(rng.integers(1 << 30)))
    else:
        m = rng.standard_normal((c_out, c_out)) / np.sqrt(c_out) + np.eye(c_out)
    kernel = m.reshape(c_out, c_in, k, k)
    bias = 0.1 * rng.standard_normal(c_out)
    return ConvLayer(kernel, bias, stride, slope, forward_channels, in_shape=(c_in, hw, hw))


def random_dense_layer(rng, n, forward_units=None, slope=0.2, orthogonal=False):
    if orthogonal:
        W = orthogonal_init(n, int(rng.integers(1 << 30)))
    else:
        W = rng.standard_normal((n, n)) / np.sqrt(n) + np.eye(n)
    return DenseLayer(W, 0.1 * rng.standard_normal(n), slope, forward_units)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
