"""Invertible layers: square dense layers and patch-invertible convolutions.

Every layer maps its input to a full output (including auxiliary units or
channels) and forwards only a prefix of that output to the next layer. The
full output is what the inverse consumes, so auxiliaries must be cached.
Batches are the leading axis everywhere.
"""

import numpy as np

from .errors import InvalidDimensionError, ShapeError, SingularMatrixError
from .linalg import check_finite, invert_square, orthogonal_init

AUX_REQUIRED = "auxiliary channels required for inversion"


def leaky_relu(z, slope):
    if slope <= 0:
        raise ValueError("leaky-ReLU slope must be positive to stay invertible")
    z = np.asarray(z)
    return np.where(z >= 0, z, slope * z)


def leaky_relu_inverse(a, slope):
    if slope <= 0:
        raise ValueError("leaky-ReLU slope must be positive to stay invertible")
    a = np.asarray(a)
    return np.where(a >= 0, a, a / slope)


def activation_derivative(z, slope):
    """Diagonal of the leaky-ReLU Jacobian; the derivative at 0 is 1."""
    z = np.asarray(z)
    return np.where(z >= 0, 1.0, slope).astype(z.dtype if z.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------


class DenseLayer:
    """Square layer ``a = f(W x + b)`` forwarding the first ``forward_units``.

    ``in_shape`` is the per-sample shape of whatever feeds the layer; inputs
    are flattened on the way in and inverse/adjoint results are reshaped
    back to it.
    """

    kind = "dense"

    def __init__(self, W, b, slope=0.1, forward_units=None, in_shape=None):
        W = np.asarray(W)
        b = np.asarray(b)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ShapeError(f"dense weights must be square, got {W.shape}")
        n = W.shape[0]
        if b.shape != (n,):
            raise ShapeError(f"bias shape {b.shape} does not match width {n}")
        if not slope > 0:
            raise ValueError("slope must be positive")
        forward_units = n if forward_units is None else int(forward_units)
        if not 1 <= forward_units <= n:
            raise InvalidDimensionError(f"forward_units must lie in [1, {n}], got {forward_units}")
        in_shape = (n,) if in_shape is None else tuple(int(s) for s in in_shape)
        if int(np.prod(in_shape)) != n:
            raise ShapeError(f"input shape {in_shape} does not flatten to width {n}")
        self.W = W
        self.b = b
        self.slope = float(slope)
        self.forward_units = forward_units
        self.in_shape = in_shape
        self._inverse = None

    @property
    def width(self):
        return self.W.shape[0]

    @property
    def out_shape(self):
        return (self.forward_units,)

    @property
    def full_shape(self):
        return (self.width,)

    def params(self):
        return {"W": self.W, "b": self.b}

    def weight_matrix(self):
        return self.W

    def set_weight_matrix(self, m):
        self.W[...] = m
        self.invalidate()

    def invalidate(self):
        self._inverse = None

    def inverse_matrix(self, index=None):
        if self._inverse is None:
            self._inverse = invert_square(self.W, layer=index)
        return self._inverse

    def _flat(self, x):
        x = np.asarray(x)
        if x.shape[1:] != self.in_shape and x.shape[1:] != (self.width,):
            raise ShapeError(f"dense input shape {x.shape[1:]} does not match {self.in_shape}")
        return x.reshape(x.shape[0], self.width)

    def forward(self, x):
        return dense_forward(self, x)

    def inverse(self, a_full, x=None, index=None):
        return dense_inverse(self, a_full, index).reshape((-1,) + self.in_shape)

    def backward_input(self, delta_full, feedback=None):
        """Propagate a delta to the input: ``W^T delta`` or ``B delta``."""
        m = self.W.T if feedback is None else feedback
        return (delta_full @ m.T).reshape((-1,) + self.in_shape)

    def weight_grads(self, delta_full, x):
        """Batch-mean outer product ``delta x^T`` and mean ``delta``."""
        x = self._flat(x)
        n_batch = x.shape[0]
        return {"W": delta_full.T @ x / n_batch, "b": delta_full.sum(axis=0) / n_batch}

    def slice(self, a_full):
        return a_full[:, : self.forward_units]

    def embed(self, part, base):
        out = np.array(base, copy=True)
        out[:, : self.forward_units] = part
        return out


def dense_forward(layer, a_prev):
    """``z = W a_prev + b`` and ``a = leaky_relu(z)`` for a batch of inputs."""
    a_prev = np.asarray(a_prev)
    if a_prev.ndim == 1:
        z, a = dense_forward(layer, a_prev[None, :])
        return z[0], a[0]
    flat = a_prev.reshape(a_prev.shape[0], -1)
    if flat.shape[1] != layer.width:
        raise ShapeError(f"input width {flat.shape[1]} does not match layer width {layer.width}")
    z = flat @ layer.W.T + layer.b
    return z, leaky_relu(z, layer.slope)


def dense_inverse(layer, a, index=None):
    """Exact inverse ``W^-1 (f^-1(a) - b)`` of a dense layer.

    ``a`` must carry all units, auxiliaries included.
    """
    a = np.asarray(a)
    if a.ndim == 1:
        return dense_inverse(layer, a[None, :], index)[0]
    if a.shape[1] != layer.width:
        raise ShapeError(
            f"inverse needs all {layer.width} units, got {a.shape[1]}: {AUX_REQUIRED}"
        )
    w_inv = layer.inverse_matrix(index)
    return (leaky_relu_inverse(a, layer.slope) - layer.b) @ w_inv.T


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _validate_geometry(spatial, kernel_extents, stride):
    spatial = tuple(int(s) for s in spatial)
    kernel_extents = tuple(int(k) for k in kernel_extents)
    if len(spatial) != len(kernel_extents):
        raise ShapeError(f"input rank {len(spatial)} does not match kernel rank {len(kernel_extents)}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if stride > min(kernel_extents):
        raise ShapeError(f"stride {stride} exceeds kernel extent {min(kernel_extents)}; inputs would be skipped")
    for size, k in zip(spatial, kernel_extents):
        if k < 1 or size < k:
            raise ShapeError(f"kernel extent {k} does not fit input extent {size}")
        if (size - k) % stride:
            raise ShapeError(
                f"input extent {size} is not tiled exactly by kernel {k} with stride {stride}"
            )
    return spatial, kernel_extents


def coverage_map(input_shape, kernel_extents, stride):
    """Number of filter placements covering each input element.

    Works for any number of spatial axes; the count is the product of the
    per-axis counts.
    """
    spatial, kernel_extents = _validate_geometry(input_shape, kernel_extents, stride)
    counts = np.ones((), dtype=np.int64)
    for size, k in zip(spatial, kernel_extents):
        n_out = (size - k) // stride + 1
        axis = np.zeros(size, dtype=np.int64)
        for p in range(n_out):
            axis[p * stride : p * stride + k] += 1
        counts = np.multiply.outer(counts, axis)
    return counts


def invert_kernel(kernel, layer=None):
    """Reshape to square, transpose, invert, reshape back."""
    kernel = np.asarray(kernel)
    c_out = kernel.shape[0]
    m = kernel.reshape(c_out, -1)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(
            f"kernel {kernel.shape} does not reshape to a square matrix "
            f"(C_out={c_out}, C_in*H*W={m.shape[1]})"
        )
    return invert_square(m.T, layer=layer).reshape(kernel.shape)


def im2col(x, kh, kw, stride):
    """(B, C, H, W) -> (B, oh, ow, C*kh*kw) patches in (C, kh, kw) order."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    b, c, oh, ow = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * kh * kw)


def col2im(cols, in_shape, kh, kw, stride):
    """Adjoint of :func:`im2col`: overlapping patch entries are summed."""
    b, oh, ow, _ = cols.shape
    c, h, w = in_shape
    cols = cols.reshape(b, oh, ow, c, kh, kw)
    img = np.zeros((b, c, h, w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return img


def transposed_conv(y, kernel, in_shape, stride):
    """Transposed convolution of ``y`` (B, C_out, oh, ow) with ``kernel``."""
    c_out, _, kh, kw = kernel.shape
    m = kernel.reshape(c_out, -1)
    cols = y.transpose(0, 2, 3, 1) @ m
    return col2im(cols, in_shape, kh, kw, stride)


class ConvLayer:
    """Cross-correlation layer with ``C_out == C_in * kh * kw``.

    Each output pixel is an invertible linear function of its input patch,
    so the layer can be inverted patch by patch. The first
    ``forward_channels`` output channels feed the next layer; the rest are
    auxiliary and only used for inversion.
    """

    kind = "conv"

    def __init__(self, kernel, bias, stride=1, slope=0.1, forward_channels=None, in_shape=None):
        kernel = np.asarray(kernel)
        bias = np.asarray(bias)
        if kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be (C_out, C_in, H, W), got {kernel.shape}")
        c_out, c_in, kh, kw = kernel.shape
        if c_out != c_in * kh * kw:
            raise ShapeError(
                f"invertibility constraint violated: C_out={c_out} != C_in*H*W={c_in * kh * kw}"
            )
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} does not match C_out={c_out}")
        if not slope > 0:
            raise ValueError("slope must be positive")
        forward_channels = c_out if forward_channels is None else int(forward_channels)
        if not 1 <= forward_channels <= c_out:
            raise InvalidDimensionError(f"forward_channels must lie in [1, {c_out}], got {forward_channels}")
        if in_shape is None:
            raise ShapeError("conv layers need an input shape (C_in, H, W)")
        in_shape = tuple(int(s) for s in in_shape)
        if len(in_shape) != 3 or in_shape[0] != c_in:
            raise ShapeError(f"input shape {in_shape} does not have {c_in} channels")
        _validate_geometry(in_shape[1:], (kh, kw), stride)
        self.kernel = kernel
        self.bias = bias
        self.stride = int(stride)
        self.slope = float(slope)
        self.forward_channels = forward_channels
        self.in_shape = in_shape
        self.coverage = coverage_map(in_shape[1:], (kh, kw), stride)
        self.correction = "subtract"
        self._inverse = None

    @property
    def kernel_extents(self):
        return self.kernel.shape[2:]

    @property
    def out_spatial(self):
        _, h, w = self.in_shape
        kh, kw = self.kernel_extents
        return ((h - kh) // self.stride + 1, (w - kw) // self.stride + 1)

    @property
    def full_shape(self):
        return (self.kernel.shape[0],) + self.out_spatial

    @property
    def out_shape(self):
        return (self.forward_channels,) + self.out_spatial

    def params(self):
        return {"W": self.kernel, "b": self.bias}

    def weight_matrix(self):
        return self.kernel.reshape(self.kernel.shape[0], -1)

    def set_weight_matrix(self, m):
        self.kernel[...] = np.asarray(m).reshape(self.kernel.shape)
        self.invalidate()

    def invalidate(self):
        self._inverse = None

    def inverted_kernel(self, index=None):
        if self._inverse is None:
            self._inverse = invert_kernel(self.kernel, layer=index)
        return self._inverse

    def forward(self, x):
        z, a_full, _ = conv_forward(self, x)
        return z, a_full

    def inverse(self, a_full, x, index=None, correction=None):
        return conv_inverse(self, a_full, x, self.coverage, index, correction or self.correction)

    def backward_input(self, delta_full, feedback=None):
        """Adjoint of the convolution w.r.t. its input.

        ``feedback`` optionally replaces the kernel's square matrix (FA).
        """
        kernel = self.kernel if feedback is None else np.asarray(feedback).T.reshape(self.kernel.shape)
        return transposed_conv(delta_full, kernel, self.in_shape, self.stride)

    def weight_grads(self, delta_full, x):
        kh, kw = self.kernel_extents
        cols = im2col(x, kh, kw, self.stride)
        d = delta_full.transpose(0, 2, 3, 1)
        n_batch = x.shape[0]
        gw = np.einsum("bijo,bijp->op", d, cols) / n_batch
        return {"W": gw.reshape(self.kernel.shape), "b": d.sum(axis=(0, 1, 2)) / n_batch}

    def slice(self, a_full):
        return a_full[:, : self.forward_channels]

    def embed(self, part, base):
        out = np.array(base, copy=True)
        out[:, : self.forward_channels] = part
        return out


def conv_forward(layer, x):
    """Strided, unpadded cross-correlation plus bias, then leaky-ReLU.

    Returns ``(z_full, a_full, a_fwd)``.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        z, a, f = conv_forward(layer, x[None])
        return z[0], a[0], f[0]
    if x.ndim != 4 or x.shape[1:] != layer.in_shape:
        raise ShapeError(f"conv input shape {x.shape[1:]} does not match {layer.in_shape}")
    kh, kw = layer.kernel_extents
    cols = im2col(x, kh, kw, layer.stride)
    z = cols @ layer.weight_matrix().T + layer.bias
    z = np.ascontiguousarray(z.transpose(0, 3, 1, 2))
    a_full = leaky_relu(z, layer.slope)
    return z, a_full, layer.slice(a_full)


def conv_inverse(layer, a_full, x, coverage=None, index=None, correction="subtract"):
    """Reconstruct a conv layer's input from its full output.

    The activation and bias are undone, the result is run through a
    transposed convolution with the inverted kernel, and the overcounted
    forward signal ``x * (coverage - 1)`` is removed. ``correction="divide"``
    instead divides the reconstruction by the coverage, which also divides
    any feedback signal passing through overlapping pixels.
    """
    a_full = np.asarray(a_full)
    squeeze = a_full.ndim == 3
    if squeeze:
        a_full = a_full[None]
        x = np.asarray(x)[None]
    c_out = layer.kernel.shape[0]
    if a_full.shape[1] != c_out:
        raise ShapeError(f"got {a_full.shape[1]} of {c_out} output channels: {AUX_REQUIRED}")
    if a_full.shape[2:] != layer.out_spatial:
        raise ShapeError(f"output spatial shape {a_full.shape[2:]} does not match {layer.out_spatial}")
    coverage = layer.coverage if coverage is None else np.asarray(coverage)
    y = leaky_relu_inverse(a_full, layer.slope) - layer.bias[None, :, None, None]
    x_hat = transposed_conv(y, layer.inverted_kernel(index), layer.in_shape, layer.stride)
    if correction == "subtract":
        x_hat -= x * (coverage - 1)
    elif correction == "divide":
        x_hat /= coverage
    else:
        raise ValueError(f"unknown overlap correction {correction!r}")
    return x_hat[0] if squeeze else x_hat


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class ForwardCache:
    """Per-layer quantities retained from one forward pass."""

    def __init__(self, x, zs, a_full, a_fwd, version):
        self.x = x
        self.zs = zs
        self.a_full = a_full
        self.a_fwd = a_fwd
        self.version = version

    def __len__(self):
        return len(self.zs)

    def layer_input(self, l):
        return self.x if l == 0 else self.a_fwd[l - 1]

    @property
    def logits(self):
        return self.a_fwd[-1]


class Network:
    """A stack of invertible layers; the last layer's forwarded units are logits."""

    def __init__(self, layers, input_shape):
        if not layers:
            raise InvalidDimensionError("a network needs at least one layer")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.version = 0

    def __len__(self):
        return len(self.layers)

    @property
    def n_classes(self):
        return self.layers[-1].out_shape[0]

    @property
    def dtype(self):
        return self.layers[0].params()["W"].dtype

    def param_count(self):
        return sum(p.size for layer in self.layers for p in layer.params().values())

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            x = x.reshape((x.shape[0],) + self.input_shape)
        zs, fulls, fwds = [], [], []
        h = x
        for i, layer in enumerate(self.layers):
            z, a_full = layer.forward(h)
            check_finite(a_full, "activations", layer=i)
            zs.append(z)
            fulls.append(a_full)
            h = layer.slice(a_full)
            fwds.append(h)
        return ForwardCache(x, zs, fulls, fwds, self.version)

    def predict(self, x):
        return self.forward(x).logits

    def mark_updated(self):
        """Record that parameters changed; drops cached inverses."""
        self.version += 1
        for layer in self.layers:
            layer.invalidate()

    def invert_layer(self, l, a_full, x):
        try:
            return self.layers[l].inverse(a_full, x, index=l)
        except SingularMatrixError as exc:
            if exc.layer is None:
                raise SingularMatrixError(str(exc), layer=l) from None
            raise

    def params(self):
        return [layer.params() for layer in self.layers]

    def set_params(self, new_params):
        """Copy ``new_params`` into the layers in place and bump the version."""
        if len(new_params) != len(self.layers):
            raise ShapeError("parameter list depth does not match the network")
        for l, (layer, new) in enumerate(zip(self.layers, new_params)):
            for name, p in layer.params().items():
                if new[name].shape != p.shape:
                    raise ShapeError(f"layer {l} {name}: shape {new[name].shape} != {p.shape}")
                p[...] = new[name]
        self.mark_updated()


def build_network(input_shape, descriptors, slope=0.1, seed=0, dtype=np.float64):
    """Build an orthogonally initialised network from layer descriptors.

    ``descriptors`` holds ``("dense", units)`` or
    ``("conv", kernel, stride, out_channels, forward_channels)`` tuples.
    A dense layer is square in its flattened input width and forwards
    ``units`` of it; biases start at zero. Layer ``l`` is seeded with
    ``[seed, l]``.
    """
    shape = tuple(int(s) for s in input_shape)
    layers = []
    for l, desc in enumerate(descriptors):
        kind = desc[0]
        if kind == "dense":
            n = int(np.prod(shape))
            units = int(desc[1])
            if units > n:
                raise ShapeError(
                    f"layer {l}: dense layer cannot forward {units} units from a {n}-wide input "
                    "(square layers only narrow)"
                )
            W = orthogonal_init(n, [int(seed), l], dtype=dtype)
            layer = DenseLayer(W, np.zeros(n, dtype=dtype), slope, units, in_shape=shape)
        elif kind == "conv":
            k, stride, c_out, fwd = (int(v) for v in desc[1:5])
            if len(shape) != 3:
                raise ShapeError(f"layer {l}: conv layer needs a (C, H, W) input, got {shape}")
            c_in = shape[0]
            if c_out != c_in * k * k:
                raise ShapeError(
                    f"layer {l}: invertibility constraint violated: C_out={c_out} != C_in*H*W={c_in * k * k}"
                )
            m = orthogonal_init(c_out, [int(seed), l], dtype=dtype)
            layer = ConvLayer(
                m.reshape(c_out, c_in, k, k), np.zeros(c_out, dtype=dtype), stride, slope, fwd, in_shape=shape
            )
        else:
            raise ValueError(f"layer {l}: unknown layer kind {kind!r}")
        layers.append(layer)
        shape = layer.out_shape
    return Network(layers, input_shape)
