"""Layer kinds with explicit forward/backward contracts.

Every layer exposes ``forward(x, train=True, rng=None) -> (out, cache)`` and
``backward(cache, grad_out) -> (grad_in, grads)`` where ``grads`` maps the
layer's own parameter names to gradient arrays.  Inputs carry a leading
batch axis; ``output_shape`` works on per-instance shapes.

Weights use the LeCun-uniform fan-in scheme ``U(-sqrt(3/fan_in),
sqrt(3/fan_in))``; biases and batchnorm shifts start at zero, batchnorm
scales at one.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from ..numkit import SeededRng
from . import conv as convk


def fan_in_uniform(rng: SeededRng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(shape, -bound, bound)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=True, rng=None):
        raise NotImplementedError

    def backward(self, cache, grad_out):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def _check_grad(self, cache_shape, grad_out):
        if tuple(grad_out.shape) != tuple(cache_shape):
            raise ValueError(f"{self.kind}: grad shape {grad_out.shape} != output shape {cache_shape}")

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: SeededRng):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params["weight"] = fan_in_uniform(rng, (n_in, n_out), n_in)
        self.params["bias"] = np.zeros(n_out)

    def forward(self, x, train=True, rng=None):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"dense expects (m, {self.n_in}), got {x.shape}")
        out = x @ self.params["weight"] + self.params["bias"]
        return out, x

    def backward(self, cache, grad_out):
        x = cache
        self._check_grad((x.shape[0], self.n_out), grad_out)
        grads = {"weight": x.T @ grad_out, "bias": grad_out.sum(axis=0)}
        return grad_out @ self.params["weight"].T, grads

    def output_shape(self, in_shape):
        return (self.n_out,)

    def __repr__(self):
        return f"Dense({self.n_in}, {self.n_out})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in, c_out, kernel, rng: SeededRng, stride=1, padding=0):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = c_in * kernel * kernel
        self.params["weight"] = fan_in_uniform(rng, (c_out, c_in, kernel, kernel), fan_in)
        self.params["bias"] = np.zeros(c_out)

    def forward(self, x, train=True, rng=None):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"conv2d expects (m, {self.c_in}, H, W), got {x.shape}")
        out, win = convk.conv2d(x, self.params["weight"], self.stride, self.padding)
        out += self.params["bias"][None, :, None, None]
        return out, (win, x.shape, out.shape)

    def backward(self, cache, grad_out):
        win, x_shape, out_shape = cache
        self._check_grad(out_shape, grad_out)
        grads = {
            "weight": convk.conv2d_grad_weight(win, grad_out),
            "bias": grad_out.sum(axis=(0, 2, 3)),
        }
        grad_in = convk.conv2d_grad_input(grad_out, self.params["weight"], x_shape[2:], self.stride, self.padding)
        return grad_in, grads

    def output_shape(self, in_shape):
        c, h, w = in_shape
        size = convk.conv_output_size
        return (self.c_out, size(h, self.kernel, self.stride, self.padding),
                size(w, self.kernel, self.stride, self.padding))

    def __repr__(self):
        return f"Conv2d({self.c_in}, {self.c_out}, k={self.kernel}, s={self.stride}, p={self.padding})"


class Deconv2d(Layer):
    """Transposed convolution; weight layout ``(c_in, c_out, k, k)``.

    With equal hyperparameters this is exactly the adjoint of
    :class:`Conv2d` holding the same weight tensor.
    """

    kind = "deconv2d"

    def __init__(self, c_in, c_out, kernel, rng: SeededRng, stride=1, padding=0):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = c_in * kernel * kernel // (stride * stride)
        self.params["weight"] = fan_in_uniform(rng, (c_in, c_out, kernel, kernel), max(fan_in, 1))
        self.params["bias"] = np.zeros(c_out)

    def forward(self, x, train=True, rng=None):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"deconv2d expects (m, {self.c_in}, H, W), got {x.shape}")
        _, ho, wo = self.output_shape(x.shape[1:])
        out = convk.conv2d_grad_input(x, self.params["weight"], (ho, wo), self.stride, self.padding)
        out += self.params["bias"][None, :, None, None]
        return out, x

    def backward(self, cache, grad_out):
        x = cache
        self._check_grad((x.shape[0],) + self.output_shape(x.shape[1:]), grad_out)
        grad_in, win = convk.conv2d(grad_out, self.params["weight"], self.stride, self.padding)
        grads = {
            "weight": convk.conv2d_grad_weight(win, x),
            "bias": grad_out.sum(axis=(0, 2, 3)),
        }
        return grad_in, grads

    def output_shape(self, in_shape):
        c, h, w = in_shape
        size = convk.deconv_output_size
        return (self.c_out, size(h, self.kernel, self.stride, self.padding),
                size(w, self.kernel, self.stride, self.padding))

    def __repr__(self):
        return f"Deconv2d({self.c_in}, {self.c_out}, k={self.kernel}, s={self.stride}, p={self.padding})"


class BatchNorm(Layer):
    """Per-feature (2-D input) or per-channel (4-D input) batch normalization.

    Running statistics are updated as ``r <- momentum * r + (1 - momentum) * batch``
    with the biased batch variance.
    """

    kind = "batchnorm"

    def __init__(self, n_features: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.n_features = n_features
        self.eps, self.momentum = eps, momentum
        self.params["scale"] = np.ones(n_features)
        self.params["shift"] = np.zeros(n_features)
        self.buffers["running_mean"] = np.zeros(n_features)
        self.buffers["running_var"] = np.ones(n_features)

    def _axes(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ValueError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")

    def forward(self, x, train=True, rng=None):
        axes, bshape = self._axes(x)
        if x.shape[1] != self.n_features:
            raise ValueError(f"batchnorm expects {self.n_features} features, got {x.shape}")
        scale = self.params["scale"].reshape(bshape)
        shift = self.params["shift"].reshape(bshape)
        if train:
            count = x.size // x.shape[1]
            if x.shape[0] < 2:
                raise ValueError("batchnorm in train mode needs at least 2 instances")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            mom = self.momentum
            self.buffers["running_mean"] = mom * self.buffers["running_mean"] + (1 - mom) * mean
            self.buffers["running_var"] = mom * self.buffers["running_var"] + (1 - mom) * var
        else:
            count = 0
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = scale * xhat + shift
        return out, (xhat, inv_std, count, axes, bshape)

    def backward(self, cache, grad_out):
        xhat, inv_std, count, axes, bshape = cache
        self._check_grad(xhat.shape, grad_out)
        grads = {"scale": (grad_out * xhat).sum(axis=axes), "shift": grad_out.sum(axis=axes)}
        dxhat = grad_out * self.params["scale"].reshape(bshape)
        if count == 0:
            return dxhat * inv_std.reshape(bshape), grads
        sum_d = dxhat.sum(axis=axes).reshape(bshape)
        sum_dx = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        grad_in = inv_std.reshape(bshape) / count * (count * dxhat - sum_d - xhat * sum_dx)
        return grad_in, grads

    def __repr__(self):
        return f"BatchNorm({self.n_features})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, grad_out):
        self._check_grad(cache.shape, grad_out)
        return grad_out * cache, {}


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=True, rng=None):
        factor = np.where(x > 0, 1.0, self.slope)
        return x * factor, factor

    def backward(self, cache, grad_out):
        self._check_grad(cache.shape, grad_out)
        return grad_out * cache, {}

    def __repr__(self):
        return f"LeakyReLU({self.slope})"


class Softplus(Layer):
    kind = "softplus"

    def forward(self, x, train=True, rng=None):
        return np.logaddexp(0.0, x), x

    def backward(self, cache, grad_out):
        self._check_grad(cache.shape, grad_out)
        return grad_out * expit(cache), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=True, rng=None):
        out = expit(x)
        return out, out

    def backward(self, cache, grad_out):
        self._check_grad(cache.shape, grad_out)
        return grad_out * cache * (1.0 - cache), {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=True, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out):
        return grad_out.reshape(cache), {}

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x, train=True, rng=None):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, cache, grad_out):
        return grad_out.reshape(cache), {}

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def __repr__(self):
        return f"Reshape{self.shape}"


class MaxPool2d(Layer):
    """Non-overlapping-by-default max pooling; remainder rows/cols are dropped."""

    kind = "maxpool2d"

    def __init__(self, kernel: int = 2, stride: int | None = None):
        super().__init__()
        self.kernel = kernel
        self.stride = stride or kernel

    def forward(self, x, train=True, rng=None):
        win = convk._windows(x, self.kernel, self.stride, 0)
        m, c, ho, wo = win.shape[:4]
        flat = win.reshape(m, c, ho, wo, -1)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, cache, grad_out):
        arg, x_shape = cache
        self._check_grad(arg.shape, grad_out)
        k, s = self.kernel, self.stride
        grad_in = np.zeros(x_shape)
        ho, wo = arg.shape[2:]
        for i in range(k):
            for j in range(k):
                hit = arg == (i * k + j)
                grad_in[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += grad_out * hit
        return grad_in, {}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    def __repr__(self):
        return f"MaxPool2d({self.kernel}, s={self.stride})"
