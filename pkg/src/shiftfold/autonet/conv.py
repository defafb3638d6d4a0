"""im2col-style convolution kernels on NCHW float64 arrays."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _windows(x, kernel, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, weight, stride=1, padding=0):
    """Cross-correlation ``(m,C,H,W) * (F,C,k,k) -> (m,F,Ho,Wo)``; returns (out, windows)."""
    kernel = weight.shape[-1]
    win = _windows(x, kernel, stride, padding)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), win


def conv2d_grad_weight(win, grad):
    return np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_grad_input(grad, weight, in_hw, stride=1, padding=0):
    """Adjoint of :func:`conv2d` with respect to its input (col2im scatter-add)."""
    m, _, ho, wo = grad.shape
    channels, kernel = weight.shape[1], weight.shape[-1]
    h, w = in_hw
    cols = np.tensordot(grad, weight, axes=([1], [0]))  # (m, Ho, Wo, C, k, k)
    hp = max(h + 2 * padding, (ho - 1) * stride + kernel)
    wp = max(w + 2 * padding, (wo - 1) * stride + kernel)
    out = np.zeros((m, channels, hp, wp))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + hspan:stride, j:j + wspan:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out[:, :, padding:padding + h, padding:padding + w])
