"""
Dense tensors and the bilinear operations that get offloaded.

Tensors are plain float64 numpy arrays. Everything returned from here is
read-only, so values can be shared between the trusted and untrusted
contexts (and between threads) without copying.

"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tensors.exceptions import ShapeError, ParameterError


def freeze(array):
    array.setflags(write=False)
    return array


def as_tensor(value):
    """
    Returns a read-only float64 copy of value. Rejects NaN and infinities.

    """
    array = np.array(value, dtype=np.float64)
    if array.size and not np.all(np.isfinite(array)):
        raise ParameterError("Tensor contains NaN or infinite values.")
    return freeze(array)


def check_finite(array):
    if array.size and not np.all(np.isfinite(array)):
        raise ParameterError("Operation produced NaN or infinite values.")
    return freeze(array)


def relative_error(actual, expected):
    """
    Max-abs error of actual against expected, relative to the largest entry
    of expected. Falls back to the absolute error when expected is all zero.

    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError("Cannot compare tensors of shape %s and %s." % (actual.shape, expected.shape))
    error = float(np.max(np.abs(actual - expected))) if actual.size else 0.0
    scale = float(np.max(np.abs(expected))) if expected.size else 0.0
    return error / scale if scale > 0 else error


def matmul(w, x):
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 2:
        raise ShapeError("matmul expects two matrices, got ranks %d and %d." % (w.ndim, x.ndim))
    if w.shape[1] != x.shape[0]:
        raise ShapeError("Inner dimensions do not agree: %s x %s." % (w.shape, x.shape))
    return check_finite(w @ x)


def conv_output_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError("Kernel of size %d does not fit padded input of size %d." % (kernel, size + 2 * padding))
    if span % stride:
        raise ShapeError("Output size (%d + 2*%d - %d)/%d + 1 is not integral." % (size, padding, kernel, stride))
    return span // stride + 1


def _check_conv_args(stride, padding):
    if stride < 1:
        raise ParameterError("Stride must be at least 1.")
    if padding < 0:
        raise ParameterError("Padding must not be negative.")


def _windows(x, kh, kw, stride, padding):
    # (ci, h', w', kh, kw) view over the padded input
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]


def conv2d(w, x, stride=1, padding=0):
    """
    2-D cross-correlation (no kernel flip) of a single ci x h x w input with
    a co x ci x kh x kw kernel.

    """
    _check_conv_args(stride, padding)
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 4 or x.ndim != 3:
        raise ShapeError("conv2d expects a rank-4 kernel and a rank-3 input.")
    co, ci, kh, kw = w.shape
    if x.shape[0] != ci:
        raise ShapeError("Kernel expects %d input channels, input has %d." % (ci, x.shape[0]))
    conv_output_size(x.shape[1], kh, stride, padding)
    conv_output_size(x.shape[2], kw, stride, padding)
    return check_finite(np.einsum('oikl,ipqkl->opq', w, _windows(x, kh, kw, stride, padding)))


def conv2d_weight_grad(delta, x, kernel_size, stride=1, padding=0):
    """
    Gradient of conv2d with respect to the kernel: correlates the output
    gradient with the input windows.

    """
    _check_conv_args(stride, padding)
    delta = np.asarray(delta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    kh, kw = kernel_size
    windows = _windows(x, kh, kw, stride, padding)
    if delta.ndim != 3 or delta.shape[1:] != windows.shape[1:3]:
        raise ShapeError("Output gradient of shape %s does not match convolution output %s." % (delta.shape, windows.shape[1:3]))
    return check_finite(np.einsum('opq,ipqkl->oikl', delta, windows))


def conv2d_input_grad(w, delta, x_shape, stride=1, padding=0):
    """
    Gradient of conv2d with respect to its input (a transposed convolution).

    """
    _check_conv_args(stride, padding)
    w = np.asarray(w, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    co, ci, kh, kw = w.shape
    _, h, width = x_shape
    out_h = conv_output_size(h, kh, stride, padding)
    out_w = conv_output_size(width, kw, stride, padding)
    if delta.shape != (co, out_h, out_w):
        raise ShapeError("Output gradient of shape %s does not match convolution output %s." % (delta.shape, (co, out_h, out_w)))
    padded = np.zeros((ci, h + 2 * padding, width + 2 * padding))
    for k in range(kh):
        for l in range(kw):
            padded[:, k:k + stride * out_h:stride, l:l + stride * out_w:stride] += np.einsum('oi,opq->ipq', w[:, :, k, l], delta)
    return check_finite(padded[:, padding:padding + h, padding:padding + width])


@dataclass(frozen=True)
class BilinearOp:
    """
    One of the two bilinear operations <W, x> that run on the untrusted side:
    a matrix product or a 2-D convolution.

    """
    kind: str = 'matmul'
    stride: int = 1
    padding: int = 0

    MATMUL = 'matmul'
    CONV2D = 'conv2d'

    def __post_init__(self):
        if self.kind not in (self.MATMUL, self.CONV2D):
            raise ParameterError("Unknown bilinear operation '%s'." % self.kind)
        _check_conv_args(self.stride, self.padding)

    @classmethod
    def matmul(cls):
        return cls(cls.MATMUL)

    @classmethod
    def conv2d(cls, stride=1, padding=0):
        return cls(cls.CONV2D, stride, padding)

    def apply(self, w, x):
        if self.kind == self.MATMUL:
            return matmul(w, x)
        return conv2d(w, x, self.stride, self.padding)

    def weight_grad(self, delta, x):
        # Matrix layers use the outer-product form delta . x^T
        if self.kind == self.MATMUL:
            return matmul(delta, np.asarray(x).T)
        delta = np.asarray(delta)
        x = np.asarray(x)
        if delta.ndim != 3 or x.ndim != 3:
            raise ShapeError("Convolution gradients need rank-3 tensors.")
        # The output size pins the kernel size down, since it must be integral
        kernel_size = tuple(
            x.shape[axis] + 2 * self.padding - self.stride * (delta.shape[axis] - 1)
            for axis in (1, 2)
        )
        return conv2d_weight_grad(delta, x, kernel_size, self.stride, self.padding)

    def input_grad(self, w, delta, x_shape):
        if self.kind == self.MATMUL:
            return matmul(np.asarray(w).T, delta)
        return conv2d_input_grad(w, delta, x_shape, self.stride, self.padding)


def relu(x):
    return freeze(np.maximum(np.asarray(x, dtype=np.float64), 0.0))


def relu_grad(pre_activation, delta):
    return freeze(np.where(np.asarray(pre_activation) > 0, delta, 0.0))


def max_pool2d(x, size, stride):
    """
    Max pooling over a c x h x w tensor. Returns the pooled tensor and the
    flat window index of each maximum (ties go to the first index).

    """
    if size < 1 or stride < 1:
        raise ParameterError("Pool size and stride must be at least 1.")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] < size or x.shape[2] < size:
        raise ShapeError("Cannot pool input of shape %s with window %d." % (x.shape, size))
    windows = sliding_window_view(x, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    flat = windows.reshape(windows.shape[:3] + (size * size,))
    argmax = np.argmax(flat, axis=-1)
    pooled = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return freeze(pooled), freeze(argmax)


def max_pool2d_grad(delta, argmax, x_shape, size, stride):
    grad = np.zeros(x_shape)
    channels, out_h, out_w = argmax.shape
    rows, cols = np.divmod(argmax, size)
    for c in range(channels):
        for p in range(out_h):
            for q in range(out_w):
                grad[c, p * stride + rows[c, p, q], q * stride + cols[c, p, q]] += delta[c, p, q]
    return freeze(grad)
