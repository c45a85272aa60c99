"""Forward and backward passes for every layer in a feedback unit.

A feedback unit is Conv -> BatchNorm -> ReLU -> RevReLU. The network head
adds global average pooling, a sigmoid and a squared loss, and a frozen
transposed convolution upsamples the class maps.

All functions are dtype-preserving: float32 arrays in, float32 out; float64
in, float64 out.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError


@dataclass
class ConvParams:
    weights: np.ndarray  # O x I x K x K
    bias: np.ndarray  # O
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"kernel must be O x I x K x K, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad stride/padding {self.stride}/{self.padding}")

    @property
    def kernel_size(self):
        return self.weights.shape[2]

    def output_size(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {k}, padding {p}")
        return ho, wo


@dataclass
class BatchNormParams:
    gamma_scale: np.ndarray
    beta_shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def identity(cls, channels, dtype=np.float32):
        return cls(
            gamma_scale=np.ones(channels, dtype),
            beta_shift=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


# -- convolution ------------------------------------------------------------


def im2col(x, k, stride, padding):
    """Unfold ``x`` into rows of receptive fields, shape (N*Ho*Wo, C*K*K)."""
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def col2im(cols, x_shape, k, stride, padding, ho, wo):
    """Scatter-add rows of receptive fields back onto an input-shaped array."""
    n, c, h, w = x_shape
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _check_input(x, params):
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W input, got {x.shape}")
    if x.shape[1] != params.weights.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels, kernel expects {params.weights.shape[1]}"
        )


def conv2d_forward(x, params, return_cols=False):
    """Cross-correlation with bias and symmetric zero padding."""
    _check_input(x, params)
    params.output_size(*x.shape[2:])
    o = params.weights.shape[0]
    cols, ho, wo = im2col(x, params.kernel_size, params.stride, params.padding)
    out = cols @ params.weights.reshape(o, -1).T + params.bias
    out = np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2))
    if return_cols:
        return out, cols
    return out


def conv2d_backward(x, params, grad_output, cols=None):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    _check_input(x, params)
    n = x.shape[0]
    o = params.weights.shape[0]
    ho, wo = params.output_size(*x.shape[2:])
    if grad_output.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_output {grad_output.shape} != forward output {(n, o, ho, wo)}")
    k = params.kernel_size
    if cols is None:
        cols, _, _ = im2col(x, k, params.stride, params.padding)
    g = grad_output.transpose(0, 2, 3, 1).reshape(-1, o)
    w2 = params.weights.reshape(o, -1)
    grad_w = (g.T @ cols).reshape(params.weights.shape)
    grad_b = g.sum(axis=0)
    grad_x = col2im(g @ w2, x.shape, k, params.stride, params.padding, ho, wo)
    return grad_x, grad_w, grad_b


def conv_transpose2d_forward(x, params):
    """Adjoint of :func:`conv2d_forward` (without its bias) for the same params.

    ``x`` has O channels; the output has I channels and spatial size
    ``(H - 1) * stride - 2 * padding + K``. ``params.bias`` is not used.
    """
    if x.ndim != 4 or x.shape[1] != params.weights.shape[0]:
        raise ShapeError(
            f"transposed conv expects {params.weights.shape[0]} input channels, got {x.shape}"
        )
    n, o, h, w = x.shape
    k, s, p = params.kernel_size, params.stride, params.padding
    ho, wo = (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed conv output would be {ho}x{wo}")
    i = params.weights.shape[1]
    g = x.transpose(0, 2, 3, 1).reshape(-1, o)
    cols = g @ params.weights.reshape(o, -1)
    return col2im(cols, (n, i, ho, wo), k, s, p, h, w)


def bilinear_kernel(factor, centered=False):
    """Separable bilinear upsampling kernel for an integer ``factor``.

    The default size ``2f - f % 2`` suits maps whose cells sit at half-pixel
    offsets (pooling-style alignment). ``centered=True`` always gives the odd
    size ``2f - 1`` with its peak on a pixel, for cells centred on ``f * i``.
    """
    size = 2 * factor - 1 if centered else 2 * factor - factor % 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size)
    filt = 1 - np.abs(og - center) / factor
    return np.outer(filt, filt)


def bilinear_upsampler(channels, factor, dtype=np.float32, centered=False):
    """Channel-wise transposed-conv params that upsample by ``factor``."""
    kern = bilinear_kernel(factor, centered)
    k = kern.shape[0]
    w = np.zeros((channels, channels, k, k), dtype=dtype)
    for c in range(channels):
        w[c, c] = kern
    pad = factor - 1 if centered else (k - factor) // 2
    return ConvParams(w, np.zeros(channels, dtype), stride=factor, padding=pad)


# -- batch normalization ----------------------------------------------------


def batchnorm_forward(x, params, mode="train"):
    """Per-channel normalization over N, H, W.

    In ``"train"`` mode batch statistics are used and the running statistics
    are updated in place. Returns ``(output, cache)``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    gamma = params.gamma_scale.reshape(1, -1, 1, 1)
    beta = params.beta_shift.reshape(1, -1, 1, 1)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = params.momentum
        rm = params.running_mean
        rv = params.running_var
        params.running_mean = ((1 - m) * rm + m * mean).astype(rm.dtype)
        params.running_var = ((1 - m) * rv + m * var).astype(rv.dtype)
    else:
        mean = params.running_mean
        var = params.running_var
    inv_std = (1.0 / np.sqrt(var + params.epsilon)).astype(x.dtype)
    x_hat = (x - mean.reshape(1, -1, 1, 1).astype(x.dtype)) * inv_std.reshape(1, -1, 1, 1)
    out = gamma * x_hat + beta
    return out, (mode, x_hat, inv_std)


def batchnorm_backward(x, params, grad_output, cache):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    mode, x_hat, inv_std = cache
    if grad_output.shape != x.shape:
        raise ShapeError(f"grad_output {grad_output.shape} != input {x.shape}")
    g = grad_output
    grad_gamma = (g * x_hat).sum(axis=(0, 2, 3))
    grad_beta = g.sum(axis=(0, 2, 3))
    scale = (params.gamma_scale * inv_std).reshape(1, -1, 1, 1)
    if mode == "infer":
        return g * scale, grad_gamma, grad_beta
    m = x.shape[0] * x.shape[2] * x.shape[3]
    grad_x = scale * (
        g
        - grad_beta.reshape(1, -1, 1, 1) / m
        - x_hat * grad_gamma.reshape(1, -1, 1, 1) / m
    )
    return grad_x, grad_gamma, grad_beta


# -- activations and gating -------------------------------------------------


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_output):
    return np.where(x > 0, grad_output, 0).astype(grad_output.dtype)


def revrelu_compute_gates(grad_at_activation, gamma=0.0):
    """Binary gate mask: open exactly where the target-score gradient exceeds ``gamma``."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    g = np.asarray(grad_at_activation)
    return (g > gamma).astype(g.dtype)


def revrelu_apply(relu_output, gates):
    if relu_output.shape != gates.shape:
        raise ShapeError(f"gates {gates.shape} do not match activation {relu_output.shape}")
    return relu_output * gates


# -- head -------------------------------------------------------------------


def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W input, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape, grad_output):
    n, c, h, w = x_shape
    g = grad_output.reshape(n, c, 1, 1) / (h * w)
    return np.broadcast_to(g, x_shape).astype(grad_output.dtype)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, grad_output):
    """Gradient through a sigmoid given its output ``y``."""
    return grad_output * y * (1 - y)


def squared_loss(pred, target):
    """Half sum of squared errors and its gradient with respect to ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return 0.5 * float(np.sum(diff.astype(np.float64) ** 2)), diff
