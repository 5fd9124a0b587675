"""Dense NCHW tensor kernels with explicit forward and backward passes.

Tensors are plain rank-4 numpy arrays in (batch, channel, height, width)
order.  Every kernel keeps the dtype of its inputs, so the same code runs in
float32 for training and float64 for gradient checks.

The fast convolution path is im2col + matrix multiply; ``conv2d_naive`` and
``convtranspose2d_naive`` are direct nested-loop references kept alongside
it as oracles.
"""
from dataclasses import dataclass, field

import numpy as np

from blockcs import _backend


class ShapeError(ValueError):
    """Raised when tensor extents disagree with each other or with a ConvSpec."""


def _check_rank4(name, t):
    if t.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {t.shape}")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    has_bias: bool = True

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride_h", "stride_w"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ShapeError(f"ConvSpec.{name} must be a positive integer, got {value!r}")
        for name in ("pad_h", "pad_w"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ShapeError(f"ConvSpec.{name} must be a non-negative integer, got {value!r}")

    def output_shape(self, h, w):
        """Output extents of the plain convolution on an ``h x w`` input."""
        out_h = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        out_w = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if out_h < 1:
            raise ShapeError(
                f"height: input {h} with kernel {self.kernel_h}, pad {self.pad_h} "
                f"gives non-positive output extent {out_h}"
            )
        if out_w < 1:
            raise ShapeError(
                f"width: input {w} with kernel {self.kernel_w}, pad {self.pad_w} "
                f"gives non-positive output extent {out_w}"
            )
        return out_h, out_w

    def transpose_output_shape(self, h, w):
        out_h = (h - 1) * self.stride_h + self.kernel_h - 2 * self.pad_h
        out_w = (w - 1) * self.stride_w + self.kernel_w - 2 * self.pad_w
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"transposed convolution of {h}x{w} gives empty output {out_h}x{out_w}")
        return out_h, out_w

    @property
    def _geometry(self):
        return self.kernel_h, self.kernel_w, self.stride_h, self.stride_w, self.pad_h, self.pad_w


def _check_bias(bias, spec, channels):
    if spec.has_bias and bias is None:
        raise ShapeError("bias: ConvSpec.has_bias is set but no bias was given")
    if not spec.has_bias and bias is not None:
        raise ShapeError("bias: given but ConvSpec.has_bias is False")
    if bias is not None and bias.shape != (channels,):
        raise ShapeError(f"bias: expected shape ({channels},), got {bias.shape}")


def _check_conv(x, weights, spec):
    _check_rank4("input", x)
    _check_rank4("weights", weights)
    expected = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != expected:
        raise ShapeError(f"weights: expected (C_out, C_in, kH, kW) = {expected}, got {weights.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input channels: expected {spec.in_channels}, got {x.shape[1]}")


def _check_convtranspose(x, weights, spec):
    _check_rank4("input", x)
    _check_rank4("weights", weights)
    expected = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != expected:
        raise ShapeError(f"weights: expected (C_in, C_out, kH, kW) = {expected}, got {weights.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input channels: expected {spec.in_channels}, got {x.shape[1]}")


def _batched_outer(a, b):
    """``sum_n a[n] @ b[n].T`` for (N, P, L) and (N, Q, L) arrays."""
    return np.matmul(a, b.transpose(0, 2, 1)).sum(axis=0)


def conv2d_forward(x, weights, bias, spec):
    """Strided, zero-padded 2-D cross-correlation.

    ``x`` is N x C_in x H x W and ``weights`` C_out x C_in x kH x kW.  Returns
    N x C_out x H_out x W_out with the extents given by ``spec.output_shape``.
    """
    _check_conv(x, weights, spec)
    _check_bias(bias, spec, spec.out_channels)
    N, _, H, W = x.shape
    out_h, out_w = spec.output_shape(H, W)
    cols = _backend.im2col(x, *spec._geometry, out_h, out_w)
    out = np.matmul(weights.reshape(spec.out_channels, -1), cols)
    if bias is not None:
        out += bias[None, :, None]
    return out.reshape(N, spec.out_channels, out_h, out_w)


def conv2d_backward(x, weights, spec, grad_output):
    """Gradients of ``sum(grad_output * conv2d_forward(x, weights, b, spec))``.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_bias`` is None
    when the spec has no bias.
    """
    _check_conv(x, weights, spec)
    N, _, H, W = x.shape
    out_h, out_w = spec.output_shape(H, W)
    expected = (N, spec.out_channels, out_h, out_w)
    if grad_output.shape != expected:
        raise ShapeError(f"grad_output: expected forward output shape {expected}, got {grad_output.shape}")
    g = grad_output.reshape(N, spec.out_channels, out_h * out_w)
    cols = _backend.im2col(x, *spec._geometry, out_h, out_w)
    grad_w = _batched_outer(g, cols).reshape(weights.shape)
    grad_cols = np.matmul(weights.reshape(spec.out_channels, -1).T, g)
    grad_x = _backend.col2im(grad_cols, x.shape, *spec._geometry, out_h, out_w)
    grad_b = g.sum(axis=(0, 2)) if spec.has_bias else None
    return grad_x, grad_w, grad_b


def convtranspose2d_forward(x, weights, bias, spec):
    """Transposed convolution, the adjoint of ``conv2d_forward`` under ``spec``.

    ``x`` is N x C_in x h x w and ``weights`` C_in x C_out x kH x kW.  Each
    input value scatters its kernel-weighted copy into the output.
    """
    _check_convtranspose(x, weights, spec)
    _check_bias(bias, spec, spec.out_channels)
    N, _, h, w = x.shape
    H, W = spec.transpose_output_shape(h, w)
    y = x.reshape(N, spec.in_channels, h * w)
    cols = np.matmul(weights.reshape(spec.in_channels, -1).T, y)
    out = _backend.col2im(cols, (N, spec.out_channels, H, W), *spec._geometry, h, w)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def convtranspose2d_backward(x, weights, spec, grad_output):
    """Gradients of ``sum(grad_output * convtranspose2d_forward(...))``.

    The input gradient is the plain convolution of ``grad_output`` with the
    same weights and spec.
    """
    _check_convtranspose(x, weights, spec)
    N, _, h, w = x.shape
    H, W = spec.transpose_output_shape(h, w)
    expected = (N, spec.out_channels, H, W)
    if grad_output.shape != expected:
        raise ShapeError(f"grad_output: expected forward output shape {expected}, got {grad_output.shape}")
    cols = _backend.im2col(grad_output, *spec._geometry, h, w)
    grad_x = np.matmul(weights.reshape(spec.in_channels, -1), cols).reshape(x.shape)
    y = x.reshape(N, spec.in_channels, h * w)
    grad_w = _batched_outer(y, cols).reshape(weights.shape)
    grad_b = grad_output.sum(axis=(0, 2, 3)) if spec.has_bias else None
    return grad_x, grad_w, grad_b


def conv2d_naive(x, weights, bias, spec):
    """Direct nested-loop convolution; slow, used only as a test oracle."""
    _check_conv(x, weights, spec)
    _check_bias(bias, spec, spec.out_channels)
    N, C, H, W = x.shape
    out_h, out_w = spec.output_shape(H, W)
    out = np.zeros((N, spec.out_channels, out_h, out_w), dtype=np.result_type(x, weights))
    for n in range(N):
        for co in range(spec.out_channels):
            for oh in range(out_h):
                for ow in range(out_w):
                    acc = 0.0
                    for c in range(C):
                        for i in range(spec.kernel_h):
                            iy = oh * spec.stride_h + i - spec.pad_h
                            if iy < 0 or iy >= H:
                                continue
                            for j in range(spec.kernel_w):
                                ix = ow * spec.stride_w + j - spec.pad_w
                                if 0 <= ix < W:
                                    acc += float(x[n, c, iy, ix]) * float(weights[co, c, i, j])
                    if bias is not None:
                        acc += float(bias[co])
                    out[n, co, oh, ow] = acc
    return out


def convtranspose2d_naive(x, weights, bias, spec):
    """Direct scatter loop for the transposed convolution (test oracle)."""
    _check_convtranspose(x, weights, spec)
    _check_bias(bias, spec, spec.out_channels)
    N, C, h, w = x.shape
    H, W = spec.transpose_output_shape(h, w)
    out = np.zeros((N, spec.out_channels, H, W), dtype=np.float64)
    for n in range(N):
        for c in range(C):
            for iy in range(h):
                for ix in range(w):
                    v = float(x[n, c, iy, ix])
                    for co in range(spec.out_channels):
                        for i in range(spec.kernel_h):
                            oy = iy * spec.stride_h + i - spec.pad_h
                            if oy < 0 or oy >= H:
                                continue
                            for j in range(spec.kernel_w):
                                ox = ix * spec.stride_w + j - spec.pad_w
                                if 0 <= ox < W:
                                    out[n, co, oy, ox] += v * float(weights[c, co, i, j])
    if bias is not None:
        out += bias.astype(np.float64)[None, :, None, None]
    return out.astype(np.result_type(x, weights))


def _check_slope(x, slope):
    _check_rank4("input", x)
    if slope.shape != (x.shape[1],):
        raise ShapeError(f"slope: expected one value per channel ({x.shape[1]},), got {slope.shape}")


def prelu_forward(x, slope):
    _check_slope(x, slope)
    return np.where(x >= 0, x, slope[None, :, None, None] * x)


def prelu_backward(x, slope, grad_output):
    """Returns ``(grad_input, grad_slope)``; x == 0 takes the identity branch."""
    _check_slope(x, slope)
    if grad_output.shape != x.shape:
        raise ShapeError(f"grad_output: expected {x.shape}, got {grad_output.shape}")
    neg = x < 0
    grad_x = np.where(neg, slope[None, :, None, None] * grad_output, grad_output)
    grad_slope = np.where(neg, x * grad_output, 0).sum(axis=(0, 2, 3)).astype(slope.dtype)
    return grad_x, grad_slope


def mse_loss(pred, target):
    """Batch-mean of per-image summed squared error, and its gradient.

    ``loss = sum((pred - target)**2) / T`` with T the batch size, so the
    gradient is ``2 (pred - target) / T``.  The loss is accumulated in
    float64 and returned as a Python float.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred/target shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim < 1 or pred.shape[0] < 1:
        raise ShapeError(f"batch size must be at least 1, got shape {pred.shape}")
    T = pred.shape[0]
    diff = pred - target
    loss = float(np.sum(np.square(diff, dtype=np.float64)) / T)
    return loss, diff * (2.0 / T)


@dataclass
class AdamState:
    """Adam moment buffers keyed by parameter name.

    ``t`` counts completed updates; it is 0 for a fresh state.
    """

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update applied in place to ``params``."""
    if set(params) != set(grads) or set(params) != set(state.m) or set(params) != set(state.v):
        raise ShapeError("params, grads and Adam moments must have the same keys")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape or state.v[name].shape != p.shape:
            raise ShapeError(f"{name}: shape mismatch between parameter {p.shape} and gradient/moments")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def finite_difference_grad(f, x, step=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (evaluated in float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(a, b):
    """Norm-wise relative error ``max|a - b| / max(max|a|, max|b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    diff = np.max(np.abs(a - b), initial=0.0)
    if scale == 0.0:
        return diff
    return diff / scale
