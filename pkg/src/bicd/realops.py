"""Dense real-valued building blocks: im2col convolution, bilinear resize,
activations.  These carry the full-precision stem/head/auxiliary layers; the
1-bit layers live in :mod:`bicd.binconv`.
"""

from __future__ import annotations

import numpy as np


def conv_out_hw(h, w, kh, kw, stride, padding, dilation):
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"convolution output would be empty for input {h}x{w}")
    return oh, ow


def im2col(x: np.ndarray, kh, kw, stride, padding, dilation, pad_value=0.0):
    """Lower (N,C,H,W) to patch rows (N*oh*ow, C*kh*kw), channel-major taps.

    Row element order is (c, ky, kx), matching ``w.reshape(Cout, -1)``.
    """
    n, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, kh, kw, stride, padding, dilation)
    if padding:
        x = np.pad(
            x,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=pad_value,
        )
    win_h = dilation * (kh - 1) + 1
    win_w = dilation * (kw - 1) + 1
    s = np.lib.stride_tricks.sliding_window_view(x, (win_h, win_w), axis=(2, 3))
    s = s[:, :, ::stride, ::stride, ::dilation, ::dilation]
    # (N,C,oh,ow,kh,kw) -> (N,oh,ow,C,kh,kw) -> (R, K)
    cols = np.ascontiguousarray(s.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * kh * kw), (n, c, h, w, oh, ow)


def col2im(g_cols: np.ndarray, shape_info, kh, kw, stride, padding, dilation):
    """Adjoint of :func:`im2col`: scatter-add patch-row gradients back to input."""
    n, c, h, w = shape_info[:4]
    oh, ow = shape_info[4], shape_info[5]
    hp, wp = h + 2 * padding, w + 2 * padding
    grad = np.zeros((n, c, hp, wp), dtype=g_cols.dtype)
    g = g_cols.reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2)
    for ky in range(kh):
        y0 = ky * dilation
        for kx in range(kw):
            x0 = kx * dilation
            grad[:, :, y0 : y0 + oh * stride : stride, x0 : x0 + ow * stride : stride] += g[ky, kx]
    if padding:
        grad = grad[:, :, padding:-padding, padding:-padding]
    return grad


def conv2d_forward(x, weight, bias, stride=1, padding=0, dilation=1):
    """Standard dense convolution.  Returns (out, ctx) with ctx for backward."""
    cout, cin, kh, kw = weight.shape
    cols, info = im2col(x, kh, kw, stride, padding, dilation)
    wmat = weight.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias[None, :]
    n, oh, ow = info[0], info[4], info[5]
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    ctx = (cols, info, weight.shape, (stride, padding, dilation))
    return np.ascontiguousarray(out), ctx


def conv2d_backward(grad_out, weight, ctx):
    """Gradients of conv2d_forward wrt input, weight, and bias."""
    cols, info, wshape, (stride, padding, dilation) = ctx
    cout, cin, kh, kw = wshape
    n, oh, ow = info[0], info[4], info[5]
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
    grad_w = (g.T @ cols).reshape(wshape)
    grad_b = g.sum(axis=0)
    g_cols = g @ weight.reshape(cout, cin * kh * kw)
    grad_x = col2im(g_cols, info, kh, kw, stride, padding, dilation)
    return grad_x, grad_w, grad_b


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """Interpolation matrix M (n_out, n_in) so that y = M @ x resamples an axis.

    Sample positions follow the half-pixel convention: output pixel i reads
    source coordinate (i + 0.5) * n_in / n_out - 0.5, clamped to the valid
    range, with linear weights between the two neighbours.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def bilinear_resize_forward(x, out_h, out_w):
    """Separable bilinear resize of (N,C,H,W) to (N,C,out_h,out_w)."""
    n, c, h, w = x.shape
    ry = bilinear_matrix(h, out_h, dtype=x.dtype)
    cx = bilinear_matrix(w, out_w, dtype=x.dtype)
    tmp = np.tensordot(x, cx, axes=([3], [1]))          # (N,C,H,out_w)
    out = np.tensordot(tmp, ry, axes=([2], [1]))        # (N,C,out_w,out_h)
    return np.ascontiguousarray(out.transpose(0, 1, 3, 2)), (h, w, ry, cx)


def bilinear_resize_backward(grad_out, ctx):
    h, w, ry, cx = ctx
    g = grad_out.transpose(0, 1, 3, 2)                  # (N,C,out_w,out_h)
    tmp = np.tensordot(g, ry, axes=([3], [0]))          # (N,C,out_w,H)
    grad_x = np.tensordot(tmp, cx, axes=([2], [0]))     # (N,C,H,W)
    return np.ascontiguousarray(grad_x)


class RealConv:
    """Full-precision conv layer with named parameters and an optional
    relu/identity activation.  Used for the stem, the detection head, and
    every auxiliary-module conv."""

    def __init__(self, name, in_channels, out_channels, kernel, rng,
                 stride=1, padding=0, phi="identity", weight_scale=None,
                 dtype=np.float32):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.phi = phi
        fan_in = in_channels * kernel * kernel
        scale = weight_scale if weight_scale is not None else np.sqrt(2.0 / fan_in)
        self.w = (rng.standard_normal((out_channels, in_channels, kernel, kernel)) * scale).astype(dtype)
        self.b = np.zeros(out_channels, dtype=dtype)

    def params(self):
        return {f"{self.name}/w": self.w, f"{self.name}/b": self.b}

    def forward(self, x, tape):
        out, ctx = conv2d_forward(x, self.w, self.b, self.stride, self.padding)
        if self.phi == "relu":
            if tape is not None:
                tape.push(self, "realconv", (ctx, out > 0))
            return np.maximum(out, 0)
        if tape is not None:
            tape.push(self, "realconv", (ctx, None))
        return out

    def backward(self, grad_out, tape):
        ctx, pos = tape.pop(self, "realconv")
        if pos is not None:
            grad_out = grad_out * pos
        grad_x, grad_w, grad_b = conv2d_backward(grad_out, self.w, ctx)
        return grad_x, {f"{self.name}/w": grad_w, f"{self.name}/b": grad_b}


def apply_phi(pre, phi, slope=None):
    """Activation forward: identity, relu, or per-channel prelu."""
    if phi == "identity":
        return pre
    if phi == "relu":
        return np.maximum(pre, 0)
    if phi == "prelu":
        return np.where(pre > 0, pre, slope[None, :, None, None] * pre)
    raise ValueError(f"unknown activation {phi!r}")


def phi_backward(grad_out, pre, phi, slope=None):
    """Activation backward: (grad_pre, grad_slope or None)."""
    if phi == "identity":
        return grad_out, None
    if phi == "relu":
        return grad_out * (pre > 0), None
    if phi == "prelu":
        neg = pre <= 0
        grad_pre = grad_out * np.where(neg, slope[None, :, None, None], 1.0)
        grad_slope = (grad_out * pre * neg).sum(axis=(0, 2, 3))
        return grad_pre, grad_slope
    raise ValueError(f"unknown activation {phi!r}")
