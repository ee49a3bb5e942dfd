"""1-bit convolution layers.

Forward path: activations and latent weights are binarized to {-1,+1}, the
spatial window is lowered to packed bit rows, and the integer dot products
come from the XNOR-popcount kernel.  Each output channel then gets a learned
affine (alpha, beta) and an activation.

Backward path: the sign function is handled by the clipped straight-through
estimator (pass-through inside |x| <= 1, zero outside), applied to both
activations and latent weights.  alpha, beta, and prelu slopes have exact
gradients.

Lowering layout: the fast path packs channels into word lanes per kernel tap
(channel-innermost), so a tap with C channels occupies ceil(C/64) words.
Padding regions are materialized as -1 bits, making the integer dot product
of padded windows exact rather than approximate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitpack import BitTensor, pack_bit_rows, unpack_bit_rows, packed_dot_matrix
from . import realops


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "dilation"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")

    def out_hw(self, h: int, w: int):
        return realops.conv_out_hw(
            h, w, self.kernel_h, self.kernel_w, self.stride, self.padding, self.dilation
        )

    @property
    def n_bits(self) -> int:
        """Logical bits per lowered row (= fan-in of one output pixel)."""
        return self.in_channels * self.kernel_h * self.kernel_w


class GradTape:
    """LIFO record of forward contexts; backward pops in exact reverse order."""

    def __init__(self):
        self._entries = []

    def push(self, owner, kind: str, ctx):
        self._entries.append((owner, kind, ctx))

    def pop(self, owner, kind: str):
        if not self._entries:
            raise ValueError(f"tape is empty; no saved context for {kind}")
        top_owner, top_kind, ctx = self._entries.pop()
        if top_owner is not owner or top_kind != kind:
            raise ValueError(
                f"tape order violation: expected to pop {kind} for {owner!r}, "
                f"found {top_kind}"
            )
        return ctx

    def clear(self):
        self._entries.clear()

    def __len__(self):
        return len(self._entries)


@dataclass
class BinConvLayer:
    """Latent real weights plus the per-channel affine of a 1-bit conv.

    ``act_shift`` is an optional learnable per-input-channel binarization
    threshold (activation binarizes as ``a - act_shift >= 0``).  It defaults
    to None (threshold fixed at zero).  A nonzero threshold is required
    wherever the incoming activation is sign-degenerate, e.g. the change
    generator whose input |f0-f1| is non-negative everywhere.
    """

    spec: ConvSpec
    latent_w: np.ndarray          # (Cout, Cin, kh, kw)
    alpha: np.ndarray             # (Cout,)
    beta_bias: np.ndarray         # (Cout,)
    phi: str = "relu"
    prelu_slope: np.ndarray | None = None
    act_shift: np.ndarray | None = None   # (Cin,) or None

    def __post_init__(self):
        s = self.spec
        expect = (s.out_channels, s.in_channels, s.kernel_h, s.kernel_w)
        if self.latent_w.shape != expect:
            raise ValueError(f"latent_w shape {self.latent_w.shape} != {expect}")
        if not np.isfinite(self.latent_w).all() or not np.isfinite(self.alpha).all():
            raise ValueError("layer parameters must be finite")
        if self.phi == "prelu" and self.prelu_slope is None:
            raise ValueError("prelu activation needs a slope vector")


def make_binconv(spec: ConvSpec, rng: np.random.Generator, phi="relu",
                 dtype=np.float32, act_shift_init=None) -> BinConvLayer:
    """Construct a layer with latent weights in the STE active region and
    alpha scaled so pre-activations start near unit magnitude."""
    shape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    latent = rng.uniform(-0.9, 0.9, size=shape).astype(dtype)
    alpha = np.full(spec.out_channels, 1.0 / np.sqrt(spec.n_bits), dtype=dtype)
    beta = np.zeros(spec.out_channels, dtype=dtype)
    slope = np.full(spec.out_channels, 0.25, dtype=dtype) if phi == "prelu" else None
    shift = None
    if act_shift_init is not None:
        shift = np.full(spec.in_channels, act_shift_init, dtype=dtype)
    return BinConvLayer(spec, latent, alpha, beta, phi, slope, shift)


# ---------------------------------------------------------------------------
# Lowering
# ---------------------------------------------------------------------------

def _pack_activation_words(a: np.ndarray, spec: ConvSpec, shift):
    """Binarize and lower (N,C,H,W) activations to tap-aligned packed rows.

    Returns (rows, oh, ow) where rows is (N*oh*ow, kh*kw*ncw) uint64 and
    ncw = ceil(C/64).  Border padding is zero words, i.e. -1 values.
    """
    n, c, h, w = a.shape
    oh, ow = spec.out_hw(h, w)
    if shift is None:
        bits = a >= 0
    else:
        bits = a >= shift[None, :, None, None]
    wordpix = pack_bit_rows(bits.transpose(0, 2, 3, 1))          # (N,H,W,ncw)
    p = spec.padding
    if p:
        wordpix = np.pad(wordpix, ((0, 0), (p, p), (p, p), (0, 0)))
    win_h = spec.dilation * (spec.kernel_h - 1) + 1
    win_w = spec.dilation * (spec.kernel_w - 1) + 1
    s = np.lib.stride_tricks.sliding_window_view(wordpix, (win_h, win_w), axis=(1, 2))
    s = s[:, :: spec.stride, :: spec.stride, :, :: spec.dilation, :: spec.dilation]
    rows = np.ascontiguousarray(s.transpose(0, 1, 2, 4, 5, 3))   # (N,oh,ow,kh,kw,ncw)
    ncw = wordpix.shape[-1]
    return rows.reshape(n * oh * ow, spec.kernel_h * spec.kernel_w * ncw), oh, ow


def _pack_weight_words(latent_w: np.ndarray) -> np.ndarray:
    """Binarize latent weights into the matching tap-aligned word layout."""
    cout, cin, kh, kw = latent_w.shape
    bits = (latent_w >= 0).transpose(0, 2, 3, 1).reshape(cout * kh * kw, cin)
    return pack_bit_rows(bits).reshape(cout, -1)


def im2row_packed(a_bits: BitTensor, spec: ConvSpec) -> BitTensor:
    """Lower a packed (N,C,H,W) bit tensor to densely packed patch rows.

    Output dims are (N*outH*outW, C*kh*kw); each row starts on a word
    boundary.  Row element order is (ky, kx, c) with channels innermost.
    Padding positions are -1 bits.
    """
    if len(a_bits.dims) != 4:
        raise ValueError(f"expected 4-D input, got dims {a_bits.dims}")
    n, c, h, w = a_bits.dims
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    oh, ow = spec.out_hw(h, w)
    bits = unpack_bit_rows(a_bits.words, w).reshape(n, c, h, w)
    p = spec.padding
    if p:
        bits = np.pad(bits, ((0, 0), (0, 0), (p, p), (p, p)))
    win_h = spec.dilation * (spec.kernel_h - 1) + 1
    win_w = spec.dilation * (spec.kernel_w - 1) + 1
    s = np.lib.stride_tricks.sliding_window_view(bits, (win_h, win_w), axis=(2, 3))
    s = s[:, :, :: spec.stride, :: spec.stride, :: spec.dilation, :: spec.dilation]
    rows = np.ascontiguousarray(s.transpose(0, 2, 3, 4, 5, 1))   # (N,oh,ow,kh,kw,C)
    rows = rows.reshape(n * oh * ow, spec.n_bits)
    return BitTensor(dims=rows.shape, words=pack_bit_rows(rows))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def binary_conv_forward(a: np.ndarray, layer: BinConvLayer, tape: GradTape | None):
    """Eq.-exact 1-bit convolution: phi(alpha * xnor_dot + beta).

    The integer dot products are computed on packed words; the result is cast
    to the input dtype (exact for desk-scale fan-ins).
    """
    if a.ndim != 4:
        raise ValueError(f"expected N,C,H,W input, got shape {a.shape}")
    if a.shape[1] != layer.spec.in_channels:
        raise ValueError(
            f"input has {a.shape[1]} channels, layer expects {layer.spec.in_channels}"
        )
    if not np.isfinite(a).all():
        raise ValueError("non-finite values in binary conv input")
    spec = layer.spec
    n = a.shape[0]
    rows, oh, ow = _pack_activation_words(a, spec, layer.act_shift)
    wwords = _pack_weight_words(layer.latent_w)
    dots = packed_dot_matrix(rows, wwords, spec.n_bits)
    dots = dots.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2)
    dots = np.ascontiguousarray(dots).astype(a.dtype)
    pre = layer.alpha[None, :, None, None] * dots + layer.beta_bias[None, :, None, None]
    out = realops.apply_phi(pre, layer.phi, layer.prelu_slope)
    if tape is not None:
        tape.push(layer, "binconv", {"a": a, "dots": dots})
    return out


def binary_conv_backward(grad_out: np.ndarray, layer: BinConvLayer, tape: GradTape):
    """Clipped-STE backward.  Returns (grad_a, grads) where grads maps
    'latent_w', 'alpha', 'beta_bias', and optionally 'prelu_slope' /
    'act_shift' to arrays shaped like the parameters."""
    ctx = tape.pop(layer, "binconv")
    a, dots = ctx["a"], ctx["dots"]
    spec = layer.spec
    n = a.shape[0]
    oh, ow = dots.shape[2], dots.shape[3]

    pre = layer.alpha[None, :, None, None] * dots + layer.beta_bias[None, :, None, None]
    g_pre, grad_slope = realops.phi_backward(grad_out, pre, layer.phi, layer.prelu_slope)

    grad_alpha = (g_pre * dots).sum(axis=(0, 2, 3))
    grad_beta = g_pre.sum(axis=(0, 2, 3))
    g_dot = g_pre * layer.alpha[None, :, None, None]
    g_dot_rows = np.ascontiguousarray(g_dot.transpose(0, 2, 3, 1)).reshape(
        n * oh * ow, spec.out_channels
    )

    if layer.act_shift is None:
        shifted = a
    else:
        shifted = a - layer.act_shift[None, :, None, None]
    s_act = np.where(shifted >= 0, 1.0, -1.0).astype(a.dtype)
    s_cols, info = realops.im2col(
        s_act, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding,
        spec.dilation, pad_value=-1.0,
    )
    wsign = np.where(layer.latent_w >= 0, 1.0, -1.0).astype(a.dtype)
    wmat = wsign.reshape(spec.out_channels, spec.n_bits)

    # weight side: exact grad wrt the sign values, then STE clip on latents
    grad_wsign = (g_dot_rows.T @ s_cols).reshape(layer.latent_w.shape)
    grad_latent = grad_wsign * (np.abs(layer.latent_w) <= 1.0)

    # activation side: conv-transpose with sign weights, then STE clip
    g_cols = g_dot_rows @ wmat
    g_act = realops.col2im(
        g_cols, info, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding, spec.dilation
    )
    g_shift = g_act * (np.abs(shifted) <= 1.0)
    grad_a = g_shift

    grads = {"latent_w": grad_latent, "alpha": grad_alpha, "beta_bias": grad_beta}
    if layer.phi == "prelu":
        grads["prelu_slope"] = grad_slope
    if layer.act_shift is not None:
        grads["act_shift"] = -g_shift.sum(axis=(0, 2, 3))
    return grad_a, grads


def change_generator_forward(f0: np.ndarray, f1: np.ndarray, layer: BinConvLayer,
                             tape: GradTape | None):
    """1-bit change generator: binary conv over max(f0,f1) - min(f0,f1).

    The elementwise difference equals |f0 - f1|; gradients route back to
    f0/f1 through the sign of (f0 - f1) with ties sent to f0.
    """
    if f0.shape != f1.shape:
        raise ValueError(f"shape mismatch: {f0.shape} vs {f1.shape}")
    ge = f0 >= f1
    d = np.where(ge, f0 - f1, f1 - f0)
    out = binary_conv_forward(d, layer, tape)
    if tape is not None:
        tape.push(layer, "changegen", {"ge": ge})
    return out


def change_generator_backward(grad_out: np.ndarray, layer: BinConvLayer, tape: GradTape):
    """Returns (grad_f0, grad_f1, layer grads)."""
    ctx = tape.pop(layer, "changegen")
    grad_d, grads = binary_conv_backward(grad_out, layer, tape)
    sgn = np.where(ctx["ge"], 1.0, -1.0).astype(grad_d.dtype)
    grad_f0 = grad_d * sgn
    grad_f1 = -grad_f0
    return grad_f0, grad_f1, grads
