"""Training-only auxiliary modules and the separability/reconstruction terms.

An auxiliary module maps a hidden feature map to input dimensions
(N,3,H,W) through four parallel per-pixel MLP branches of different widths,
a 3x3 output conv, and a bilinear upsampler.  Its parameters live in a
namespace disjoint from the network's and the module never participates in
inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .realops import RealConv, bilinear_resize_backward, bilinear_resize_forward

BRANCH_WIDTHS = (8, 16, 32, 64)


@dataclass
class AlignedFeatures:
    """Mask partition of an aligned feature map: z_in + z_n == z_aligned."""

    z_aligned: np.ndarray
    z_in: np.ndarray
    z_n: np.ndarray


class AuxModule:
    """Four parallel two-layer 1x1-conv MLPs, concatenated, fused by a 3x3
    conv to 3 channels, then bilinearly upsampled to the input image size.

    Branch parameters are seeded by (seed, width): building the branches in
    any order yields identical parameters, so construction order is not
    observable.
    """

    def __init__(self, name, in_channels, target_hw, seed=0, dtype=np.float32):
        self.name = name
        self.in_channels = in_channels
        self.target_hw = tuple(target_hw)
        self.branches = []
        for width in BRANCH_WIDTHS:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(width,))
            )
            c1 = RealConv(f"{name}/b{width}/c1", in_channels, width, 1, rng,
                          phi="relu", dtype=dtype)
            c2 = RealConv(f"{name}/b{width}/c2", width, width, 1, rng,
                          phi="relu", dtype=dtype)
            self.branches.append((c1, c2))
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
        self.out_conv = RealConv(f"{name}/out", sum(BRANCH_WIDTHS), 3, 3, rng,
                                 padding=1, phi="identity", dtype=dtype)

    def params(self):
        out = {}
        for c1, c2 in self.branches:
            out.update(c1.params())
            out.update(c2.params())
        out.update(self.out_conv.params())
        return out


def aux_align(z: np.ndarray, aux: AuxModule, tape):
    """Map a feature map to (N,3,H,W) aligned with the input image."""
    if z.ndim != 4 or z.shape[1] != aux.in_channels:
        raise ValueError(
            f"aux module {aux.name!r} expects {aux.in_channels} channels, "
            f"got feature shape {z.shape}"
        )
    parts = []
    for c1, c2 in aux.branches:
        parts.append(c2.forward(c1.forward(z, tape), tape))
    cat = np.concatenate(parts, axis=1)
    fused = aux.out_conv.forward(cat, tape)
    out, ctx = bilinear_resize_forward(fused, *aux.target_hw)
    if tape is not None:
        tape.push(aux, "auxalign", ctx)
    return out


def aux_align_backward(grad_out: np.ndarray, aux: AuxModule, tape):
    """Returns (grad_z, grads) with grads keyed by the module's param names."""
    ctx = tape.pop(aux, "auxalign")
    g = bilinear_resize_backward(grad_out, ctx)
    g_cat, grads = aux.out_conv.backward(g, tape)
    grad_z = None
    offset = g_cat.shape[1]
    for c1, c2 in reversed(aux.branches):
        width = c2.w.shape[0]
        g_branch = g_cat[:, offset - width : offset]
        offset -= width
        g_mid, g2 = c2.backward(np.ascontiguousarray(g_branch), tape)
        g_in, g1 = c1.backward(g_mid, tape)
        grads.update(g2)
        grads.update(g1)
        grad_z = g_in if grad_z is None else grad_z + g_in
    return grad_z, grads


def split_by_mask(z_aligned: np.ndarray, y: np.ndarray):
    """Partition aligned features by the change mask: (z*y, z*(1-y))."""
    vals = np.unique(y)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"mask must be binary, found values {vals[:5]}")
    if y.ndim != 4 or y.shape[1] != 1:
        raise ValueError(f"mask must be N,1,H,W, got {y.shape}")
    yf = y.astype(z_aligned.dtype)
    z_in = z_aligned * yf
    z_n = z_aligned * (1.0 - yf)
    return z_in, z_n


def aligned_split(z_aligned: np.ndarray, y: np.ndarray) -> AlignedFeatures:
    z_in, z_n = split_by_mask(z_aligned, y)
    return AlignedFeatures(z_aligned=z_aligned, z_in=z_in, z_n=z_n)


def delta_x(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Elementwise absolute difference of the input frames."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    return np.abs(x0 - x1)


def delta_x_in(dx: np.ndarray, y: np.ndarray) -> np.ndarray:
    if dx.shape[0] != y.shape[0] or dx.shape[2:] != y.shape[2:]:
        raise ValueError(f"shape mismatch: {dx.shape} vs mask {y.shape}")
    return dx * y.astype(dx.dtype)


def l1_mean(x: np.ndarray, target) -> float:
    return float(np.abs(x - target).mean())


def l1_mean_grad(x: np.ndarray, target) -> np.ndarray:
    return (np.sign(x - target) / x.size).astype(x.dtype)


def psi_terms(aligned_gen: AlignedFeatures, aligned_backbone: np.ndarray,
              x: np.ndarray, dx_in: np.ndarray):
    """(l_noise, l_interest, l_recon): suppress masked-out responses, match
    masked-in responses to the input difference, and reconstruct the input."""
    if aligned_gen.z_in.shape != dx_in.shape:
        raise ValueError(
            f"shape mismatch: aligned {aligned_gen.z_in.shape} vs dx_in {dx_in.shape}"
        )
    if aligned_backbone.shape != x.shape:
        raise ValueError(
            f"shape mismatch: aligned backbone {aligned_backbone.shape} vs input {x.shape}"
        )
    l_noise = l1_mean(aligned_gen.z_n, 0.0)
    l_interest = l1_mean(aligned_gen.z_in, dx_in)
    l_recon = l1_mean(aligned_backbone, x)
    return l_noise, l_interest, l_recon
