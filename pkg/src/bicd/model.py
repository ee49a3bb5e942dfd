"""Desk-scale Siamese change-detection network.

Topology: a real-valued stem feeds two shared 1-bit stages whose outputs are
tapped as a two-level feature pyramid per frame.  Each level is merged across
frames by a 1-bit change generator; channel-wise average pooling condenses
the generator outputs into a 2-channel map that drives a 1-bit ASPP block
(dilations 1/2/4 plus a 1x1 fusion), a real 1-bit-wide detection head, and a
bilinear upsampler back to input resolution.

Both Siamese branches read the same parameter storage, so there is exactly
one copy of every backbone weight.  There is no batch normalization: the
per-channel affine of each 1-bit layer provides the affine freedom, and
omitting batch statistics keeps samples independent and gradient checks
exact.
"""

from __future__ import annotations

import numpy as np

from . import auxobj
from .binconv import (
    BinConvLayer,
    ConvSpec,
    GradTape,
    binary_conv_backward,
    binary_conv_forward,
    change_generator_backward,
    change_generator_forward,
    make_binconv,
)
from .realops import RealConv, bilinear_resize_backward, bilinear_resize_forward


class ParamSet(dict):
    """Ordered map from parameter path to array; paths are unique and the
    network (theta, 'net/...') and auxiliary (eta, 'aux/...') namespaces are
    disjoint by construction."""

    def register(self, name: str, arr: np.ndarray):
        if name in self:
            raise ValueError(f"duplicate parameter path {name!r}")
        self[name] = arr

    def merge(self, other: dict):
        for k, v in other.items():
            self.register(k, v)
        return self


class NamedBinConv:
    """Binds a BinConvLayer to parameter paths under a given name."""

    def __init__(self, name: str, layer: BinConvLayer):
        self.name = name
        self.layer = layer

    def params(self):
        lay = self.layer
        out = {
            f"{self.name}/latent_w": lay.latent_w,
            f"{self.name}/alpha": lay.alpha,
            f"{self.name}/beta_bias": lay.beta_bias,
        }
        if lay.prelu_slope is not None:
            out[f"{self.name}/prelu_slope"] = lay.prelu_slope
        if lay.act_shift is not None:
            out[f"{self.name}/act_shift"] = lay.act_shift
        return out

    def _map(self, grads):
        return {f"{self.name}/{k}": v for k, v in grads.items()}

    def forward(self, x, tape):
        return binary_conv_forward(x, self.layer, tape)

    def backward(self, grad_out, tape):
        grad_x, grads = binary_conv_backward(grad_out, self.layer, tape)
        return grad_x, self._map(grads)

    def forward_gen(self, f0, f1, tape):
        return change_generator_forward(f0, f1, self.layer, tape)

    def backward_gen(self, grad_out, tape):
        g0, g1, grads = change_generator_backward(grad_out, self.layer, tape)
        return g0, g1, self._map(grads)


class ChangeNet:
    """Parameter container plus fixed wiring; see module docstring."""

    ASPP_DILATIONS = (1, 2, 4)

    def __init__(self, image_size=64, seed=0, dtype=np.float32):
        if image_size % 4 != 0:
            raise ValueError("image size must be a multiple of 4")
        self.image_size = image_size
        self.dtype = dtype
        rng = np.random.default_rng(seed)

        self.stem = RealConv("net/stem", 3, 16, 3, rng, stride=2, padding=1,
                             phi="identity", dtype=dtype)
        self.stage1 = NamedBinConv("net/stage1", make_binconv(
            ConvSpec(16, 32, 3, 3, stride=2, padding=1), rng, phi="prelu",
            dtype=dtype, act_shift_init=0.0))
        self.stage2 = NamedBinConv("net/stage2", make_binconv(
            ConvSpec(32, 64, 3, 3, stride=1, padding=1), rng, phi="prelu",
            dtype=dtype, act_shift_init=0.0))
        # generator inputs are non-negative |f0-f1| maps, so their
        # binarization thresholds start strictly positive
        self.gen1 = NamedBinConv("net/gen1", make_binconv(
            ConvSpec(32, 32, 3, 3, stride=1, padding=1), rng, phi="prelu",
            dtype=dtype, act_shift_init=0.1))
        self.gen2 = NamedBinConv("net/gen2", make_binconv(
            ConvSpec(64, 64, 3, 3, stride=1, padding=1), rng, phi="prelu",
            dtype=dtype, act_shift_init=0.1))
        self.aspp = [
            NamedBinConv(f"net/aspp{d}", make_binconv(
                ConvSpec(2, 16, 3, 3, stride=1, padding=d, dilation=d), rng,
                phi="prelu", dtype=dtype, act_shift_init=0.0))
            for d in self.ASPP_DILATIONS
        ]
        self.aspp_fuse = NamedBinConv("net/aspp_fuse", make_binconv(
            ConvSpec(16 * len(self.aspp), 16, 1, 1), rng, phi="prelu",
            dtype=dtype, act_shift_init=0.0))
        self.head = RealConv("net/head", 16, 1, 1, rng, phi="identity",
                             weight_scale=0.2, dtype=dtype)

    # -- parameter bookkeeping -------------------------------------------

    def bin_layers(self):
        return [self.stage1, self.stage2, self.gen1, self.gen2,
                *self.aspp, self.aspp_fuse]

    def params(self) -> ParamSet:
        ps = ParamSet()
        ps.merge(self.stem.params())
        for layer in self.bin_layers():
            ps.merge(layer.params())
        ps.merge(self.head.params())
        return ps

    def latent_weight_paths(self):
        return {f"{layer.name}/latent_w" for layer in self.bin_layers()}


def make_aux_modules(net: ChangeNet, seed=0, dtype=np.float32):
    """One auxiliary module per attachment site: each generator scale plus
    one shared module for the backbone reconstruction."""
    hw = (net.image_size, net.image_size)
    return {
        "gen1": auxobj.AuxModule("aux/gen1", 32, hw, seed=seed + 101, dtype=dtype),
        "gen2": auxobj.AuxModule("aux/gen2", 64, hw, seed=seed + 202, dtype=dtype),
        "backbone": auxobj.AuxModule("aux/backbone", 64, hw, seed=seed + 303, dtype=dtype),
    }


def aux_params(aux_modules) -> ParamSet:
    ps = ParamSet()
    for key in sorted(aux_modules):
        ps.merge(aux_modules[key].params())
    return ps


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _check_frames(net, x0, x1):
    if x0.shape != x1.shape:
        raise ValueError(f"frame shape mismatch: {x0.shape} vs {x1.shape}")
    if x0.ndim != 4 or x0.shape[1] != 3:
        raise ValueError(f"frames must be N,3,H,W, got {x0.shape}")
    if x0.shape[2] % 4 or x0.shape[3] % 4:
        raise ValueError("frame height and width must be multiples of 4")


def _encode_branch(net, x, tape, collect=None, tag=""):
    s = net.stem.forward(x, tape)
    p1 = net.stage1.forward(s, tape)
    p2 = net.stage2.forward(p1, tape)
    if collect is not None:
        collect[f"stem{tag}"] = s
        collect[f"stage1{tag}"] = p1
        collect[f"stage2{tag}"] = p2
    return p1, p2


def siamese_encode(net: ChangeNet, x0, x1, tape):
    """Two feature pyramids from identical weights; no cross-frame talk."""
    _check_frames(net, x0, x1)
    return _encode_branch(net, x0, tape), _encode_branch(net, x1, tape)


def _decode(net, g1, g2, tape, collect=None):
    m1 = g1.mean(axis=1, keepdims=True)
    m2 = g2.mean(axis=1, keepdims=True)
    if tape is not None:
        tape.push(net, "chmean1", g1.shape[1])
        tape.push(net, "chmean2", g2.shape[1])
    fused = np.concatenate([m1, m2], axis=1)
    branches = [conv.forward(fused, tape) for conv in net.aspp]
    acat = np.concatenate(branches, axis=1)
    if tape is not None:
        tape.push(net, "concat_aspp", [b.shape[1] for b in branches])
    af = net.aspp_fuse.forward(acat, tape)
    head_out = net.head.forward(af, tape)
    logits, up_ctx = bilinear_resize_forward(head_out, net.image_size, net.image_size)
    if tape is not None:
        tape.push(net, "upsample", up_ctx)
    if collect is not None:
        collect["fused"] = fused
        collect["aspp_fuse"] = af
        collect["head"] = head_out
        collect["logits"] = logits
    return logits


def forward_full(net: ChangeNet, aux, x0, x1, tape: GradTape):
    """Training forward: logits plus the feature records the objective needs.

    Records: generator outputs ('gen'), per-frame backbone features
    ('backbone'), and — when aux modules are given — their aligned versions
    ('aligned_gen', 'aligned_backbone').
    """
    (p1_0, p2_0), (p1_1, p2_1) = siamese_encode(net, x0, x1, tape)
    g1 = net.gen1.forward_gen(p1_0, p1_1, tape)
    g2 = net.gen2.forward_gen(p2_0, p2_1, tape)
    logits = _decode(net, g1, g2, tape)
    records = {"gen": [g1, g2], "backbone": [p2_0, p2_1], "logits": logits}
    if aux is not None:
        records["aligned_gen"] = [
            auxobj.aux_align(g1, aux["gen1"], tape),
            auxobj.aux_align(g2, aux["gen2"], tape),
        ]
        records["aligned_backbone"] = [
            auxobj.aux_align(p2_0, aux["backbone"], tape),
            auxobj.aux_align(p2_1, aux["backbone"], tape),
        ]
    return logits, records


def forward_infer(net: ChangeNet, x0, x1, collect=None):
    """Inference forward: identical math, no tape, never touches aux
    parameters (the auxiliary modules do not exist at inference)."""
    _check_frames(net, x0, x1)
    c0 = None if collect is None else collect
    p1_0, p2_0 = _encode_branch(net, x0, None, c0, tag="_0")
    p1_1, p2_1 = _encode_branch(net, x1, None, c0, tag="_1")
    g1 = net.gen1.forward_gen(p1_0, p1_1, None)
    g2 = net.gen2.forward_gen(p2_0, p2_1, None)
    if collect is not None:
        collect["gen1"] = g1
        collect["gen2"] = g2
    return _decode(net, g1, g2, None, collect)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def _acc(dst: dict, src: dict):
    for k, v in src.items():
        if k in dst:
            dst[k] = dst[k] + v
        else:
            dst[k] = v


def _add(a, b):
    return b if a is None else a + b


def backward_full(net: ChangeNet, aux, grad_logits, tape: GradTape,
                  grad_records=None):
    """Reverse of forward_full.  ``grad_records`` may carry gradients wrt the
    recorded tensors ('gen', 'aligned_gen', 'aligned_backbone') coming from
    the objective terms; Siamese-shared parameters accumulate both branches.
    Returns a dict covering every theta and (when aux is given) eta path.
    """
    grad_records = grad_records or {}
    grads: dict = {}
    g_g1 = g_g2 = None
    g_p1_0 = g_p1_1 = g_p2_0 = g_p2_1 = None

    if aux is not None:
        g_ab = grad_records.get("aligned_backbone")
        g_ag = grad_records.get("aligned_gen")
        zero_like = lambda arrs, i: np.zeros_like(arrs[i]) if arrs is None else arrs[i]
        # popped in reverse push order: backbone frame1, frame0, gen2, gen1
        gz, gp = auxobj.aux_align_backward(zero_like(g_ab, 1), aux["backbone"], tape)
        g_p2_1 = _add(g_p2_1, gz)
        _acc(grads, gp)
        gz, gp = auxobj.aux_align_backward(zero_like(g_ab, 0), aux["backbone"], tape)
        g_p2_0 = _add(g_p2_0, gz)
        _acc(grads, gp)
        gz, gp = auxobj.aux_align_backward(zero_like(g_ag, 1), aux["gen2"], tape)
        g_g2 = _add(g_g2, gz)
        _acc(grads, gp)
        gz, gp = auxobj.aux_align_backward(zero_like(g_ag, 0), aux["gen1"], tape)
        g_g1 = _add(g_g1, gz)
        _acc(grads, gp)

    up_ctx = tape.pop(net, "upsample")
    g_head_out = bilinear_resize_backward(grad_logits, up_ctx)
    g_af, gp = net.head.backward(g_head_out, tape)
    _acc(grads, gp)
    g_acat, gp = net.aspp_fuse.backward(g_af, tape)
    _acc(grads, gp)
    sizes = tape.pop(net, "concat_aspp")
    g_fused = None
    offset = sum(sizes)
    for conv, width in zip(reversed(net.aspp), reversed(sizes)):
        piece = np.ascontiguousarray(g_acat[:, offset - width : offset])
        offset -= width
        gx, gp = conv.backward(piece, tape)
        g_fused = _add(g_fused, gx)
        _acc(grads, gp)
    g_m1 = g_fused[:, 0:1]
    g_m2 = g_fused[:, 1:2]
    c2 = tape.pop(net, "chmean2")
    c1 = tape.pop(net, "chmean1")
    g_g2 = _add(g_g2, np.repeat(g_m2 / c2, c2, axis=1))
    g_g1 = _add(g_g1, np.repeat(g_m1 / c1, c1, axis=1))

    g_rec_gen = grad_records.get("gen")
    if g_rec_gen is not None:
        g_g1 = _add(g_g1, g_rec_gen[0])
        g_g2 = _add(g_g2, g_rec_gen[1])

    ga, gb, gp = net.gen2.backward_gen(g_g2, tape)
    g_p2_0 = _add(g_p2_0, ga)
    g_p2_1 = _add(g_p2_1, gb)
    _acc(grads, gp)
    ga, gb, gp = net.gen1.backward_gen(g_g1, tape)
    g_p1_0 = _add(g_p1_0, ga)
    g_p1_1 = _add(g_p1_1, gb)
    _acc(grads, gp)

    # unwind branch 1 then branch 0 (reverse of forward push order)
    gx, gp = net.stage2.backward(g_p2_1, tape)
    g_p1_1 = _add(g_p1_1, gx)
    _acc(grads, gp)
    gx, gp = net.stage1.backward(g_p1_1, tape)
    _acc(grads, gp)
    _, gp = net.stem.backward(gx, tape)
    _acc(grads, gp)

    gx, gp = net.stage2.backward(g_p2_0, tape)
    g_p1_0 = _add(g_p1_0, gx)
    _acc(grads, gp)
    gx, gp = net.stage1.backward(g_p1_0, tape)
    _acc(grads, gp)
    _, gp = net.stem.backward(gx, tape)
    _acc(grads, gp)

    tape.clear()

    # every parameter path reports a gradient
    for name, arr in net.params().items():
        grads.setdefault(name, np.zeros_like(arr))
    if aux is not None:
        for name, arr in aux_params(aux).items():
            grads.setdefault(name, np.zeros_like(arr))
    return grads
