"""Training loop: Adam with cosine/step schedules, loss composition,
evaluation, checkpointing, and inference cost accounting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import auxobj, objective
from .binconv import GradTape
from .checkpoint import load_checkpoint, save_checkpoint
from .model import ChangeNet, aux_params, backward_full, forward_full, forward_infer, make_aux_modules


class TrainingDiverged(RuntimeError):
    """Raised when a loss term goes non-finite; names the first bad term."""


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    clamp_paths: frozenset = frozenset()


LATENT_CLAMP = 1.5  # keeps latent weights near the STE active region


def adam_step(params: dict, grads: dict, state: OptimState, lr: float | None = None):
    """Standard bias-corrected Adam update, in place.

    Latent binary weights (state.clamp_paths) are clamped to
    [-LATENT_CLAMP, LATENT_CLAMP] after the update.
    """
    if lr is None:
        lr = state.lr
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if name in state.clamp_paths:
            np.clip(p, -LATENT_CLAMP, LATENT_CLAMP, out=p)


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    """Cosine annealing for the network, stepped decay for the auxiliaries.

    The auxiliary rate drops to 1/10 at the 90/140 and 120/140 fractions of
    the run, scaled to the configured epoch count.  Both rates share a short
    linear warmup.
    """

    epochs: int
    base_lr: float = 5e-4
    aux_lr: float = 5e-3
    warmup_frac: float = 0.05
    drop_fracs: tuple = (90 / 140, 120 / 140)

    @property
    def warmup_epochs(self) -> int:
        if self.warmup_frac <= 0:
            return 0
        return max(1, math.ceil(self.warmup_frac * self.epochs))

    @property
    def drop_epochs(self) -> tuple:
        return tuple(int(round(f * self.epochs)) for f in self.drop_fracs)

    def theta_lr(self, epoch: int) -> float:
        w = self.warmup_epochs
        if epoch < w:
            return self.base_lr * (epoch + 1) / w
        last = self.epochs - 1
        if last <= w:
            return self.base_lr
        t = (epoch - w) / (last - w)
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * t))

    def aux_lr_at(self, epoch: int) -> float:
        w = self.warmup_epochs
        lr = self.aux_lr * (epoch + 1) / w if epoch < w else self.aux_lr
        d1, d2 = self.drop_epochs
        if epoch >= d2:
            return lr * 0.01
        if epoch >= d1:
            return lr * 0.1
        return lr


# ---------------------------------------------------------------------------
# Loss composition
# ---------------------------------------------------------------------------

LOSS_TERMS = ("l_cd", "l2", "l_noise", "l_interest", "l_recon", "total")


def batch_losses(net, aux, x0, x1, y, w, want_grads=True):
    """Full objective on one batch; optionally also every parameter gradient.

    Separability terms average over the generator scales, reconstruction over
    the two frames.  Returns (terms, grads_or_None).
    """
    tape = GradTape()
    logits, rec = forward_full(net, aux, x0, x1, tape)
    lcd = objective.l_cd(logits, y)
    l2 = objective.l2_compression(rec["gen"])
    dx = auxobj.delta_x(x0, x1)
    dxin = auxobj.delta_x_in(dx, y)
    splits = [auxobj.aligned_split(a, y) for a in rec["aligned_gen"]]
    n_sites = len(splits)
    ab = rec["aligned_backbone"]
    l_noise = float(np.mean([auxobj.l1_mean(s.z_n, 0.0) for s in splits]))
    l_interest = float(np.mean([auxobj.l1_mean(s.z_in, dxin) for s in splits]))
    l_recon = float(np.mean([auxobj.l1_mean(ab[0], x0), auxobj.l1_mean(ab[1], x1)]))
    total = objective.total_objective(lcd, l2, (l_noise, l_interest, l_recon), w)
    terms = {
        "l_cd": lcd, "l2": l2, "l_noise": l_noise,
        "l_interest": l_interest, "l_recon": l_recon, "total": total,
    }
    for name in LOSS_TERMS:
        if not np.isfinite(terms[name]):
            raise TrainingDiverged(f"loss term {name!r} became non-finite ({terms[name]})")
    if not want_grads:
        tape.clear()
        return terms, None

    grad_logits = objective.l_cd_grad(logits, y)
    grad_records = {
        "gen": [w.beta1 * g for g in objective.l2_compression_grads(rec["gen"])]
    }
    yf = y.astype(x0.dtype)
    aligned_gen_grads = []
    for s in splits:
        g_noise = np.sign(s.z_n) * (1.0 - yf) / (s.z_n.size * n_sites)
        g_interest = np.sign(s.z_in - dxin) * yf / (s.z_in.size * n_sites)
        aligned_gen_grads.append(w.beta2 * (g_noise + g_interest))
    grad_records["aligned_gen"] = aligned_gen_grads
    grad_records["aligned_backbone"] = [
        w.beta2 * np.sign(ab[0] - x0) / (ab[0].size * 2),
        w.beta2 * np.sign(ab[1] - x1) / (ab[1].size * 2),
    ]
    grads = backward_full(net, aux, grad_logits, tape, grad_records)
    return terms, grads


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _stack_batch(pairs, idx, dtype):
    x0 = np.stack([pairs[i].x0 for i in idx]).astype(dtype)
    x1 = np.stack([pairs[i].x1 for i in idx]).astype(dtype)
    y = np.stack([pairs[i].y for i in idx]).astype(dtype)
    return x0, x1, y


def evaluate(net: ChangeNet, pairs, batch_size=4):
    """Pooled-pixel F1 over a split (single confusion over all pixels)."""
    conf = objective.Confusion()
    for start in range(0, len(pairs), batch_size):
        idx = range(start, min(start + batch_size, len(pairs)))
        x0, x1, y = _stack_batch(pairs, idx, net.dtype)
        logits = forward_infer(net, x0, x1)
        conf = conf + objective.confusion_from_logits(logits, y)
    return objective.f1_score(conf), conf


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    base_lr: float = 5e-4
    aux_lr: float = 5e-3
    warmup_frac: float = 0.05
    flip_augment: bool = False
    out_dir: str | None = None


@dataclass
class RunReport:
    best_epoch: int
    best_f1: float
    history: list
    best_checkpoint: str | None = None
    last_checkpoint: str | None = None


def net_tensors(net: ChangeNet, meta: dict | None = None) -> dict:
    tensors = {}
    meta = dict(meta or {})
    meta.setdefault("image_size", net.image_size)
    for key in sorted(meta):
        tensors[f"__meta__/{key}"] = np.asarray(meta[key], dtype=np.float64)
    tensors.update(net.params())
    return tensors


def save_net(path, net: ChangeNet, meta: dict | None = None):
    save_checkpoint(path, net_tensors(net, meta))


def load_net(path) -> tuple:
    """Rebuild a desk network from a checkpoint.  Returns (net, meta)."""
    tensors = load_checkpoint(path)
    meta = {
        k.split("/", 1)[1]: float(v)
        for k, v in tensors.items()
        if k.startswith("__meta__/")
    }
    image_size = int(meta.get("image_size", 64))
    net = ChangeNet(image_size=image_size, seed=0, dtype=np.float32)
    params = net.params()
    for name, arr in params.items():
        if name not in tensors:
            raise ValueError(f"{path}: checkpoint is missing parameter {name!r}")
        if tensors[name].shape != arr.shape:
            raise ValueError(
                f"{path}: shape mismatch for {name!r}: "
                f"{tensors[name].shape} vs {arr.shape}"
            )
        arr[...] = tensors[name].astype(arr.dtype)
    return net, meta


def train(cfg: TrainConfig, train_pairs, val_pairs, net: ChangeNet, aux,
          w: objective.LossWeights, checkpoint_every: int | None = None) -> RunReport:
    """Seeded training with cosine network lr and stepped auxiliary lr.

    Logs per-epoch loss terms and validation F1; tracks the best-F1 epoch and
    writes best/last checkpoints plus a metrics CSV when out_dir is set.
    """
    if not train_pairs:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    sched = Schedule(epochs=cfg.epochs, base_lr=cfg.base_lr, aux_lr=cfg.aux_lr,
                     warmup_frac=cfg.warmup_frac)
    theta = net.params()
    eta = aux_params(aux)
    opt_theta = OptimState(lr=cfg.base_lr, clamp_paths=frozenset(net.latent_weight_paths()))
    opt_eta = OptimState(lr=cfg.aux_lr)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    best_f1 = -1.0
    best_epoch = -1
    best_path = str(out_dir / "best.bicd") if out_dir else None
    last_path = str(out_dir / "last.bicd") if out_dir else None

    n = len(train_pairs)
    for epoch in range(cfg.epochs):
        lr_t = sched.theta_lr(epoch)
        lr_a = sched.aux_lr_at(epoch)
        order = rng.permutation(n)
        sums = {k: 0.0 for k in LOSS_TERMS}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x0, x1, y = _stack_batch(train_pairs, idx, net.dtype)
            if cfg.flip_augment:
                flip = rng.random(len(idx)) < 0.5
                x0[flip] = x0[flip, :, :, ::-1]
                x1[flip] = x1[flip, :, :, ::-1]
                y[flip] = y[flip, :, :, ::-1]
            terms, grads = batch_losses(net, aux, x0, x1, y, w)
            adam_step(theta, grads, opt_theta, lr_t)
            adam_step(eta, grads, opt_eta, lr_a)
            for k in LOSS_TERMS:
                sums[k] += terms[k]
            n_batches += 1
        val_f1, _ = evaluate(net, val_pairs, cfg.batch_size) if val_pairs else (float("nan"), None)
        row = {"epoch": epoch, "lr": lr_t}
        row.update({k: sums[k] / n_batches for k in LOSS_TERMS})
        row["val_f1"] = val_f1
        history.append(row)
        if val_pairs and val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            if out_dir:
                save_net(best_path, net, {"epoch": epoch, "val_f1": val_f1})
        if out_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_net(out_dir / f"epoch_{epoch:04d}.bicd", net,
                     {"epoch": epoch, "val_f1": val_f1})

    if out_dir:
        save_net(last_path, net, {"epoch": cfg.epochs - 1,
                                  "val_f1": history[-1]["val_f1"]})
        write_metrics_csv(out_dir / "metrics.csv", history)
    return RunReport(best_epoch=best_epoch, best_f1=best_f1, history=history,
                     best_checkpoint=best_path if out_dir else None,
                     last_checkpoint=last_path if out_dir else None)


METRICS_COLUMNS = ["epoch", "lr", "l_cd", "l2", "l_noise", "l_interest",
                   "l_recon", "total", "val_f1"]


def write_metrics_csv(path, history):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for row in history:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in METRICS_COLUMNS])


# ---------------------------------------------------------------------------
# Inference cost accounting
# ---------------------------------------------------------------------------

def conv_macs(cout, cin, kh, kw, oh, ow):
    return cout * cin * kh * kw * oh * ow


def model_stats(net: ChangeNet):
    """(params in millions, OPs in billions) for the inference network.

    Kernel weights only; binary kernels count 1/32 of their elements toward
    parameters, and their multiply-accumulates count 1/64 of an operation.
    Real kernels count fully, with 2 FLOPs per MAC.  Auxiliary modules are
    excluded: they do not exist at inference.
    """
    s = net.image_size
    half, quarter = s // 2, s // 4
    real_params = net.stem.w.size + net.head.w.size
    real_macs = (
        conv_macs(16, 3, 3, 3, half, half)        # stem
        + conv_macs(1, 16, 1, 1, quarter, quarter)  # head
    )
    bin_params = 0
    bin_macs = 0
    bin_shapes = {
        "net/stage1": (quarter, quarter),
        "net/stage2": (quarter, quarter),
        "net/gen1": (quarter, quarter),
        "net/gen2": (quarter, quarter),
        "net/aspp1": (quarter, quarter),
        "net/aspp2": (quarter, quarter),
        "net/aspp4": (quarter, quarter),
        "net/aspp_fuse": (quarter, quarter),
    }
    for layer in net.bin_layers():
        spec = layer.layer.spec
        oh, ow = bin_shapes[layer.name]
        bin_params += layer.layer.latent_w.size
        bin_macs += conv_macs(spec.out_channels, spec.in_channels,
                              spec.kernel_h, spec.kernel_w, oh, ow)
    params = real_params + bin_params / 32.0
    ops = real_macs * 2 + bin_macs / 64.0
    return params / 1e6, ops / 1e9


def stats_table(net: ChangeNet) -> str:
    params_m, ops_g = model_stats(net)
    lines = [
        f"image size        : {net.image_size}x{net.image_size}",
        f"binary layers     : {len(net.bin_layers())}",
        f"params (millions) : {params_m:.6f}",
        f"OPs (billions)    : {ops_g:.6f}",
        "counting: real kernels full, binary kernels 1/32 params and 1/64 MACs",
    ]
    return "\n".join(lines)
