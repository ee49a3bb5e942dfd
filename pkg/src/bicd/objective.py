"""Training objective and evaluation metrics.

The total objective combines the change-detection loss with a compression
penalty on the generator features and three L1 separability/reconstruction
terms contributed by the auxiliary modules:

    total = beta1 * l2 + l_cd + beta2 * (l_noise + l_recon + l_interest)

All L1/L2 reductions are means over elements so the trade-off weights are
resolution independent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class LossWeights:
    beta1: float = 1e-3
    beta2: float = 0.08

    def __post_init__(self):
        if not (np.isfinite(self.beta1) and np.isfinite(self.beta2)):
            raise ValueError("loss weights must be finite")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return Confusion(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_mask(y: np.ndarray):
    if y.size == 0:
        raise ValueError("empty mask")
    vals = np.unique(y)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"mask must be binary, found values {vals[:5]}")


def _class_weights(y: np.ndarray):
    """Per-batch balancing weights (w_pos, w_neg); unweighted when a class
    is absent, which keeps degenerate all-one-class tiles trainable."""
    n = y.size
    n_pos = float(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return 1.0, 1.0
    return n_neg / n, n_pos / n


def l_cd(logits: np.ndarray, y: np.ndarray) -> float:
    """Class-balanced binary cross-entropy on the single logit channel."""
    if logits.shape != y.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape} vs mask {y.shape}")
    if logits.size == 0:
        raise ValueError("empty tensor")
    _check_mask(y)
    yf = y.astype(logits.dtype)
    w_pos, w_neg = _class_weights(yf)
    w = w_pos * yf + w_neg * (1.0 - yf)
    # stable BCE-with-logits: max(x,0) - x*y + log1p(exp(-|x|))
    bce = np.maximum(logits, 0) - logits * yf + np.log1p(np.exp(-np.abs(logits)))
    return float((w * bce).mean())


def l_cd_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d l_cd / d logits with the same weighting and mean reduction."""
    yf = y.astype(logits.dtype)
    w_pos, w_neg = _class_weights(yf)
    w = w_pos * yf + w_neg * (1.0 - yf)
    sig = 0.5 * (1.0 + np.tanh(0.5 * logits))  # stable sigmoid
    return w * (sig - yf) / logits.size


def l2_compression(z_list) -> float:
    """Mean over tensors of ||z||_2 / element-count."""
    if not z_list:
        raise ValueError("empty feature list")
    vals = [float(np.sqrt(np.square(z, dtype=np.float64).sum())) / z.size for z in z_list]
    return float(np.mean(vals))


def l2_compression_grads(z_list):
    """Per-tensor gradients of :func:`l2_compression`."""
    k = len(z_list)
    grads = []
    for z in z_list:
        norm = float(np.sqrt(np.square(z, dtype=np.float64).sum()))
        if norm == 0.0:
            grads.append(np.zeros_like(z))
        else:
            grads.append((z / (k * z.size * norm)).astype(z.dtype))
    return grads


def total_objective(l_cd_value: float, l2_value: float, psi, w: LossWeights) -> float:
    """beta1*l2 + l_cd + beta2*(l_noise + l_recon + l_interest)."""
    l_noise, l_interest, l_recon = psi
    terms = (l_cd_value, l2_value, l_noise, l_interest, l_recon)
    if not all(np.isfinite(t) for t in terms):
        raise ValueError(f"non-finite objective term in {terms}")
    return w.beta1 * l2_value + l_cd_value + w.beta2 * (l_noise + l_recon + l_interest)


def confusion_from_logits(logits: np.ndarray, y: np.ndarray) -> Confusion:
    """Pixel confusion counts; a pixel predicts change when its logit > 0."""
    _check_mask(y)
    pred = logits > 0
    truth = y > 0
    return Confusion(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
        tn=int(np.sum(~pred & ~truth)),
    )


def f1_score(c: Confusion) -> float:
    """F1 over the change class: 2tp / (2tp + fp + fn).

    When neither prediction nor truth contains any change the score is
    defined as 1.0 and a warning is emitted.
    """
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        warnings.warn("no change pixels in prediction or truth; F1 defined as 1.0")
        return 1.0
    return 2.0 * c.tp / denom
