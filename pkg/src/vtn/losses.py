"""Training objectives: masked L1, weighted stop-token BCE, guided attention."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import length_mask


class EmptySelectionWarning(UserWarning):
    pass


@dataclass
class LossConfig:
    l1_coarse: float = 1.0
    l1_fine: float = 1.0
    stop: float = 1.0
    guided_attention: float = 1.0
    ga_sigma: float = 0.4
    stop_pos_weight: float = 5.0
    ga_layers: tuple[int, ...] = (0, 1)
    ga_heads: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.ga_sigma <= 0:
            raise ValueError("ga_sigma must be > 0")
        if self.stop_pos_weight <= 0:
            raise ValueError("stop_pos_weight must be > 0")
        for name in ("l1_coarse", "l1_fine", "stop", "guided_attention"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        self.ga_layers = tuple(int(i) for i in self.ga_layers)
        if self.ga_heads is not None:
            self.ga_heads = tuple(int(i) for i in self.ga_heads)

    def selection(self, heads: int) -> set[tuple[int, int]]:
        hs = range(heads) if self.ga_heads is None else self.ga_heads
        return {(layer, h) for layer in self.ga_layers for h in hs}


@dataclass
class LossBreakdown:
    l1_coarse: Tensor
    l1_fine: Tensor
    stop_bce: Tensor
    guided_attention: Tensor
    total: Tensor
    weights: LossConfig

    def values(self) -> dict[str, float]:
        return {"l1_coarse": self.l1_coarse.item(), "l1_fine": self.l1_fine.item(),
                "stop_bce": self.stop_bce.item(), "guided_attention": self.guided_attention.item(),
                "total": self.total.item()}


def masked_l1(pred: Tensor, target, lengths) -> Tensor:
    """Mean absolute error over the first ``lengths[b]`` frames of each row."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"masked_l1: pred {pred.shape} vs target {target.shape}")
    lengths = np.asarray(lengths)
    if np.any(lengths > pred.shape[1]) or np.any(lengths < 0):
        raise ValueError("masked_l1: lengths exceed the time extent")
    valid = np.broadcast_to(length_mask(lengths, pred.shape[1])[:, :, None], pred.shape)
    count = valid.sum()
    if count == 0:
        raise ValueError("masked_l1: no valid positions")
    diff = ad.abs_(pred - Tensor(target))
    return ad.scale(ad.sum_(ad.mul(diff, Tensor(valid.astype(np.float64)))), 1.0 / count)


def stop_bce(logits: Tensor, labels, positive_weight: float = 5.0, lengths=None) -> Tensor:
    """Weighted BCE-with-logits averaged over (valid) steps.

    Per step: ``-(w * y * log sigmoid(x) + (1 - y) * log(1 - sigmoid(x)))``.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise ad.ShapeError(f"stop_bce: logits {logits.shape} vs labels {labels.shape}")
    if positive_weight <= 0:
        raise ValueError("positive_weight must be > 0")
    if lengths is None:
        valid = np.ones(labels.shape)
    else:
        valid = length_mask(lengths, labels.shape[-1]).astype(np.float64)
    pos = ad.mul(ad.softplus(-logits), Tensor(positive_weight * labels * valid))
    neg = ad.mul(ad.softplus(logits), Tensor((1.0 - labels) * valid))
    return ad.scale(ad.sum_(pos + neg), 1.0 / valid.sum())


def guided_attention_weights(out_len: int, in_len: int, sigma: float) -> np.ndarray:
    """W[n, t] = 1 - exp(-(n/N - t/T)^2 / (2 sigma^2)), shape [N, T]."""
    n = np.arange(out_len)[:, None] / out_len
    t = np.arange(in_len)[None, :] / in_len
    return 1.0 - np.exp(-((n - t) ** 2) / (2.0 * sigma * sigma))


def guided_attention_loss(weights: list[Tensor], sigma: float, selection,
                          out_lengths=None, in_lengths=None) -> Tensor:
    """Mean over selected (layer, head) of the masked mean of A * W.

    ``weights[layer]`` is [B, H, N_out, T_in].  Each batch row uses its own
    valid lengths for the N and T of the penalty grid.
    """
    selection = sorted(set(selection))
    if not selection:
        warnings.warn("guided attention selection is empty; loss is 0", EmptySelectionWarning)
        return Tensor(0.0)
    b, _, n_max, t_max = weights[selection[0][0]].shape
    out_lengths = np.full(b, n_max) if out_lengths is None else np.asarray(out_lengths)
    in_lengths = np.full(b, t_max) if in_lengths is None else np.asarray(in_lengths)
    grid = np.zeros((b, n_max, t_max))
    for i in range(b):
        grid[i, :out_lengths[i], :in_lengths[i]] = guided_attention_weights(
            int(out_lengths[i]), int(in_lengths[i]), sigma)
    count = float((out_lengths * in_lengths).sum())
    by_layer: dict[int, list[int]] = {}
    for layer, head in selection:
        by_layer.setdefault(layer, []).append(head)
    terms = []
    for layer, heads in by_layer.items():
        w = weights[layer]
        if len(heads) == w.shape[1]:
            picked = w
        else:
            picked = ad.slice_(w, (slice(None), np.array(heads)))
        penalty = np.broadcast_to(grid[:, None], picked.shape).copy()
        terms.append(ad.sum_(ad.mul(picked, Tensor(penalty))))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.scale(total, 1.0 / (count * len(selection)))


def compute_losses(out, targets, lengths, cfg: LossConfig, heads: int, r_d: int) -> LossBreakdown:
    """All training terms for a :class:`~vtn.model.DecoderOutput`."""
    from .model import stop_labels

    l1c = masked_l1(out.coarse, targets, lengths)
    l1f = masked_l1(out.fine, targets, lengths)
    labels = stop_labels(lengths, r_d, out.stop_logits.shape[1])
    bce = stop_bce(out.stop_logits, labels, cfg.stop_pos_weight, out.steps)
    if cfg.guided_attention > 0:
        sel = {(layer, h) for layer, h in cfg.selection(heads) if layer < len(out.src_attn)}
        ga = guided_attention_loss(out.src_attn, cfg.ga_sigma, sel, out.steps, out.enc_lengths)
    else:
        ga = Tensor(0.0)
    total = (ad.scale(l1c, cfg.l1_coarse) + ad.scale(l1f, cfg.l1_fine)
             + ad.scale(bce, cfg.stop) + ad.scale(ga, cfg.guided_attention))
    return LossBreakdown(l1c, l1f, bce, ga, total, cfg)
