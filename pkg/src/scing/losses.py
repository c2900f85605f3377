"""Training objectives: image-text contrastive, consistency, classification and triplet terms.

Inputs are torch tensors; all reductions run in index order so results are
deterministic. Cosine similarities assume L2-normalised rows unless stated.
"""

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError


@dataclass
class LossWeights:
    consistency: float = 1.0
    triplet: float = 1.0
    margin: float = 0.2

    def __post_init__(self):
        if self.consistency < 0 or self.triplet < 0 or self.margin < 0:
            raise ConfigError("loss weights and margin must be non-negative")


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("loss input contains non-finite values")


def clip_contrastive(g: torch.Tensor, w: torch.Tensor, labels, tau) -> torch.Tensor:
    """Symmetric image-text cross-entropy over a batch of N pairs.

    With duplicate identities in the batch every same-label column counts as
    a positive: the anchor's term is the mean log-softmax over its positives.
    With unique labels this is the plain two-way CLIP loss.
    """
    if g.ndim != 2 or g.shape != w.shape:
        raise ShapeError(f"g and w must both be (N, d), got {tuple(g.shape)} and {tuple(w.shape)}")
    _check_finite(g, w)
    labels = torch.as_tensor(labels, device=g.device).reshape(-1)
    if labels.shape[0] != g.shape[0]:
        raise ShapeError("one label per row required")
    logits = g @ w.T / tau
    pos = (labels[:, None] == labels[None, :]).to(g.dtype)
    n_pos = pos.sum(dim=1)
    i2t = -(F.log_softmax(logits, dim=1) * pos).sum(dim=1) / n_pos
    t2i = -(F.log_softmax(logits, dim=0) * pos).sum(dim=0) / n_pos
    return (i2t.mean() + t2i.mean()) / 2


def zero_shot_probs(g: torch.Tensor, W: torch.Tensor, tau) -> torch.Tensor:
    if W.shape[0] == 0:
        raise ConfigError("need at least one class embedding")
    return F.softmax(g @ W.T / tau, dim=-1)


def _cos(a, b):
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def mean_pairwise_cosine(w, w1, w2) -> torch.Tensor:
    for t in (w, w1, w2):
        if (t.norm(dim=-1) == 0).any():
            raise NumericError("cosine undefined for a zero vector")
    return (_cos(w, w1) + _cos(w, w2) + _cos(w1, w2)) / 3


def consistency_loss(w, w1, w2) -> torch.Tensor:
    """``1 - mean pairwise cosine`` of three embeddings; batched rows are averaged."""
    return (1 - mean_pairwise_cosine(w, w1, w2)).mean()


def ce_loss(g: torch.Tensor, W: torch.Tensor, y, scale) -> torch.Tensor:
    """Cross-entropy of scaled cosine logits against fixed class embeddings.

    ``g`` may be a single descriptor with scalar ``y`` or an ``(N, d)`` batch.
    """
    y = torch.as_tensor(y, dtype=torch.long, device=g.device)
    if ((y < 0) | (y >= W.shape[0])).any():
        raise IndexError(f"class id out of range [0, {W.shape[0]})")
    logits = scale * F.normalize(g, dim=-1) @ F.normalize(W, dim=-1).T
    if g.ndim == 1:
        return -F.log_softmax(logits, dim=-1)[y]
    return F.cross_entropy(logits, y)


def _hardest_negative(sims: torch.Tensor, negatives: torch.Tensor, mining: str) -> torch.Tensor:
    if mining == "corrected":
        return sims.masked_fill(~negatives, float("-inf")).max(dim=-1).values
    if mining == "as_printed":
        return sims.masked_fill(~negatives, float("inf")).min(dim=-1).values
    raise ConfigError(f"unknown negative mining {mining!r}")


def _hinge(pos, neg, margin, orientation):
    if orientation == "corrected":
        return torch.clamp(neg - pos + margin, min=0)
    if orientation == "as_printed":
        return torch.clamp(pos - neg + margin, min=0)
    raise ConfigError(f"unknown triplet orientation {orientation!r}")


def triplet_loss(g_k, w_k, batch_g, labels, label, margin=0.2, orientation="corrected",
                 mining="corrected") -> torch.Tensor:
    """Cross-modal triplet for one anchor image ``g_k`` of identity ``label``.

    The positive is the anchor's class text embedding ``w_k``; the negative is
    the batch image of another identity picked by ``mining`` ("corrected":
    most similar; "as_printed": least similar).
    """
    labels = torch.as_tensor(labels).reshape(-1)
    negatives = labels != label
    if not negatives.any():
        warnings.warn("triplet loss: batch has no negative for this anchor", RuntimeWarning, stacklevel=2)
        return g_k.new_zeros(())
    g_k, w_k = F.normalize(g_k, dim=-1), F.normalize(w_k, dim=-1)
    sims = F.normalize(batch_g, dim=-1) @ g_k
    neg = _hardest_negative(sims, negatives, mining)
    return _hinge((g_k * w_k).sum(), neg, margin, orientation)


def batch_triplet_loss(g, W, labels, margin=0.2, orientation="corrected", mining="corrected"):
    """Mean of :func:`triplet_loss` over every anchor in the batch (anchors without negatives skipped)."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=g.device).reshape(-1)
    g = F.normalize(g, dim=-1)
    pos = (g * F.normalize(W, dim=-1)[labels]).sum(-1)
    negatives = labels[:, None] != labels[None, :]
    valid = negatives.any(dim=1)
    if not valid.any():
        warnings.warn("triplet loss: batch has no negatives", RuntimeWarning, stacklevel=2)
        return g.new_zeros(())
    neg = _hardest_negative(g @ g.T, negatives, mining)
    return _hinge(pos[valid], neg[valid], margin, orientation).mean()


def stage1_loss(contrastive, consistency, weight):
    return contrastive + weight * consistency


def stage2_loss(ce, trp, weight):
    return ce + weight * trp
