"""Objective terms: ID cross-entropy, batch-hard triplet, parsing-guided
attention loss and the clothes-adversarial (CAL-style) term."""

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .errors import NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_tri: float = 1.0
    lambda_att: float = 1.0
    lambda_cal: float = 0.5
    lambda_neg: float = 1.0
    epsilon: float = 1e-6
    margin: float = 0.3

    def __post_init__(self):
        for name in ("lambda_tri", "lambda_att", "lambda_cal", "lambda_neg", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class AttentionTarget:
    t_plus: torch.Tensor   # (..., H', W')
    hair_ds: torch.Tensor  # (..., H', W')
    absent: torch.Tensor   # bool per leading index


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def attention_target(face_ds, limbs_ds, epsilon: float = 1e-6, hair_ds=None) -> AttentionTarget:
    """Normalized positive target: (face + limbs) / (sum(face + limbs) + eps).

    Entries whose positive mass is zero come back all-zero and flagged absent.
    """
    face_ds = _t(face_ds)
    limbs_ds = _t(limbs_ds, face_ds)
    pos = face_ds + limbs_ds
    mass = pos.sum(dim=(-2, -1), keepdim=True)
    t_plus = pos / (mass + epsilon)
    absent = mass[..., 0, 0] <= 0
    hair = torch.zeros_like(pos) if hair_ds is None else _t(hair_ds, pos)
    return AttentionTarget(t_plus, hair, absent)


def attention_loss(A_hat: torch.Tensor, target: AttentionTarget, weights: LossWeights) -> torch.Tensor:
    """-<T+, log A> + lambda_neg * <A, hair> / (<1, hair> + eps), averaged over
    entries that have parsing masks; exactly 0 when none do."""
    if A_hat.dim() == target.t_plus.dim() + 1 and A_hat.shape[-3] == 1:
        A_hat = A_hat.squeeze(-3)
    if A_hat.shape != target.t_plus.shape:
        raise ValueError(f"attention {tuple(A_hat.shape)} vs target {tuple(target.t_plus.shape)}")
    if (A_hat <= 0).any():
        raise NumericError("attention map has non-positive entries")
    present = ~target.absent
    if not present.any():
        return A_hat.sum() * 0.0
    ce = -(target.t_plus * A_hat.log()).sum(dim=(-2, -1))
    hair = target.hair_ds
    neg = (A_hat * hair).sum(dim=(-2, -1)) / (hair.sum(dim=(-2, -1)) + weights.epsilon)
    per = ce + weights.lambda_neg * neg
    if per.dim() == 0:
        return per
    return per[present].mean()


def id_loss(id_logits: torch.Tensor, identity_labels: torch.Tensor) -> torch.Tensor:
    n = id_logits.shape[-1]
    if identity_labels.numel() and (identity_labels.min() < 0 or identity_labels.max() >= n):
        raise ValueError(f"identity label out of range [0, {n})")
    return F.cross_entropy(id_logits, identity_labels)


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(dim=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.t()
    return d2.clamp(min=1e-12).sqrt()


def triplet_loss(embeddings: torch.Tensor, identity_labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss on Euclidean distances."""
    labels = identity_labels
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    anchors = pos_mask.any(dim=1) & neg_mask.any(dim=1)
    if not anchors.any():
        log.warning("triplet loss: batch lacks a positive/negative pair; returning 0")
        return embeddings.sum() * 0.0
    dist = pairwise_euclidean(embeddings)
    hardest_pos = dist.masked_fill(~pos_mask, float("-inf")).amax(dim=1)
    hardest_neg = dist.masked_fill(~neg_mask, float("inf")).amin(dim=1)
    losses = F.relu(hardest_pos - hardest_neg + margin)
    return losses[anchors].mean()


def positive_clothes_mask(positive_clothes_map: Mapping[int, Sequence[int]], num_identities: int,
                          num_clothes: int, device=None) -> torch.Tensor:
    mask = torch.zeros(num_identities, num_clothes, dtype=torch.bool, device=device)
    for pid, clothes in positive_clothes_map.items():
        mask[int(pid), list(clothes)] = True
    return mask


@dataclass
class CALTerms:
    classifier: torch.Tensor   # trains the clothes head only
    adversarial: torch.Tensor  # the weighted L_cal; clothes head frozen


def cal_loss(features: torch.Tensor, clothes_head: nn.Module, clothes_labels: torch.Tensor,
             identity_labels: torch.Tensor, positive_clothes_map) -> CALTerms:
    """Clothes-adversarial loss, split into its two coupled updates.

    The classifier term is the clothes-head cross-entropy on detached
    features.  The adversarial term runs the same head with frozen
    parameters on live features and pushes each sample's prediction toward
    a uniform distribution over the *other* clothes classes of its identity.
    Samples whose identity owns a single clothes class contribute 0 to it.
    """
    cls_logits = clothes_head(features.detach())
    classifier = F.cross_entropy(cls_logits, clothes_labels)

    frozen = {k: v.detach() for k, v in clothes_head.named_parameters()}
    frozen.update(dict(clothes_head.named_buffers()))
    adv_logits = functional_call(clothes_head, frozen, (features,))
    adversarial = clothes_adversarial_ce(adv_logits, clothes_labels, identity_labels, positive_clothes_map)
    return CALTerms(classifier, adversarial)


def clothes_adversarial_ce(logits: torch.Tensor, clothes_labels: torch.Tensor, identity_labels: torch.Tensor,
                           positive_clothes_map) -> torch.Tensor:
    if isinstance(positive_clothes_map, torch.Tensor):
        pos = positive_clothes_map
    else:
        num_ids = max(max(positive_clothes_map, default=0), int(identity_labels.max())) + 1
        pos = positive_clothes_mask(positive_clothes_map, num_ids, logits.shape[-1], logits.device)
    others = pos[identity_labels].clone()
    others[torch.arange(len(clothes_labels)), clothes_labels] = False
    m = others.sum(dim=1)
    logp = F.log_softmax(logits, dim=1)
    picked = torch.where(others, logp, torch.zeros_like(logp)).sum(dim=1)
    per = torch.where(m > 0, -picked / m.clamp(min=1), torch.zeros_like(picked))
    return per.mean()


TERMS = ("L_id", "L_tri", "L_att", "L_cal")


def total_loss(components: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    for name in TERMS:
        value = components[name]
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss term {name} is not finite ({v})")
    return (components["L_id"]
            + weights.lambda_tri * components["L_tri"]
            + weights.lambda_att * components["L_att"]
            + weights.lambda_cal * components["L_cal"])
