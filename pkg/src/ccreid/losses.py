"""Training objectives.

Similarities are cosines of L2-normalised features divided by a temperature.
Every function is pure; gradient routing is decided by what the caller
detaches, and ``LossReport.grad_targets`` records the intended parameter
groups for each composite.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ContractError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityConfig:
    temperature: float = 0.07

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")


DEFAULT_SIM = SimilarityConfig()


@dataclass
class LossReport:
    name: str
    value: torch.Tensor
    grad_targets: frozenset
    terms: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())


def similarity(a: torch.Tensor, b: torch.Tensor, sim: SimilarityConfig = DEFAULT_SIM) -> torch.Tensor:
    """Pairwise cosine / temperature, shape len(a) x len(b)."""
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).t() / sim.temperature


def _labels(labels, n: int, num_classes: int | None = None) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.numel() != n:
        raise ContractError(f"got {labels.numel()} labels for {n} rows")
    if num_classes is not None and n and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"label out of range [0, {num_classes})")
    return labels


def ce_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = _labels(labels, logits.shape[0], logits.shape[1]).to(logits.device)
    return F.cross_entropy(logits, labels)


def pairwise_l2(x: torch.Tensor) -> torch.Tensor:
    sq = (x.unsqueeze(1) - x.unsqueeze(0)).pow(2).sum(-1)
    # clamp keeps the sqrt differentiable on the zero diagonal
    return sq.clamp(min=1e-12).sqrt()


def triplet_loss(features: torch.Tensor, labels, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss: hardest positive / negative per anchor."""
    labels = _labels(labels, features.shape[0]).to(features.device)
    same = labels[:, None] == labels[None, :]
    if same.all():
        raise ContractError("triplet loss needs at least two identities in the batch")
    if (same.sum(1) < 2).any():
        raise ContractError("every identity in the batch needs at least two samples")
    dist = pairwise_l2(features)
    d_ap = dist.masked_fill(~same, float("-inf")).max(1).values
    d_an = dist.masked_fill(same, float("inf")).min(1).values
    return F.relu(margin + d_ap - d_an).mean()


def prompt_contrastive_loss(image_feats, prompt_feats, labels, direction: str = "i2t",
                            sim: SimilarityConfig = DEFAULT_SIM) -> torch.Tensor:
    """Batch-level image/prompt contrastive loss.

    ``prompt_feats[i]`` is the prompt of ``labels[i]``. For ``i2t`` each image
    is classified among the prompts of the distinct labels in the batch; for
    ``t2i`` each sample's prompt is matched against every image in the batch,
    the positive being that sample's own image.
    """
    n = image_feats.shape[0]
    if prompt_feats.shape != image_feats.shape:
        raise ContractError("need one prompt feature per image")
    labels = _labels(labels, n).to(image_feats.device)
    if direction == "i2t":
        uniq, inverse = torch.unique(labels, return_inverse=True)
        first = torch.stack([torch.nonzero(labels == u)[0, 0] for u in uniq])
        logits = similarity(image_feats, prompt_feats[first], sim)
        return F.cross_entropy(logits, inverse)
    if direction == "t2i":
        logits = similarity(prompt_feats, image_feats, sim)
        return F.cross_entropy(logits, torch.arange(n, device=labels.device))
    raise ContractError(f"unknown direction {direction!r}")


def i2tce_loss(image_feats, all_prompt_feats, labels, sim: SimilarityConfig = DEFAULT_SIM,
               num_negatives: int | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    """Cross-entropy of image features against the prompts of every class.

    ``num_negatives`` switches to a sampled denominator: the batch's own
    classes plus that many random other classes.
    """
    K = all_prompt_feats.shape[0]
    labels = _labels(labels, image_feats.shape[0], K).to(image_feats.device)
    if num_negatives is None or num_negatives + 1 >= K:
        return F.cross_entropy(similarity(image_feats, all_prompt_feats, sim), labels)
    pos = torch.unique(labels)
    rest = torch.ones(K, dtype=torch.bool)
    rest[pos.cpu()] = False
    others = torch.nonzero(rest).flatten()
    pick = others[torch.randperm(len(others), generator=generator)[:num_negatives]]
    classes = torch.cat([pos.cpu(), pick]).to(labels.device)
    remap = torch.full((K,), -1, dtype=torch.long, device=labels.device)
    remap[classes] = torch.arange(len(classes), device=labels.device)
    return F.cross_entropy(similarity(image_feats, all_prompt_feats[classes], sim), remap[labels])


def centroid_consistency_loss(raw_feats, shield_feats, labels) -> torch.Tensor:
    """Mean squared L2 distance between per-identity centroids of two streams."""
    if raw_feats.shape != shield_feats.shape:
        raise ContractError("stream feature shapes differ")
    labels = _labels(labels, raw_feats.shape[0]).to(raw_feats.device)
    uniq, inverse, counts = torch.unique(labels, return_inverse=True, return_counts=True)
    if len(set(counts.tolist())) != 1:
        raise ContractError("not a PK batch: identities have unequal sample counts")
    P = len(uniq)
    diff = torch.zeros(P, raw_feats.shape[1], dtype=raw_feats.dtype, device=raw_feats.device)
    diff.index_add_(0, inverse, raw_feats - shield_feats)
    centroid_gap = diff / counts[:, None].to(raw_feats.dtype)
    return centroid_gap.pow(2).sum(1).mean()


def disentangle_loss(ped_feats, clothes_feats) -> torch.Tensor:
    """Mean cosine between pedestrian features and (detached) clothes features.

    Minimising it pushes pedestrian features away from the clothes features.
    """
    if ped_feats.shape != clothes_feats.shape:
        raise ContractError("feature shapes differ")
    clothes_feats = clothes_feats.detach()
    if (ped_feats.norm(dim=-1) == 0).any() or (clothes_feats.norm(dim=-1) == 0).any():
        raise ContractError("cosine undefined for zero-norm vectors")
    return F.cosine_similarity(ped_feats, clothes_feats, dim=-1, eps=0.0).mean()


STAGE1_TERMS = ("i2t", "t2i", "i2t_c", "t2i_c")
STAGE2_TERMS = ("id", "i2tce", "id_s", "i2tce_s", "i2tce_c", "con", "dis")

STAGE2_TARGETS = {
    "id": {"raw_encoder", "head_id"},
    "i2tce": {"raw_encoder"},
    "id_s": {"shield_encoder", "head_id_s"},
    "i2tce_s": {"shield_encoder"},
    "i2tce_c": {"proj_c"},
    "con": {"raw_encoder", "shield_encoder"},
    "dis": {"raw_encoder"},
}


def stage1_total(terms: dict) -> LossReport:
    """Sum of the identity and clothes prompt losses (both directions)."""
    value = sum(terms.get(k, 0.0) for k in STAGE1_TERMS)
    if not torch.is_tensor(value):
        value = torch.tensor(float(value))
    return LossReport("stage1", value, frozenset({"prompt_bank"}), dict(terms))


def stage2_total(terms: dict, lambda1: float = 0.1, lambda2: float = 1.0) -> LossReport:
    """Unit-weighted identity/alignment terms plus weighted consistency and
    disentanglement terms. Missing terms count as zero (ablations)."""
    weights = dict.fromkeys(STAGE2_TERMS, 1.0)
    weights["con"], weights["dis"] = lambda1, lambda2
    value = 0.0
    targets = set()
    for k in STAGE2_TERMS:
        if k in terms:
            value = value + weights[k] * terms[k]
            if weights[k] != 0:
                targets |= STAGE2_TARGETS[k]
    if not torch.is_tensor(value):
        value = torch.tensor(float(value))
    return LossReport("stage2", value, frozenset(targets), dict(terms))

