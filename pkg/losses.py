"""
Training objectives: reconstruction, slot contrast, the three classification
terms and their weighted sum.
"""
import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from memory import MemoryBank
from tensor import (
    Tensor, absolute, add, cosine_sim, cross_entropy, detach, l2_normalize, matmul, mean, mul,
    scale, sum, swapaxes, zeros
)

logger = logging.getLogger(__name__)

LOSS_FIELDS = ('recon', 'cont', 'cls_v', 'cls_a', 'cls_va')


class LossError(ValueError):
    """Raised when a loss is called with inconsistent inputs."""
    pass


class NonFiniteLossError(LossError):
    """Raised when any loss term evaluates to NaN or infinity."""
    pass


class LossWeights(BaseModel):
    """Per-term weights; all 1.0 gives the unweighted joint objective."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    recon: float = Field(default=1.0, ge=0)
    cont: float = Field(default=1.0, ge=0)
    cls_v: float = Field(default=1.0, ge=0)
    cls_a: float = Field(default=1.0, ge=0)
    cls_va: float = Field(default=1.0, ge=0)


class LossReport(BaseModel):
    """Scalar loss values for one batch."""
    model_config = ConfigDict(frozen=True)

    recon: float
    cont: float
    cls_v: float = Field(..., ge=0)
    cls_a: float = Field(..., ge=0)
    cls_va: float = Field(..., ge=0)
    total: float

    def as_row(self, step: int) -> Dict[str, float]:
        return {'step': step, **self.model_dump()}


def recon_loss(f_hat_a: Sequence[Tensor], f_a: Sequence[Tensor]) -> Tensor:
    """Mean over levels of mean |1 - cos(f_hat_a[t], f_a[t])|; targets are detached."""
    if not f_hat_a or not f_a:
        raise LossError("Reconstruction loss needs at least one level")
    if len(f_hat_a) != len(f_a):
        raise LossError(f"Got {len(f_hat_a)} reconstructed levels but {len(f_a)} audio levels")
    total = None
    for level, (recalled, target) in enumerate(zip(f_hat_a, f_a), start=1):
        if recalled.shape != target.shape:
            raise LossError(f"Level {level}: reconstructed {list(recalled.shape)} vs target {list(target.shape)}")
        distance = absolute(add(scale(cosine_sim(recalled, detach(target)), -1.0), 1.0))
        term = mean(distance)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(f_hat_a))


def slot_similarity(bank: MemoryBank) -> Tensor:
    """Mean pairwise cosine similarity between distinct value slots."""
    slots = bank.values.shape[0]
    if slots < 2:
        raise LossError(f"Contrastive loss needs at least two slots, got {slots}")
    unit = l2_normalize(bank.values)
    gram = matmul(unit, swapaxes(unit, 0, 1))
    off_diagonal = Tensor(1.0 - np.eye(slots))
    return scale(sum(mul(gram, off_diagonal)), 1.0 / (slots * (slots - 1)))


def contrastive_loss(banks: Sequence[MemoryBank]) -> Tensor:
    """Mean over levels of the normalised off-diagonal slot similarity of each value memory."""
    if not banks:
        raise LossError("Contrastive loss needs at least one memory bank")
    total = None
    for bank in banks:
        term = slot_similarity(bank)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(banks))


def classification_losses(logits_v: Tensor, logits_a: Tensor, logits_va: Tensor,
                          y) -> Tuple[Tensor, Tensor, Tensor]:
    """Cross-entropy of the visual, audio and memory-fused heads (batch mean when batched)."""
    return tuple(mean(cross_entropy(logits, y)) for logits in (logits_v, logits_a, logits_va))


def total_loss(parts: Dict[str, Tensor], weights: Optional[LossWeights] = None) -> Tensor:
    """Weighted sum of the five parts; default weights give the plain sum."""
    weights = weights or LossWeights()
    missing = [name for name in LOSS_FIELDS if name not in parts]
    if missing:
        raise LossError(f"Missing loss parts: {missing}")
    total = None
    for name in LOSS_FIELDS:
        term = scale(parts[name], getattr(weights, name))
        total = term if total is None else add(total, term)
    return total


def joint_objective(recalled: Sequence[Tensor], audio_levels: Sequence[Tensor], banks: Sequence[MemoryBank],
                    logits_v: Tensor, logits_a: Tensor, logits_va: Tensor, labels,
                    weights: Optional[LossWeights] = None) -> Tuple[Tensor, LossReport]:
    """Total loss and its report; without memory banks the memory terms are zero."""
    cls_v, cls_a, cls_va = classification_losses(logits_v, logits_a, logits_va, labels)
    if banks:
        parts = {'recon': recon_loss(recalled, audio_levels), 'cont': contrastive_loss(banks)}
    else:
        parts = {'recon': zeros(()), 'cont': zeros(())}
    parts.update(cls_v=cls_v, cls_a=cls_a, cls_va=cls_va)
    total = total_loss(parts, weights)
    values = {name: parts[name].item() for name in LOSS_FIELDS}
    values['total'] = total.item()
    if not np.all(np.isfinite(list(values.values()))):
        raise NonFiniteLossError(f"Non-finite loss values: {values}")
    report = LossReport(**values)
    logger.debug(f"Joint loss {report.total:.5f} (recon={report.recon:.4f}, cont={report.cont:.4f})")
    return total, report
