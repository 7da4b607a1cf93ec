"""
Multi-temporal lip-audio memory: per-level multi-head key memories and a
shared value memory addressed from visual features.
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
import pandas as pd

from tensor import (
    Tensor, add, l2_normalize, matmul, randn, reshape, scale, softmax, swapaxes, COSINE_EPS
)
from temporal import parameter_seed

logger = logging.getLogger(__name__)

DEFAULT_HEADS = 4
DEFAULT_SLOTS = 32
DEFAULT_ALPHA = 8.0


class MemoryShapeError(ValueError):
    """Raised when features do not match a memory bank's dimensions."""
    pass


@dataclass
class AddressingScore:
    """Slot weights A of shape (..., T, h, N); each (t, head) row is a distribution."""
    scores: Tensor
    level: int

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.scores.shape

    def to_dataframe(self) -> pd.DataFrame:
        """Rows in lexicographic (t, head, slot) order for a single sequence."""
        values = self.scores.data
        if values.ndim == 4:
            if values.shape[0] != 1:
                raise MemoryShapeError(f"Export needs a single sequence, got batch of {values.shape[0]}")
            values = values[0]
        steps, heads, slots = values.shape
        t, head, slot = np.meshgrid(np.arange(steps), np.arange(heads), np.arange(slots), indexing='ij')
        return pd.DataFrame({
            't': t.ravel(), 'head': head.ravel(), 'slot': slot.ravel(),
            'score': values.astype(np.float64).ravel(),
        })

    def save_csv(self, path: str) -> str:
        """Write t,head,slot,score rows (six decimals); returns the path."""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        df = self.to_dataframe()
        df.to_csv(path, index=False, float_format='%.6f')
        logger.info(f"Saved {len(df)} addressing rows for level {self.level} to {path}")
        return path


class MemoryBank:
    """One level's trainable memories.

    keys: (h, N, D), values: (N, D), query: (D, hD), aggregate: (hD, D).
    """

    def __init__(self, level: int, dim: int, heads: int = DEFAULT_HEADS, slots: int = DEFAULT_SLOTS,
                 alpha: float = DEFAULT_ALPHA, seed: int = 0):
        if heads < 1:
            raise MemoryShapeError(f"Memory level {level} needs at least one head, got {heads}")
        if slots < 2:
            raise MemoryShapeError(f"Memory level {level} needs at least two slots, got {slots}")
        if alpha <= 0:
            raise MemoryShapeError(f"Scaling factor alpha must be positive, got {alpha}")
        self.level = level
        self.dim = dim
        self.heads = heads
        self.slots = slots
        self.alpha = float(alpha)

        init = 1.0 / np.sqrt(dim)
        shapes = {
            'keys': (heads, slots, dim),
            'values': (slots, dim),
            'query': (dim, heads * dim),
            'aggregate': (heads * dim, dim),
        }
        self._params: Dict[str, Tensor] = {}
        for field, shape in shapes.items():
            name = f"memory{level}.{field}"
            self._params[field] = randn(shape, seed=parameter_seed(seed, name), scale=init,
                                        requires_grad=True, name=name)

    @property
    def keys(self) -> Tensor:
        return self._params['keys']

    @property
    def values(self) -> Tensor:
        return self._params['values']

    @property
    def query(self) -> Tensor:
        return self._params['query']

    @property
    def aggregation(self) -> Tensor:
        return self._params['aggregate']

    def parameters(self) -> Dict[str, Tensor]:
        return {tensor.name: tensor for tensor in self._params.values()}

    def parameter_count(self) -> int:
        return int(np.sum([tensor.size for tensor in self._params.values()]))

    def address(self, f_v: Tensor) -> AddressingScore:
        """softmax over slots of alpha * cos(M_k[head, slot], q[head]) per timestep."""
        if f_v.ndim < 2 or f_v.shape[-1] != self.dim:
            raise MemoryShapeError(
                f"Memory level {self.level} expects features (..., T, {self.dim}), got {list(f_v.shape)}")
        lead = f_v.shape[:-1]
        queries = reshape(matmul(f_v, self.query), lead + (self.heads, 1, self.dim))
        queries = l2_normalize(queries, COSINE_EPS)
        keys = swapaxes(l2_normalize(self.keys, COSINE_EPS), -1, -2)
        similarity = reshape(matmul(queries, keys), lead + (self.heads, self.slots))
        return AddressingScore(scores=softmax(scale(similarity, self.alpha)), level=self.level)

    def recall(self, score: AddressingScore) -> Tensor:
        """(..., T, h, N) weights over the shared value memory -> (..., T, h, D)."""
        if score.shape[-2:] != (self.heads, self.slots):
            raise MemoryShapeError(
                f"Addressing shape {list(score.shape)} does not match {self.heads} heads x {self.slots} slots")
        return matmul(score.scores, self.values)

    def aggregate(self, recalled: Tensor) -> Tensor:
        """Concatenate heads and project hD -> D."""
        if recalled.shape[-2:] != (self.heads, self.dim):
            raise MemoryShapeError(
                f"Recalled shape {list(recalled.shape)} does not match {self.heads} heads x {self.dim}")
        flat = reshape(recalled, recalled.shape[:-2] + (self.heads * self.dim,))
        return matmul(flat, self.aggregation)

    def read(self, f_v: Tensor) -> Tuple[Tensor, AddressingScore]:
        """Address, recall and aggregate: the audio feature f_hat_a aligned with f_v."""
        score = self.address(f_v)
        return self.aggregate(self.recall(score)), score


def fuse(f_v: Tensor, f_hat_a: Tensor) -> Tensor:
    """Summation fusion of visual features and recalled audio features."""
    if f_v.shape != f_hat_a.shape:
        raise MemoryShapeError(f"Cannot fuse shapes {list(f_v.shape)} and {list(f_hat_a.shape)}")
    return add(f_v, f_hat_a)


def bank_parameter_count(dim: int, heads: int, slots: int) -> int:
    """h*N*D + N*D + D*hD + hD*D."""
    return heads * slots * dim + slots * dim + 2 * dim * heads * dim
