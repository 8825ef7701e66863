"""
Training objectives: NT-Xent contrastive loss and the triplet margin loss.

Both are ordinary taped functions of their inputs, so they serve as training
losses and as PGD attack objectives alike.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import LossError, ShapeError
from .tensor import Tensor

DISTANCES = ("squared_euclidean", "euclidean", "cosine_distance")


@dataclass(frozen=True)
class ContrastiveLossConfig:
    temperature: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.2
    distance: str = "squared_euclidean"

    def __post_init__(self):
        if not self.margin >= 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got '{self.distance}'")


def paired_halves(n: int) -> np.ndarray:
    """Pairing i <-> n + i over 2n rows."""
    return np.concatenate([np.arange(n, 2 * n), np.arange(n)])


def _check_pairing(pairing: Sequence[int], rows: int) -> np.ndarray:
    pairing = np.asarray(pairing, dtype=np.int64)
    if pairing.shape != (rows,):
        raise LossError(f"pairing has {pairing.shape[0] if pairing.ndim else 0} entries for {rows} rows")
    if np.any(pairing < 0) or np.any(pairing >= rows):
        raise LossError("pairing index out of range")
    idx = np.arange(rows)
    if np.any(pairing == idx) or np.any(pairing[pairing] != idx):
        raise LossError("pairing is not a perfect matching")
    return pairing


def nt_xent(
    z: Tensor,
    pairing: Sequence[int],
    config: ContrastiveLossConfig = ContrastiveLossConfig(),
    extra_positives: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Mean over all 2N anchors of
    ``-log(exp(sim(z_i, z_j(i))/t) / sum_{k != i} exp(sim(z_i, z_k)/t))``.

    ``extra_positives`` is an optional boolean [2N x 2N] matrix adding
    same-identity rows to an anchor's positive set; the per-anchor loss then
    averages the term above over that set.
    """
    if not config.temperature > 0:
        raise LossError(f"temperature must be > 0, got {config.temperature}")
    if z.ndim != 2:
        raise ShapeError("nt_xent", z.shape)
    rows = z.shape[0]
    if rows == 0 or rows % 2:
        raise LossError(f"nt_xent needs 2N rows with N >= 1, got {rows}")
    pairing = _check_pairing(pairing, rows)

    off_diagonal = ~np.eye(rows, dtype=bool)
    positives = np.zeros((rows, rows), dtype=bool)
    positives[np.arange(rows), pairing] = True
    if extra_positives is not None:
        extra = np.asarray(extra_positives, dtype=bool)
        if extra.shape != (rows, rows):
            raise ShapeError("nt_xent extra_positives", extra.shape, (rows, rows))
        positives |= extra & off_diagonal
    weights = positives / positives.sum(axis=1, keepdims=True)

    unit = T.l2_normalize(z)
    logits = T.scale(T.matmul(unit, T.transpose(unit)), 1.0 / config.temperature)
    denominator = T.logsumexp(logits, axis=1, mask=off_diagonal)
    numerator = T.sum(T.mul(logits, Tensor(weights)), axis=1)
    return T.mean(T.sub(denominator, numerator))


def distance(a: Tensor, b: Tensor, kind: str = "squared_euclidean") -> Tensor:
    """Row-wise distance between two [b x d] batches, shape [b]."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError("distance", a.shape, b.shape)
    if kind == "cosine_distance":
        return T.sub(1.0, T.cosine_sim(a, b))
    diff = T.sub(a, b)
    squared = T.sum(T.mul(diff, diff), axis=1)
    if kind == "squared_euclidean":
        return squared
    if kind == "euclidean":
        return T.sqrt(T.add(squared, 1e-12))
    raise LossError(f"unknown distance '{kind}'")


def triplet_loss(a: Tensor, p: Tensor, n: Tensor, config: TripletLossConfig = TripletLossConfig()) -> Tensor:
    """Mean over the batch of ``max(0, D(a, p) - D(a, n) + margin)``."""
    if not (a.shape == p.shape == n.shape) or a.ndim != 2:
        raise ShapeError("triplet_loss", a.shape, p.shape if a.shape != p.shape else n.shape)
    gap = T.sub(distance(a, p, config.distance), distance(a, n, config.distance))
    return T.mean(T.relu(T.add(gap, config.margin)))
