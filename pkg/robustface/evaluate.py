"""
Triplet-ranking accuracy on clean and adversarially perturbed triplets.

A triplet (a, p, n) counts as correct when ``D(f(a), f(p)) < D(f(a), f(n))``
with D the squared Euclidean distance between unit embeddings; ties are
incorrect. Robust accuracy replaces the positive with an attacked copy of the
anchor, so a model whose embedding moves little under attack keeps
``D(a, a + delta)`` small.
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .attacks import AttackConfig, assert_within_budget, pgd
from .dataset import FaceDataset, Triplet
from .errors import ContractError, EmptyDatasetError
from .losses import triplet_loss
from .model import EncoderParams, forward_embed
from .tensor import Tensor

logger = logging.getLogger(__name__)

ATTACKED_POSITIVE = "attacked_positive"
ATTACKED_ANCHOR = "attacked_anchor"
VARIANTS = (ATTACKED_POSITIVE, ATTACKED_ANCHOR)

Embedder = Callable[[np.ndarray], np.ndarray]
Model = Union[EncoderParams, Embedder]
Triplets = Union[np.ndarray, Sequence[Triplet]]


@dataclass(frozen=True)
class PoolResult:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    @classmethod
    def from_accuracy(cls, accuracy: float, total: int) -> "PoolResult":
        return cls(int(round(accuracy * total)), int(total))


@dataclass(frozen=True)
class MetricsReport:
    sa: float
    ra: float
    sra: float
    n_triplets: int
    attack: AttackConfig
    tags: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "sa": self.sa,
            "ra": self.ra,
            "sra": self.sra,
            "n_triplets": self.n_triplets,
            "attack": asdict(self.attack),
            "tags": list(self.tags),
        }


def as_index_array(triplets: Triplets) -> np.ndarray:
    if isinstance(triplets, np.ndarray):
        arr = triplets.astype(np.int64)
    else:
        arr = np.array([(t.anchor_idx, t.positive_idx, t.negative_idx) for t in triplets], dtype=np.int64)
    if arr.size == 0:
        raise EmptyDatasetError("triplet pool is empty")
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractError(f"triplets must be [n x 3] indices, got shape {arr.shape}")
    return arr


def embedder(model: Model) -> Embedder:
    """Clean-branch embedding function for a parameter set; callables pass through."""
    if isinstance(model, EncoderParams):
        return lambda x: forward_embed(model, Tensor(x), "clean").data
    return model


def _score(ea: np.ndarray, ep: np.ndarray, en: np.ndarray) -> PoolResult:
    d_ap = np.sum((ea - ep) ** 2, axis=1)
    d_an = np.sum((ea - en) ** 2, axis=1)
    return PoolResult(int(np.count_nonzero(d_ap < d_an)), int(ea.shape[0]))


def clean_pool(model: Model, triplets: Triplets, ds: FaceDataset) -> PoolResult:
    idx = as_index_array(triplets)
    f = embedder(model)
    return _score(f(ds.flat(idx[:, 0])), f(ds.flat(idx[:, 1])), f(ds.flat(idx[:, 2])))


def triplet_accuracy(model: Model, triplets: Triplets, ds: FaceDataset) -> float:
    """Fraction of clean triplets ranked correctly."""
    return clean_pool(model, triplets, ds).accuracy


def perturb_anchors(
    params: EncoderParams,
    triplets: Triplets,
    ds: FaceDataset,
    attack: AttackConfig,
    variant: str = ATTACKED_POSITIVE,
) -> np.ndarray:
    """PGD perturbations of every anchor, [n x input_dim], audited against the budget."""
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant '{variant}', expected one of {VARIANTS}")
    idx = as_index_array(triplets)
    a = ds.flat(idx[:, 0])
    en = forward_embed(params, Tensor(ds.flat(idx[:, 2]))).detach()
    if variant == ATTACKED_POSITIVE:
        reference = forward_embed(params, Tensor(a)).detach()

        def loss(x_adv: Tensor) -> Tensor:
            return triplet_loss(reference, forward_embed(params, x_adv), en)
    else:
        ep = forward_embed(params, Tensor(ds.flat(idx[:, 1]))).detach()

        def loss(x_adv: Tensor) -> Tensor:
            return triplet_loss(forward_embed(params, x_adv), ep, en)

    delta = pgd(loss, a, attack)
    assert_within_budget(a, delta, attack.epsilon)
    return delta.data


def robust_pool(
    model: Model,
    triplets: Triplets,
    ds: FaceDataset,
    attack: AttackConfig,
    variant: str = ATTACKED_POSITIVE,
    attack_model: Optional[EncoderParams] = None,
) -> PoolResult:
    source = attack_model if attack_model is not None else model
    if not isinstance(source, EncoderParams):
        raise ContractError("attacks need a parameter set; pass attack_model for a wrapped embedder")
    idx = as_index_array(triplets)
    delta = perturb_anchors(source, idx, ds, attack, variant)
    f = embedder(model)
    a = ds.flat(idx[:, 0])
    adv = a + delta
    if variant == ATTACKED_POSITIVE:
        # Same batch shape for both halves, so a zero delta gives D(a, a + delta) == 0 exactly.
        return _score(f(a), f(adv), f(ds.flat(idx[:, 2])))
    return _score(f(adv), f(ds.flat(idx[:, 1])), f(ds.flat(idx[:, 2])))


def robust_triplet_accuracy(
    model: Model,
    triplets: Triplets,
    ds: FaceDataset,
    attack: AttackConfig,
    variant: str = ATTACKED_POSITIVE,
    attack_model: Optional[EncoderParams] = None,
) -> float:
    """
    Accuracy on (a, a + delta, n) where delta is PGD on the anchor pushing its
    embedding away from the clean anchor. ``variant="attacked_anchor"`` scores
    (a + delta, p, n) instead. With ``attack_model`` the perturbation is crafted
    on that model and transferred.
    """
    return robust_pool(model, triplets, ds, attack, variant, attack_model).accuracy


def combined_accuracy(sa_pool: PoolResult, ra_pool: PoolResult) -> float:
    """Correct-count weighted accuracy over the union of both pools."""
    if sa_pool.total == 0 or ra_pool.total == 0:
        raise EmptyDatasetError("combined accuracy needs two non-empty pools")
    return (sa_pool.correct + ra_pool.correct) / (sa_pool.total + ra_pool.total)


def evaluate_model(
    model: Model,
    ds: FaceDataset,
    triplets: Triplets,
    attack: AttackConfig,
    variant: str = ATTACKED_POSITIVE,
    attack_model: Optional[EncoderParams] = None,
    tags: Sequence[str] = (),
) -> MetricsReport:
    idx = as_index_array(triplets)
    clean = clean_pool(model, idx, ds)
    robust = robust_pool(model, idx, ds, attack, variant, attack_model)
    tags = list(tags)
    if variant != ATTACKED_POSITIVE:
        tags.append(variant)
    if attack_model is not None and "transfer" not in tags:
        tags.append("transfer")
    report = MetricsReport(
        sa=clean.accuracy,
        ra=robust.accuracy,
        sra=combined_accuracy(clean, robust),
        n_triplets=int(idx.shape[0]),
        attack=attack,
        tags=tuple(tags),
    )
    logger.debug("eps=%.6f sa=%.4f ra=%.4f sra=%.4f", attack.epsilon, report.sa, report.ra, report.sra)
    return report


def sweep_attack(attack: AttackConfig, epsilon: float) -> AttackConfig:
    """The attack at another budget, step size scaled in proportion."""
    if attack.epsilon > 0 and epsilon > 0:
        return replace(attack, epsilon=epsilon, alpha=attack.alpha * epsilon / attack.epsilon)
    return replace(attack, epsilon=epsilon)


def robustness_curve(
    model: Model,
    ds: FaceDataset,
    triplets: Triplets,
    epsilons: Sequence[float],
    attack: AttackConfig,
    variant: str = ATTACKED_POSITIVE,
    attack_model: Optional[EncoderParams] = None,
    tags: Sequence[str] = (),
    fgsm: bool = False,
) -> List[MetricsReport]:
    """One report per budget, all on the same triplet pool; ``fgsm`` turns each attack into a single step."""
    reports = []
    for eps in epsilons:
        swept = sweep_attack(attack, eps)
        if fgsm:
            swept = swept.as_fgsm()
        reports.append(evaluate_model(model, ds, triplets, swept, variant, attack_model, (*tags, "sweep")))
    return reports
