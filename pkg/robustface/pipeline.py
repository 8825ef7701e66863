"""
Training procedures.

* ``train_standard``: clean triplet-loss training.
* ``finetune_triplet_adversarial`` / ``train_triplet_adversarial_baseline``:
  triplet-loss adversarial training where the anchor is the clean image
  concatenated (along the batch) with its PGD perturbation.
* ``pretrain_contrastive_adversarial``: instance-wise adversarial NT-Xent
  pre-training on augmented views, optionally semi-supervised.

All procedures share the same state handling: the run-level generator drives
triplet sampling and batch order and is saved in every checkpoint, while
augmentation, attack and label-mask streams are derived from seeds and never
draw from it. Resuming from a checkpoint therefore continues the exact
trajectory of an uninterrupted run.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, assert_within_budget, pgd
from .augment import AugmentConfig, augment_batch
from .checkpoint import Checkpoint
from .dataset import FaceDataset, check_triplet_ready, make_label_mask, sample_triplets
from .errors import ContractError, EmptyDatasetError, LossError, ShapeError
from .evaluate import evaluate_model
from .losses import ContrastiveLossConfig, TripletLossConfig, nt_xent, paired_halves, triplet_loss
from .model import EncoderConfig, EncoderParams, forward_embed, forward_project, init_params
from .optim import Velocity, sgd_step
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

PROCEDURE_STANDARD = "triplet_standard"
PROCEDURE_TRIPLET_ADV = "triplet_adversarial"
PROCEDURE_CONTRASTIVE = "contrastive_adversarial"

# Fixed stream ids mixed into the run seed for derived generators.
LABEL_STREAM = 0x6C61626C
EVAL_STREAM = 0x6576616C


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    contrastive: ContrastiveLossConfig = field(default_factory=ContrastiveLossConfig)
    triplet: TripletLossConfig = field(default_factory=TripletLossConfig)
    label_fraction: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    triplets_per_epoch: Optional[int] = None
    eval_every: int = 0
    eval_triplets: int = 200

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 <= self.label_fraction <= 1:
            raise ValueError(f"label_fraction must lie in [0, 1], got {self.label_fraction}")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ValueError("checkpoint_every and eval_every must be >= 0")
        if self.triplets_per_epoch is not None and self.triplets_per_epoch < 1:
            raise ValueError(f"triplets_per_epoch must be >= 1, got {self.triplets_per_epoch}")
        if self.eval_triplets < 1:
            raise ValueError(f"eval_triplets must be >= 1, got {self.eval_triplets}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["encoder"] = self.encoder.to_dict()
        return data


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    wall_ms: float
    sa: Optional[float] = None
    ra: Optional[float] = None
    sra: Optional[float] = None

    def to_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "sa": self.sa,
            "ra": self.ra,
            "sra": self.sra,
            "wall_ms": self.wall_ms,
        }


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    logs: List[EpochLog]


EpochCallback = Callable[[EpochLog, Checkpoint], None]


def derive_seed(*parts: int) -> int:
    """A 32-bit seed mixed from integer parts, independent of any live generator."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def initial_checkpoint(encoder: EncoderConfig, seed: int) -> Checkpoint:
    """Freshly initialized parameters and the run generator in its seeded state."""
    return Checkpoint(
        config=encoder,
        params=init_params(encoder, seed),
        seed=int(seed),
        rng_state=np.random.default_rng(seed).bit_generator.state,
        epoch=0,
    )


# -- shared loop state --------------------------------------------------------

@dataclass
class _RunState:
    params: EncoderParams
    velocity: Velocity
    rng: np.random.Generator
    epoch: int


def _check_inputs(ds: FaceDataset, config: TrainConfig, init: Optional[Checkpoint]) -> None:
    encoder = init.config if init is not None else config.encoder
    if encoder.input_dim != ds.input_dim:
        raise ShapeError("encoder input vs dataset image size", (encoder.input_dim,), (ds.input_dim,))
    if init is not None and init.config != config.encoder:
        raise ContractError("init checkpoint was built for a different encoder configuration")


def _start(config: TrainConfig, init: Optional[Checkpoint], resume: bool, procedure: str) -> _RunState:
    if init is None:
        init = initial_checkpoint(config.encoder, config.seed)
    if not resume:
        return _RunState(init.params, {}, np.random.default_rng(config.seed), 0)

    previous = init.metadata.get("procedure")
    if previous != procedure:
        raise ContractError(f"cannot resume a '{previous}' checkpoint with the '{procedure}' procedure")
    if init.seed != config.seed:
        raise ContractError(f"checkpoint seed {init.seed} differs from run seed {config.seed}")
    rng = np.random.default_rng()
    rng.bit_generator.state = init.rng_state
    velocity = {k: np.array(v, dtype=np.float32) for k, v in init.optimizer_state.items()}
    logger.info("resuming '%s' at epoch %d", procedure, init.epoch)
    return _RunState(init.params, velocity, rng, int(init.epoch))


def _snapshot(state: _RunState, config: TrainConfig, procedure: str) -> Checkpoint:
    return Checkpoint(
        config=state.params.config,
        params=state.params,
        optimizer_state=dict(state.velocity),
        seed=int(config.seed),
        rng_state=state.rng.bit_generator.state,
        epoch=state.epoch,
        metadata={"procedure": procedure},
    )


def _validation(
    config: TrainConfig, val: Optional[FaceDataset]
) -> Tuple[Optional[FaceDataset], Optional[np.ndarray]]:
    if val is None or config.eval_every == 0:
        return None, None
    check_triplet_ready(val)
    pool = sample_triplets(val, config.eval_triplets, np.random.default_rng([config.seed, EVAL_STREAM]))
    return val, pool


def _run_epochs(
    procedure: str,
    config: TrainConfig,
    state: _RunState,
    epoch_step: Callable[[_RunState, int], List[float]],
    val: Optional[FaceDataset],
    on_epoch: Optional[EpochCallback],
) -> TrainResult:
    val, pool = _validation(config, val)
    logs: List[EpochLog] = []
    while state.epoch < config.epochs:
        epoch = state.epoch + 1
        started = time.perf_counter()
        losses = epoch_step(state, epoch)
        state.epoch = epoch
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        if not math.isfinite(mean_loss):
            raise LossError(f"epoch {epoch} produced no finite loss")
        sa = ra = sra = None
        if pool is not None and epoch % config.eval_every == 0:
            report = evaluate_model(state.params, val, pool, config.attack)
            sa, ra, sra = report.sa, report.ra, report.sra
        log = EpochLog(epoch, mean_loss, round((time.perf_counter() - started) * 1000.0, 3), sa, ra, sra)
        logs.append(log)
        logger.info("%s epoch %d/%d: loss %.6f", procedure, epoch, config.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(log, _snapshot(state, config, procedure))
    return TrainResult(_snapshot(state, config, procedure), logs)


# -- triplet training -----------------------------------------------------------

def _triplet_batches(ds: FaceDataset, config: TrainConfig, rng: np.random.Generator) -> List[np.ndarray]:
    total = config.triplets_per_epoch or len(ds)
    steps = math.ceil(total / config.batch_size)
    sizes = [min(config.batch_size, total - s * config.batch_size) for s in range(steps)]
    return [sample_triplets(ds, size, rng) for size in sizes]


def _triplet_inputs(ds: FaceDataset, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return ds.flat(batch[:, 0]), ds.flat(batch[:, 1]), ds.flat(batch[:, 2])


def _clean_triplet_loss(params: EncoderParams, a, p, n, config: TrainConfig) -> Tensor:
    return triplet_loss(
        forward_embed(params, Tensor(a)),
        forward_embed(params, Tensor(p)),
        forward_embed(params, Tensor(n)),
        config.triplet,
    )


def _update(state: _RunState, tape: Tape, loss: Tensor, config: TrainConfig, names: List[str]) -> float:
    grads = tape.backward(loss)
    state.params, state.velocity = sgd_step(
        state.params, grads, config.learning_rate, config.momentum, state.velocity, names
    )
    return loss.item()


def train_standard(
    ds: FaceDataset,
    config: TrainConfig,
    init: Optional[Checkpoint] = None,
    resume: bool = False,
    val: Optional[FaceDataset] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainResult:
    """Clean triplet-loss training; the projection head is not trained."""
    check_triplet_ready(ds)
    _check_inputs(ds, config, init)
    state = _start(config, init, resume, PROCEDURE_STANDARD)
    names = state.params.trainable_names(include_projector=False)

    def epoch_step(state: _RunState, epoch: int) -> List[float]:
        losses = []
        for batch in _triplet_batches(ds, config, state.rng):
            a, p, n = _triplet_inputs(ds, batch)
            with Tape() as tape:
                loss = _clean_triplet_loss(state.params, a, p, n, config)
            losses.append(_update(state, tape, loss, config, names))
        return losses

    return _run_epochs(PROCEDURE_STANDARD, config, state, epoch_step, val, on_epoch)


def _triplet_adversarial(
    ds: FaceDataset,
    config: TrainConfig,
    init: Checkpoint,
    resume: bool,
    val: Optional[FaceDataset],
    on_epoch: Optional[EpochCallback],
) -> TrainResult:
    check_triplet_ready(ds)
    _check_inputs(ds, config, init)
    if config.epochs == 0 and not resume:
        return TrainResult(init, [])
    state = _start(config, init, resume, PROCEDURE_TRIPLET_ADV)
    names = state.params.trainable_names(include_projector=False)
    dual = state.params.config.use_dual_norm

    def epoch_step(state: _RunState, epoch: int) -> List[float]:
        losses = []
        for step, batch in enumerate(_triplet_batches(ds, config, state.rng)):
            a, p, n = _triplet_inputs(ds, batch)
            params = state.params
            ep = forward_embed(params, Tensor(p)).detach()
            en = forward_embed(params, Tensor(n)).detach()

            def attack_loss(x_adv: Tensor) -> Tensor:
                return triplet_loss(forward_embed(params, x_adv, "adversarial"), ep, en, config.triplet)

            attack = config.attack.with_seed(derive_seed(config.attack.seed, epoch, step))
            delta = pgd(attack_loss, a, attack)
            assert_within_budget(a, delta, attack.epsilon)

            with Tape() as tape:
                if not delta.data.any() and not dual:
                    # Both anchor halves coincide and the batch mean equals the clean loss.
                    loss = _clean_triplet_loss(params, a, p, n, config)
                else:
                    anchors = T.concat([
                        forward_embed(params, Tensor(a), "clean"),
                        forward_embed(params, Tensor(a + delta.data), "adversarial"),
                    ])
                    pos = forward_embed(params, Tensor(p))
                    neg = forward_embed(params, Tensor(n))
                    loss = triplet_loss(anchors, T.concat([pos, pos]), T.concat([neg, neg]), config.triplet)
            losses.append(_update(state, tape, loss, config, names))
        return losses

    return _run_epochs(PROCEDURE_TRIPLET_ADV, config, state, epoch_step, val, on_epoch)


def finetune_triplet_adversarial(
    ds: FaceDataset,
    config: TrainConfig,
    init: Checkpoint,
    resume: bool = False,
    val: Optional[FaceDataset] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainResult:
    """
    Triplet-loss adversarial fine-tuning from ``init``.

    Per batch: PGD on the anchor against ``triplet_loss(f(x + delta), f(p), f(n))``,
    then one SGD step on the triplet loss of the anchor pair ``(x, x + delta)``
    stacked along the batch axis against duplicated positives and negatives.
    The projection head is carried along untouched.
    """
    return _triplet_adversarial(ds, config, init, resume, val, on_epoch)


def train_triplet_adversarial_baseline(
    ds: FaceDataset,
    config: TrainConfig,
    init: Checkpoint,
    resume: bool = False,
    val: Optional[FaceDataset] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainResult:
    """The long adversarial-training baseline: same loop as fine-tuning, started from a standard-trained model."""
    return _triplet_adversarial(ds, config, init, resume, val, on_epoch)


# -- contrastive pre-training ---------------------------------------------------

def _contrastive_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i: i + batch_size] for i in range(0, n, batch_size)]
    if batches and batches[-1].size < 2:
        logger.warning("dropping a tail batch of %d image(s); NT-Xent needs at least 2", batches[-1].size)
        batches.pop()
    return batches


def _identity_positives(visible: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """[2B x 2B] mask of row pairs that share a visible identity."""
    vis = np.concatenate([visible, visible])
    lab = np.concatenate([labels, labels])
    return vis[:, None] & vis[None, :] & (lab[:, None] == lab[None, :])


def pretrain_contrastive_adversarial(
    ds: FaceDataset,
    config: TrainConfig,
    init: Optional[Checkpoint] = None,
    resume: bool = False,
    val: Optional[FaceDataset] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainResult:
    """
    Adversarial contrastive pre-training.

    Per batch of B images: one augmented view per image, PGD on the views
    against NT-Xent over ``[proj(f(view)); proj(f(view + delta))]`` with the
    pairing i <-> B + i, then one SGD step on the same loss at the final delta.
    With ``label_fraction > 0`` rows of the same visible identity are extra
    positives. Labels are not read otherwise.
    """
    if config.batch_size < 2:
        raise LossError(f"contrastive pre-training needs batch_size >= 2, got {config.batch_size}")
    if len(ds) < 2:
        raise EmptyDatasetError("contrastive pre-training needs at least 2 images")
    _check_inputs(ds, config, init)
    state = _start(config, init, resume, PROCEDURE_CONTRASTIVE)
    names = state.params.trainable_names(include_projector=True)

    mask = None
    if config.label_fraction > 0:
        mask = make_label_mask(ds, config.label_fraction, np.random.default_rng([config.seed, LABEL_STREAM]))
        logger.info("semi-supervised: %d of %d labels visible", mask.visible_count, len(ds))

    def embed_project(params: EncoderParams, x: Tensor, branch: str) -> Tensor:
        return forward_project(params, forward_embed(params, x, branch))

    def epoch_step(state: _RunState, epoch: int) -> List[float]:
        losses = []
        for step, idx in enumerate(_contrastive_batches(len(ds), config.batch_size, state.rng)):
            params = state.params
            views = augment_batch(ds.images, idx, config.augment, config.seed, epoch)
            views = views.reshape(views.shape[0], -1).astype(np.float32)
            pairing = paired_halves(idx.size)
            extra = None
            if mask is not None:
                extra = _identity_positives(mask.flags[idx], ds.labels[idx])

            clean_z = embed_project(params, Tensor(views), "clean").detach()

            def attack_loss(x_adv: Tensor) -> Tensor:
                z = T.concat([clean_z, embed_project(params, x_adv, "adversarial")])
                return nt_xent(z, pairing, config.contrastive, extra)

            attack = config.attack.with_seed(derive_seed(config.attack.seed, epoch, step))
            delta = pgd(attack_loss, views, attack)
            assert_within_budget(views, delta, attack.epsilon)

            with Tape() as tape:
                z = T.concat([
                    embed_project(params, Tensor(views), "clean"),
                    embed_project(params, Tensor(views + delta.data), "adversarial"),
                ])
                loss = nt_xent(z, pairing, config.contrastive, extra)
            losses.append(_update(state, tape, loss, config, names))
        return losses

    return _run_epochs(PROCEDURE_CONTRASTIVE, config, state, epoch_step, val, on_epoch)

