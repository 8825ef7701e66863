import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .config import apply_overrides, get_config, print_progress, print_warning, resolve_mode
from .. import tensor as T
from ..attacks import AttackConfig, assert_within_budget, pgd
from ..augment import AugmentConfig
from ..checkpoint import Checkpoint, load_checkpoint
from ..dataset import (
    FaceDataset,
    filter_min_images,
    generate_synthetic,
    load_dataset,
    sample_triplets,
    split_train_val,
    write_dataset,
)
from ..errors import ConfigError, ShapeError, UsageError
from ..evaluate import MetricsReport, evaluate_model, robustness_curve
from ..imageio import quantize, write_image
from ..losses import ContrastiveLossConfig, TripletLossConfig, nt_xent, paired_halves
from ..model import EncoderConfig, EncoderParams, forward_embed, forward_project
from ..pipeline import (
    EVAL_STREAM,
    TrainConfig,
    derive_seed,
    finetune_triplet_adversarial,
    pretrain_contrastive_adversarial,
    train_standard,
    train_triplet_adversarial_baseline,
)
from ..rundir import RunDirectory
from ..tensor import Tensor

logger = logging.getLogger(__name__)

SPLIT_STREAM = 0x73706C74
INIT_REQUIRED = ('triplet-adv', 'finetune')
QUANTIZATION_BOUND = 1.0 / 255.0


# -- config materialization -----------------------------------------------------

def _build(pointer: str, cls, **kwargs):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(pointer, str(e)) from None


def encoder_config(cfg: Dict[str, Any]) -> EncoderConfig:
    model = dict(cfg['model'])
    if model['input_dim'] is None:
        raise ConfigError('/model/input_dim', 'unresolved; load a dataset first')
    model['hidden_dims'] = tuple(model['hidden_dims'])
    return _build('/model', EncoderConfig, **model)


def attack_config(cfg: Dict[str, Any]) -> AttackConfig:
    return _build('/attack', AttackConfig, **cfg['attack'])


def train_config(cfg: Dict[str, Any]) -> TrainConfig:
    return _build(
        '/train', TrainConfig,
        encoder=encoder_config(cfg),
        attack=attack_config(cfg),
        augment=_build('/augment', AugmentConfig, **cfg['augment']),
        contrastive=_build('/contrastive', ContrastiveLossConfig, **cfg['contrastive']),
        triplet=_build('/triplet', TripletLossConfig, **cfg['triplet']),
        seed=cfg['seed'],
        **cfg['train'],
    )


def load_run_config(args, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Config file merged with defaults, then the common and attack flags on top."""
    overrides = {
        '/seed': args.seed,
        '/run_dir': args.out,
        '/dataset/manifest': getattr(args, 'data', None),
        '/attack/epsilon': getattr(args, 'epsilon', None),
        '/attack/alpha': getattr(args, 'alpha', None),
        '/attack/iterations': getattr(args, 'iterations', None),
        '/attack/random_start': getattr(args, 'random_start', None),
        '/attack/seed': getattr(args, 'attack_seed', None),
    }
    overrides.update(extra or {})
    return apply_overrides(get_config(args.config), overrides)


# -- datasets -------------------------------------------------------------------

def _manifest(cfg: Dict[str, Any]) -> str:
    manifest = cfg['dataset']['manifest']
    if not manifest:
        raise UsageError("no dataset given; pass --data MANIFEST or set dataset.manifest")
    return manifest


def load_filtered(cfg: Dict[str, Any]) -> FaceDataset:
    return filter_min_images(load_dataset(_manifest(cfg)), cfg['dataset']['min_images'])


def split(cfg: Dict[str, Any], ds: FaceDataset) -> Tuple[FaceDataset, Optional[FaceDataset]]:
    """(train, validation); validation is None when empty."""
    fraction = cfg['dataset']['val_fraction']
    if not fraction:
        return ds, None
    rng = np.random.default_rng([cfg['seed'], SPLIT_STREAM])
    try:
        train, val = split_train_val(ds, fraction, rng)
    except ValueError as e:
        raise ConfigError('/dataset/val_fraction', str(e)) from None
    return train, (val if len(val) else None)


def _check_compatible(config: EncoderConfig, ds: FaceDataset, what: str) -> None:
    if config.input_dim != ds.input_dim:
        raise ShapeError(f"{what} input vs dataset images {ds.image_shape}", (config.input_dim,), (ds.input_dim,))


# -- synth ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if not args.out:
        raise UsageError("synth needs --out DIR")
    if args.identities < 2:
        raise UsageError(f"--identities must be >= 2 for triplet sampling, got {args.identities}")
    if args.images_per_identity < 2:
        raise UsageError(f"--images-per-identity must be >= 2 for triplet sampling, got {args.images_per_identity}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty (use --force to write into it)")

    ds = generate_synthetic(
        num_identities=args.identities,
        images_per_identity=args.images_per_identity,
        height=args.height,
        width=args.width,
        noise_sigma=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = write_dataset(ds, out, args.format)
    print_progress(f"Wrote {len(ds)} images of {ds.num_identities} identities; manifest: {manifest}", args.quiet)
    return 0


# -- train ------------------------------------------------------------------------

def cmd_train(args) -> int:
    mode = args.mode
    if mode in INIT_REQUIRED and not args.init:
        raise UsageError(f"train {mode} requires --init CKPT")
    if args.resume and not args.init:
        raise UsageError("--resume needs --init pointing at the run's last checkpoint")

    cfg = load_run_config(args, {
        '/train/epochs': args.epochs,
        '/train/label_fraction': args.label_fraction,
    })
    cfg = resolve_mode(cfg, mode)
    if not cfg['run_dir']:
        raise UsageError("train needs --out DIR or run_dir in the config")

    train_ds, val = split(cfg, load_filtered(cfg))
    init: Optional[Checkpoint] = None
    if args.init:
        init = load_checkpoint(args.init)
        _check_compatible(init.config, train_ds, "checkpoint")
        if init.config.to_dict() != cfg['model']:
            logger.info("model section taken from %s", args.init)
        cfg['model'] = init.config.to_dict()
    elif cfg['model']['input_dim'] is None:
        cfg['model']['input_dim'] = train_ds.input_dim
    _check_compatible(encoder_config(cfg), train_ds, "model")
    config = train_config(cfg)

    with RunDirectory(cfg['run_dir']) as run:
        run.write_config(cfg)
        run.reset_log(init.epoch if args.resume else None)

        def on_epoch(log, ckpt):
            run.append_log(log.to_record())
            if config.checkpoint_every and log.epoch % config.checkpoint_every == 0:
                run.write_checkpoint(ckpt)

        if mode == 'standard':
            result = train_standard(train_ds, config, init, args.resume, val, on_epoch)
        elif mode == 'triplet-adv':
            result = train_triplet_adversarial_baseline(train_ds, config, init, args.resume, val, on_epoch)
        elif mode == 'finetune':
            result = finetune_triplet_adversarial(train_ds, config, init, args.resume, val, on_epoch)
        else:
            result = pretrain_contrastive_adversarial(train_ds, config, init, args.resume, val, on_epoch)
        final = run.write_checkpoint(result.checkpoint)

    if result.logs:
        print_progress(
            f"{mode}: {len(result.logs)} epoch(s), final loss {result.logs[-1].loss:.6f}; checkpoint {final}",
            args.quiet,
        )
    else:
        print_warning(f"{mode}: no epochs to run; checkpoint {final}", args.quiet)
    return 0


# -- evaluate ---------------------------------------------------------------------

def format_table(reports: List[MetricsReport], sweep: bool = False) -> str:
    if not sweep:
        report = reports[0]
        rows = [("SA", report.sa), ("RA", report.ra), ("SA&RA", report.sra)]
        return "\n".join(f"{name:<8}{value:.4f}" for name, value in rows)
    lines = [f"{'epsilon':<12}{'SA':>8}{'RA':>8}{'SA&RA':>8}"]
    for r in reports:
        lines.append(f"{r.attack.epsilon:<12.6f}{r.sa:>8.4f}{r.ra:>8.4f}{r.sra:>8.4f}")
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_filtered(cfg)
    _, val = split(cfg, ds)
    if args.split == 'val' and val is None:
        print_warning("validation split is empty; evaluating on the whole dataset", args.quiet)
    eval_ds = val if args.split == 'val' and val is not None else ds
    _check_compatible(ckpt.config, eval_ds, "checkpoint")
    if args.triplets < 1:
        raise UsageError(f"--triplets must be >= 1, got {args.triplets}")

    pool = sample_triplets(eval_ds, args.triplets, np.random.default_rng([cfg['seed'], EVAL_STREAM]))
    base = attack_config(cfg)
    attack = base.as_fgsm() if args.fgsm else base
    tags = []
    if args.fgsm:
        tags.append('fgsm')
    source = None
    if args.transfer_from:
        source_ckpt = load_checkpoint(args.transfer_from)
        _check_compatible(source_ckpt.config, eval_ds, "transfer checkpoint")
        source = source_ckpt.params

    if args.sweep:
        reports = robustness_curve(
            ckpt.params, eval_ds, pool, args.sweep, base, args.variant, source, tags, fgsm=args.fgsm
        )
    else:
        reports = [evaluate_model(ckpt.params, eval_ds, pool, attack, args.variant, source, tags)]

    print(format_table(reports, sweep=bool(args.sweep)))
    if args.out:
        document: Dict[str, Any] = {'seed': cfg['seed'], 'split': args.split, 'variant': args.variant}
        if args.sweep:
            document['sweep'] = [r.to_dict() for r in reports]
        else:
            document.update(reports[0].to_dict())
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / 'metrics.json', 'w', encoding='utf-8') as f:
            json.dump(document, f, indent=2, sort_keys=True)
            f.write("\n")
        print_progress(f"Metrics written to {out / 'metrics.json'}", args.quiet)
    return 0


# -- attack -----------------------------------------------------------------------

def _attack_batches(n: int, batch_size: int) -> List[np.ndarray]:
    batches = [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def instance_attack(
    params: EncoderParams, x: np.ndarray, attack: AttackConfig, contrastive: ContrastiveLossConfig
) -> np.ndarray:
    """PGD maximizing NT-Xent between each image and its own perturbation."""
    pairing = paired_halves(x.shape[0])
    clean_z = forward_project(params, forward_embed(params, Tensor(x))).detach()

    def loss(x_adv: Tensor) -> Tensor:
        z = T.concat([clean_z, forward_project(params, forward_embed(params, x_adv))])
        return nt_xent(z, pairing, contrastive)

    return pgd(loss, x, attack).data


def _adv_path(rel: str, index: int) -> Path:
    rel_path = Path(rel) if rel else Path(f"image_{index:05d}.pgm")
    return rel_path.with_name(f"{rel_path.stem}.adv{rel_path.suffix}")


def cmd_attack(args) -> int:
    if not args.out:
        raise UsageError("attack needs --out DIR")
    if args.batch_size < 2:
        raise UsageError(f"--batch-size must be >= 2, got {args.batch_size}")
    cfg = load_run_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(_manifest(cfg))
    _check_compatible(ckpt.config, ds, "checkpoint")
    attack = attack_config(cfg)
    contrastive = _build('/contrastive', ContrastiveLossConfig, **cfg['contrastive'])

    x_all = ds.flat()
    deltas = []
    for b, idx in enumerate(_attack_batches(len(ds), args.batch_size)):
        seeded = attack.with_seed(derive_seed(attack.seed, 0, b))
        deltas.append(instance_attack(ckpt.params, x_all[idx], seeded, contrastive))
    delta_all = np.concatenate(deltas) if deltas else np.zeros_like(x_all)

    # Audit every image before anything is written.
    budgets = [assert_within_budget(x_all[i], delta_all[i], attack.epsilon) for i in range(len(ds))]

    out = Path(args.out)
    records = []
    rows = []
    for i in range(len(ds)):
        adv = (x_all[i] + delta_all[i]).reshape(ds.image_shape)
        levels = quantize(adv)
        rel = _adv_path(ds.paths[i], i)
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_image(out / rel, levels)
        q_err = float(np.max(np.abs(levels.astype(np.float64) / 255.0 - adv[..., 0].astype(np.float64))))
        records.append({
            'path': rel.as_posix(),
            'source': ds.paths[i],
            'max_abs_delta': budgets[i],
            'quantization_error': q_err,
        })
        rows.append((rel.as_posix(), int(ds.labels[i])))

    with open(out / 'manifest.csv', 'w', encoding='utf-8', newline='') as f:
        f.write("path,identity\n")
        f.writelines(f"{path},{label}\n" for path, label in rows)
    audit = {
        'epsilon': attack.epsilon,
        'alpha': attack.alpha,
        'iterations': attack.iterations,
        'random_start': attack.random_start,
        'seed': attack.seed,
        'max_abs_delta': max(budgets) if budgets else 0.0,
        'max_quantization_error': max((r['quantization_error'] for r in records), default=0.0),
        'quantization_bound': QUANTIZATION_BOUND,
        'images': records,
    }
    with open(out / 'audit.json', 'w', encoding='utf-8') as f:
        json.dump(audit, f, indent=2, sort_keys=True)
        f.write("\n")
    print_progress(
        f"Wrote {len(records)} adversarial images to {out} (max |delta| {audit['max_abs_delta']:.6f} "
        f"<= epsilon {attack.epsilon:.6f})",
        args.quiet,
    )
    return 0
