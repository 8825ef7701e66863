import argparse
import sys
from fractions import Fraction

TRAIN_MODES = ("standard", "triplet-adv", "pretrain", "finetune", "pretrain-semi")
VARIANTS = ("attacked_positive", "attacked_anchor")


class RobustFaceArgumentParser(argparse.ArgumentParser):
    """Bad arguments exit with 1, the status shared with configuration errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class CustomFormatter(argparse.HelpFormatter):
    """Wider help columns; the subcommand list and attack group start on a fresh line."""

    def __init__(self, prog):
        super().__init__(prog, indent_increment=2, max_help_position=40, width=96)

    def _format_action(self, action):
        help_text = super()._format_action(action)
        if isinstance(action, argparse._SubParsersAction):
            help_text = '\n' + help_text
        return help_text

    def _fill_text(self, text, width, indent):
        # Descriptions keep their explicit line breaks (mode tables, examples).
        return '\n'.join(super(CustomFormatter, self)._fill_text(part, width, indent)
                         for part in text.split('\n'))


def budget(text: str) -> float:
    """Accept plain numbers and pixel fractions such as ``8/255``."""
    try:
        value = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or fraction: '{text}'") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _common_parser():
    common = RobustFaceArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH',
                        help='JSON run configuration (defaults are filled in for missing keys)')
    common.add_argument('--seed', type=int, default=None, metavar='INT',
                        help='Run seed (overrides the config file)')
    common.add_argument('--out', default=None, metavar='DIR',
                        help='Output directory')
    common.add_argument('--deterministic', action=argparse.BooleanOptionalAction, default=True,
                        help='Pin BLAS/OpenMP to one thread for bitwise reproducible runs')
    common.add_argument('-q', '--quiet', action='store_true',
                        help='Only log warnings and errors')
    common.add_argument('-v', '--verbose', action='store_true',
                        help='Log per-step detail')
    return common


def _attack_arguments(parser):
    group = parser.add_argument_group('attack')
    group.add_argument('--epsilon', type=budget, default=None, metavar='EPS',
                       help='L-infinity budget, e.g. 8/255')
    group.add_argument('--alpha', type=budget, default=None, metavar='STEP',
                       help='PGD step size, e.g. 2/255')
    group.add_argument('--iterations', type=int, default=None, metavar='N',
                       help='PGD iterations')
    group.add_argument('--random-start', action=argparse.BooleanOptionalAction, default=None,
                       help='Start PGD from a uniform point in the budget ball')
    group.add_argument('--attack-seed', type=int, default=None, metavar='INT',
                       help='Seed of the random start')


def build_argparser():
    parser = RobustFaceArgumentParser(
        prog='robustface',
        description='Adversarially robust face-embedding training: contrastive adversarial '
                    'pre-training, triplet-loss adversarial fine-tuning and SA/RA evaluation.',
        formatter_class=CustomFormatter,
    )
    common = _common_parser()
    subparsers = parser.add_subparsers(dest='subcommand', title='commands')

    synth_parser = subparsers.add_parser(
        'synth', parents=[common],
        help='Write a synthetic face-like dataset with a manifest.',
        description='Generate separable synthetic identities and write images plus manifest.csv.',
        formatter_class=CustomFormatter
    )
    synth_parser.add_argument('--identities', type=int, default=20, metavar='K',
                              help='Number of identities')
    synth_parser.add_argument('--images-per-identity', type=int, default=10, metavar='N',
                              help='Images per identity')
    synth_parser.add_argument('--height', type=int, default=16, metavar='H',
                              help='Image height')
    synth_parser.add_argument('--width', type=int, default=16, metavar='W',
                              help='Image width')
    synth_parser.add_argument('--noise', type=float, default=0.05, metavar='SIGMA',
                              help='Gaussian pixel noise')
    synth_parser.add_argument('--format', choices=['pgm', 'png'], default='pgm',
                              help='Image file format')
    synth_parser.add_argument('--force', action='store_true',
                              help='Write into a non-empty directory')

    train_parser = subparsers.add_parser(
        'train', parents=[common],
        help='Run one training procedure into a run directory.',
        description='Train an encoder; the run directory receives config.json, log.jsonl, '
                    'epoch checkpoints and run_index.json.',
        formatter_class=CustomFormatter
    )
    train_parser.add_argument('mode', choices=TRAIN_MODES,
                              help='Training procedure')
    train_parser.add_argument('--data', metavar='MANIFEST',
                              help='Dataset manifest.csv (overrides dataset.manifest)')
    train_parser.add_argument('--init', metavar='CKPT',
                              help='Initial checkpoint (required for finetune and triplet-adv)')
    train_parser.add_argument('--resume', action='store_true',
                              help='Continue the run that wrote --init')
    train_parser.add_argument('--epochs', type=int, default=None, metavar='N',
                              help='Total epochs (overrides train.epochs)')
    train_parser.add_argument('--label-fraction', type=float, default=None, metavar='F',
                              help='Share of visible labels during pre-training')
    _attack_arguments(train_parser)

    eval_parser = subparsers.add_parser(
        'evaluate', parents=[common],
        help='Report SA, RA and SA&RA of a checkpoint.',
        description='Evaluate a checkpoint on a seeded triplet pool from the validation split.',
        formatter_class=CustomFormatter
    )
    eval_parser.add_argument('checkpoint', metavar='CKPT',
                             help='Checkpoint to evaluate')
    eval_parser.add_argument('--data', metavar='MANIFEST',
                             help='Dataset manifest.csv (overrides dataset.manifest)')
    eval_parser.add_argument('--triplets', type=int, default=1000, metavar='N',
                             help='Size of the evaluation triplet pool')
    eval_parser.add_argument('--split', choices=['val', 'all'], default='val',
                             help='Draw triplets from the validation split or the whole dataset')
    eval_parser.add_argument('--variant', choices=VARIANTS, default='attacked_positive',
                             help='Attack the positive (default) or the anchor')
    eval_parser.add_argument('--fgsm', action='store_true',
                             help='Single-step attack with step size epsilon')
    eval_parser.add_argument('--sweep', type=budget, nargs='+', default=None, metavar='EPS',
                             help='Evaluate at each of these budgets')
    eval_parser.add_argument('--transfer-from', metavar='CKPT',
                             help='Craft perturbations on this checkpoint instead')
    _attack_arguments(eval_parser)

    attack_parser = subparsers.add_parser(
        'attack', parents=[common],
        help='Write adversarial versions of dataset images with a budget audit.',
        description='Instance-wise PGD on every image; writes x + delta and audit.json.',
        formatter_class=CustomFormatter
    )
    attack_parser.add_argument('checkpoint', metavar='CKPT',
                               help='Checkpoint to attack')
    attack_parser.add_argument('--data', metavar='MANIFEST',
                               help='Dataset manifest.csv (overrides dataset.manifest)')
    attack_parser.add_argument('--batch-size', type=int, default=32, metavar='B',
                               help='Images per attack batch')
    _attack_arguments(attack_parser)

    return parser
