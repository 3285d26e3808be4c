"""
Main experiment script.

    python3 main.py <mode> [--config PATH] [--seed N] [--epochs N] [--out DIR]
                           [--gan] [--potential PATH] [--checkpoint PATH]

Exit codes: 0 success, 2 usage / input error, 3 numerical divergence.
"""

import argparse
import sys

from config import config
from utils import experiments
from utils.errors import ConfigurationError, DivergenceError, InputError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def main(args):
    """
    Runs the experiment selected by `args.mode`. Returns the exit code.
    """
    try:
        merged = config.load_config(args.config)
        spec = experiments.build_spec(args.mode, merged,
                                      seed=args.seed,
                                      epochs=args.epochs,
                                      out=args.out,
                                      gan=True if args.gan else None,
                                      potential=args.potential,
                                      checkpoint=args.checkpoint)
        experiments.run(spec)
    except (ConfigurationError, InputError) as err:
        print(f'Error: {err}', file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as err:
        print(f'Diverged: {err}', file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog='branchflow',
        description='Multi-head PINNs and transfer learning for branched flow.')

    parser.add_argument('mode',
                        type=str,
                        choices=experiments.MODES,
                        help='Experiment to run.')

    parser.add_argument('--config',
                        type=str,
                        default=None,
                        help='JSON experiment file overlaid on the defaults.')

    parser.add_argument('--seed',
                        type=int,
                        default=None,
                        help='Seed for model init, collocation sampling and the discriminator.')

    parser.add_argument('--epochs',
                        type=int,
                        default=None,
                        help='Training epochs (base, classical and transfer).')

    parser.add_argument('--out',
                        type=str,
                        default=None,
                        help='Output directory.')

    parser.add_argument('--gan',
                        action='store_true',
                        help='Train with DEQGAN instead of the L2 residual loss.')

    parser.add_argument('--potential',
                        type=str,
                        default=None,
                        help='Potential JSON file to use instead of sampling one.')

    parser.add_argument('--checkpoint',
                        type=str,
                        default=None,
                        help='Checkpoint JSON file to read (or write for train-base).')

    return parser


if __name__ == "__main__":
    sys.exit(main(build_parser().parse_args()))
