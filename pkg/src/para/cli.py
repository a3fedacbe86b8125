import argparse
import logging
import os
import sys
import textwrap
from functools import wraps
from pathlib import Path
from typing import Sequence

from . import Processor, Session
from .adapter.layer import LayerType, StorageDtype
from .adapter.synthetic import PowerLaw, parse_profile
from .allocation import Policy, PolicyKind
from .commands.synth import SynthArgs, do_synth
from .errors import ConfigError, DimensionError, DomainError, ParaError, VerificationError
from .settings import SETTING_PROCESSOR_THREADS, Settings
from .utils.profiling import profile_main

LOG_ENV = 'PARA_LOG'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_VERIFICATION = 3

logger = logging.getLogger(__name__)


class _ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser reporting usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def needs_processor(func):
    """Decorator for commands that decompose layers.

    The decorated function will receive (session, args).
    The wrapper function takes (settings, args), creates the Processor and the Session.
    """
    @wraps(func)
    def wrapper(settings: Settings, args):
        threads = args.threads if args.threads is not None else settings.get(SETTING_PROCESSOR_THREADS)
        try:
            threads = int(threads) if threads is not None else None
        except (TypeError, ValueError):
            raise ConfigError(f"{SETTING_PROCESSOR_THREADS} must be an integer, got {threads!r}") from None
        if threads is not None and threads < 1:
            raise DomainError(f"Thread count must be positive, got {threads}")
        with Processor(threads) as processor:
            return func(Session(processor, settings), args)
    return wrapper


def no_processor(func):
    """Decorator for commands that run without a worker pool.

    The decorated function will receive (session, args).
    """
    @wraps(func)
    def wrapper(settings: Settings, args):
        return func(Session(None, settings), args)
    return wrapper


def exit_code_for(error: ParaError) -> int:
    if isinstance(error, VerificationError):
        return EXIT_VERIFICATION
    if isinstance(error, (DomainError, DimensionError, ConfigError)):
        return EXIT_USAGE
    return EXIT_FORMAT


def configure_logging(log_level: str | None, log_file: str | None, verbose: bool) -> None:
    """Configure root logging from CLI flags, falling back to PARA_LOG and then WARNING."""
    level_name = log_level or ('INFO' if verbose else None) or os.environ.get(LOG_ENV) or 'WARNING'
    level = logging.getLevelName(level_name.upper())
    invalid = not isinstance(level, int)
    if invalid:
        level = logging.WARNING

    for handler in logging.root.handlers[:]:
        logging.root.removeHandler(handler)

    logging.basicConfig(filename=log_file, level=level, format=LOG_FORMAT)
    if invalid:
        logger.warning(f"Ignoring unknown log level {level_name!r} from {LOG_ENV}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _profile(text: str):
    try:
        return parse_profile(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _seed(text: str) -> int:
    try:
        seed = int(text)
    except ValueError:
        seed = -1
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError(f"expected an unsigned 64-bit integer, got {text!r}")
    return seed


def _layer_types(text: str) -> list[LayerType]:
    try:
        return [LayerType(part.strip()) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected a comma-separated subset of {[t.value for t in LayerType]}, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog='para',
        description='Compress LoRA adapters by pruning the singular values of all layers against one global '
                    'threshold.',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=textwrap.dedent('''
            Examples:
              para analyze ./adapter --out ./analysis
              para compress ./adapter --policy gamma --value 0.25 --out ./adapter-r4
              para family ./adapter --policy gamma --values 0.5,0.25,0.1 --out ./family
              para verify ./adapter ./adapter-r4
              para synth --out ./synthetic --layers 4 --d1 256 --d2 256 --rank 16 --profile power_law:0.5
            ''').strip()
    )
    parser.add_argument(
        '--config',
        metavar='PATH',
        help='Path to a TOML settings file. If not provided, uses the PARA_CONFIG environment variable or para.toml '
             'in the current directory when present.')
    parser.add_argument(
        '--verbose',
        action='store_true',
        help='Shorthand for --log-level INFO')
    parser.add_argument(
        '--log-file',
        metavar='PATH',
        help='Write log records to this file instead of stderr')
    parser.add_argument(
        '--log-level',
        metavar='LEVEL',
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
        help='Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL). Defaults to the PARA_LOG environment variable, '
             'or WARNING.')
    subparsers = parser.add_subparsers(
        dest='command',
        title='Commands',
        description='Available commands',
        help='Use "para COMMAND --help" for command-specific help'
    )

    threads = _ArgumentParser(add_help=False)
    threads.add_argument(
        '--threads',
        type=int,
        metavar='N',
        help='Worker threads for per-layer work (default: processor.threads setting, or the number of cores). '
             'Outputs are identical for any value.')

    report_format = _ArgumentParser(add_help=False)
    report_format.add_argument(
        '--report-format',
        choices=['json', 'csv'],
        default='json',
        help='Format of the compression report (default: json). rank_matrix.csv is always written.')

    parser_analyze = subparsers.add_parser(
        'analyze',
        parents=[threads],
        help='Write the pooled singular spectrum of an adapter and derived data',
        description='Decomposes every layer and writes spectrum.json, histogram.csv, energy_curve.csv, '
                    'epsilon_sweep.csv and topk_sweep.csv.')
    parser_analyze.add_argument('input', metavar='INPUT', help='Adapter directory')
    parser_analyze.add_argument('--out', required=True, metavar='DIR', help='Output directory')
    parser_analyze.add_argument(
        '--bins', type=int, metavar='N', help='Histogram bin count (default: analyze.bins setting, or 64)')
    parser_analyze.set_defaults(method=_analyze)

    parser_compress = subparsers.add_parser(
        'compress',
        parents=[threads, report_format],
        help='Write one compressed child adapter',
        description='Keeps the singular directions selected by the policy and writes the compacted adapter with '
                    'its compression report.',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=textwrap.dedent('''
            Policies:
              gamma    keep round(VALUE * total rank) values globally, VALUE in (0, 1]
              epsilon  keep the fewest values retaining VALUE of the spectral energy, VALUE in (0, 1]
              local    keep the VALUE largest values in every layer
              topk     drop the VALUE globally largest values
            ''').strip())
    parser_compress.add_argument('input', metavar='INPUT', help='Parent adapter directory')
    parser_compress.add_argument('--policy', required=True, choices=[k.value for k in PolicyKind])
    parser_compress.add_argument('--value', required=True, type=float, metavar='X', help='Policy value')
    parser_compress.add_argument('--out', required=True, metavar='DIR', help='Output directory')
    parser_compress.set_defaults(method=_compress)

    parser_family = subparsers.add_parser(
        'family',
        parents=[threads, report_format],
        help='Write several compressed children from one decomposition',
        description='Decomposes the parent once and writes one child per value into DIR/<policy>_<value>, plus '
                    'family.json. Failed children are recorded; the others are still written.')
    parser_family.add_argument('input', metavar='INPUT', help='Parent adapter directory')
    parser_family.add_argument('--policy', required=True, choices=[k.value for k in PolicyKind])
    parser_family.add_argument(
        '--values', required=True, type=_float_list, metavar='X,Y,...',
        help='Strictly increasing or decreasing policy values')
    parser_family.add_argument('--out', required=True, metavar='DIR', help='Output directory')
    parser_family.set_defaults(method=_family)

    parser_verify = subparsers.add_parser(
        'verify',
        help='Check a compressed child against its parent',
        description='Materializes every parent and child update and compares the measured Frobenius error with '
                    'the error claimed in the child\'s report. Exits with 3 when any layer fails.')
    parser_verify.add_argument('parent', metavar='PARENT', help='Parent adapter directory')
    parser_verify.add_argument('child', metavar='CHILD', help='Child adapter directory with its report')
    parser_verify.add_argument('--out', metavar='DIR', help='Directory for verification.json')
    parser_verify.set_defaults(method=_verify)

    parser_synth = subparsers.add_parser(
        'synth',
        help='Write a synthetic adapter with a planted spectrum',
        description='Generates an adapter whose layers have exactly the planted singular values.',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=textwrap.dedent('''
            Profiles (repeat --profile to cycle profiles over layers):
              power_law:D           sigma_i = D ** (i - 1)
              flat[:V]              every value V (default 1)
              bimodal:C,BIG,SMALL   C values BIG, the rest SMALL
            ''').strip())
    parser_synth.add_argument('--out', required=True, metavar='DIR', help='Output directory')
    parser_synth.add_argument('--layers', required=True, type=int, metavar='N', help='Transformer layers')
    parser_synth.add_argument('--d1', required=True, type=int, metavar='N', help='Output dimension')
    parser_synth.add_argument('--d2', required=True, type=int, metavar='N', help='Input dimension')
    parser_synth.add_argument('--rank', required=True, type=int, metavar='R', help='LoRA rank')
    parser_synth.add_argument(
        '--profile', action='append', type=_profile, metavar='PROFILE',
        help='Planted spectrum (default: power_law:0.5)')
    parser_synth.add_argument('--seed', type=_seed, default=0, metavar='N', help='Random seed (default: 0)')
    parser_synth.add_argument('--alpha', type=float, metavar='X', help='lora_alpha (default: the rank)')
    parser_synth.add_argument(
        '--dtype', choices=[d.value for d in StorageDtype], default=StorageDtype.F32.value,
        help='Tensor storage dtype (default: F32)')
    parser_synth.add_argument(
        '--layer-types', type=_layer_types, default=list(LayerType), metavar='T,...',
        help='Adapted layer types (default: q,k,v,o,m1,m2)')
    parser_synth.set_defaults(method=_synth)

    return parser


@profile_main
def para_main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    configure_logging(args.log_level, args.log_file, args.verbose)

    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    try:
        try:
            settings = Settings.locate(args.config)
        except (OSError, ValueError) as e:
            raise ConfigError(f"Cannot load settings: {e}") from e
        return args.method(settings, args) or EXIT_OK
    except ParaError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"para: error: {e}", file=sys.stderr)
        return exit_code_for(e)


@needs_processor
def _analyze(session: Session, args) -> int:
    analysis = session.analyze(args.input, args.out, args.bins)
    print(f"pooled values: {analysis.spectrum.budget} across {analysis.n_layers} layers")
    print(f"total energy: {analysis.spectrum.total_energy:.6g}")
    print(f"written to: {args.out}")
    return EXIT_OK


@needs_processor
def _compress(session: Session, args) -> int:
    policy = Policy.parse(args.policy, args.value)
    report = session.compress(args.input, policy, args.out, args.report_format)
    for line in report.summary_lines():
        print(line)
    return EXIT_OK


@needs_processor
def _family(session: Session, args) -> int:
    result = session.family(args.input, PolicyKind(args.policy), args.values, args.out, args.report_format)
    for child in result.children:
        if child.status == 'ok':
            print(f"{child.directory}: kept {child.kept_total}, reduction {child.reduction_fraction:.2%}")
        else:
            print(f"{child.directory}: failed ({child.error})")
    print(f"decomposition time: {result.decomposition_seconds:.3f}s")
    return EXIT_FORMAT if result.failed else EXIT_OK


@no_processor
def _verify(session: Session, args) -> int:
    result = session.verify(args.parent, args.child, args.out)
    print(f"verified {len(result.layers)} layers: pass")
    return EXIT_OK


@no_processor
def _synth(session: Session, args) -> int:
    adapter = do_synth(SynthArgs(
        output_path=Path(args.out),
        n_layers=args.layers,
        d1=args.d1,
        d2=args.d2,
        rank=args.rank,
        profiles=args.profile or [PowerLaw(0.5)],
        seed=args.seed,
        alpha=args.alpha,
        storage_dtype=StorageDtype(args.dtype),
        layer_types=args.layer_types,
    ))
    print(f"wrote {len(adapter)} layers (budget {adapter.budget}) to {args.out}")
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(para_main())
