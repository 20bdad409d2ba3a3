"""
KOALA
Command-line entry point: floor and run generation, map building,
localization, evaluation and full experiments.
"""
import sys
import argparse
import logging

from config import DEBUG, KOALA_OUT, ConfigError, load_config
from services.harness import ExperimentService

# Enable logging
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=logging.DEBUG if DEBUG else logging.INFO
)
logger = logging.getLogger(__name__)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Master seed (overrides SEED)')
    common.add_argument('--config', help='Experiment config file (KEY=value)')
    common.add_argument('--out', default=KOALA_OUT, help='Output directory')
    common.add_argument('--exact-knn', action='store_true', help='Force exact k-NN search')

    parser = argparse.ArgumentParser(prog='koala', description='Ground-texture localization toolkit')
    commands = parser.add_subparsers(dest='command', required=True)
    commands.add_parser('gen-floor', parents=[common], help='Generate and save the floor')
    commands.add_parser('gen-runs', parents=[common], help='Render mapping and evaluation runs')

    build = commands.add_parser('build-map', parents=[common], help='Build the map from mapping runs')
    build.add_argument('runs', nargs='*', help='Mapping run directories (default: OUT/runs/mapping_*)')
    build.add_argument('--export-patches', metavar='DIR', help='Also export clustered patches as training data')

    localize = commands.add_parser('localize', parents=[common], help='Localize a persisted run')
    localize.add_argument('run', help='Run directory')
    localize.add_argument('--map', dest='map_path', help='KMAP file (default: OUT/map.kmap)')

    evaluate = commands.add_parser('evaluate', parents=[common], help='Evaluate predictions of a run')
    evaluate.add_argument('run', help='Run directory holding the ground truth')
    evaluate.add_argument('--predictions', help='Prediction CSV (default: OUT/predictions.csv)')

    commands.add_parser('experiment', parents=[common], help='Run the full experiment')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)

    overrides = {}
    if args.seed is not None:
        overrides['SEED'] = args.seed
    if args.exact_knn:
        overrides['EXACT_KNN'] = True
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1

    service = ExperimentService(cfg)
    if args.command == 'gen-floor':
        result = service.gen_floor(args.out)
    elif args.command == 'gen-runs':
        result = service.gen_runs(args.out)
    elif args.command == 'build-map':
        result = service.build_map(args.out, args.runs, args.export_patches)
    elif args.command == 'localize':
        result = service.localize(args.out, args.run, args.map_path)
    elif args.command == 'evaluate':
        result = service.evaluate(args.out, args.run, args.predictions)
    else:
        result = service.experiment(args.out)

    print(result["message"], file=sys.stdout if result["success"] else sys.stderr)
    return 0 if result["success"] else 1


if __name__ == '__main__':
    sys.exit(main())
