import argparse
import os

from dotenv import load_dotenv

from pipeline import STAGES, load_config, run_all, run_stage
from util import configure_threads, seed_everything


def build_parser():
    parser = argparse.ArgumentParser(prog="elastron", description="Convert a trained transformer into an elastic one")
    parser.add_argument('stage', choices=list(STAGES) + ["all"], help='pipeline stage to run')
    parser.add_argument('--config', '-c', default=None, type=str, help='config file path (default: ./config.json when present)')
    parser.add_argument('--seed', type=int, default=None, help='random seed (overrides the config file)')
    parser.add_argument('--budget', type=float, default=None, help='normalized budget in (0, 1] for extract/eval')
    parser.add_argument('--out', type=str, default=os.environ.get('ELASTRON_OUT_DIR'),
                        help='output directory (overrides the config file)')

    # Container environment
    parser.add_argument('--threads', type=int, default=os.environ.get('ELASTRON_THREADS'),
                        help='torch threads and worker count (default: 1)')
    return parser


def main(argv=None):
    load_dotenv(verbose=True)
    args = build_parser().parse_args(argv)
    if args.budget is not None and not 0.0 < args.budget <= 1.0:
        raise SystemExit(f"--budget should lie in (0, 1], {args.budget}")

    if args.config is not None and not os.path.exists(args.config):
        raise FileNotFoundError(f"config file {args.config} does not exist")
    path = args.config or ("config.json" if os.path.exists("config.json") else None)
    config = load_config(path, seed=args.seed, out_dir=args.out)
    config.workers = configure_threads(args.threads)
    seed_everything(config.seed)
    print(args)

    if args.stage == "all":
        run_all(config)
    else:
        run_stage(args.stage, config, budget=args.budget)


if __name__ == '__main__':
    main()
