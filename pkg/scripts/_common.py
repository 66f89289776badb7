"""Shared argument handling for the experiment scripts."""
import argparse
import logging

from pbpk_sciml.config import ExperimentConfig, load_config


def parse(description: str, extra=None) -> tuple[ExperimentConfig, argparse.Namespace]:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    if extra:
        extra(p)
    args = p.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out:
        cfg.run.out_dir = args.out
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    return cfg, args
