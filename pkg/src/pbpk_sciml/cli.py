"""Command-line entry point: ``pbpk-sciml <command> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O error
(including missing checkpoints), 4 training failure, 5 an acceptance check failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, ExperimentConfig, load_config
from .datafiles import DataFileError, update_manifest
from .diffusion import violation_rate
from .pkode import DivergenceError, ParameterError
from .selftest import run_selftest
from .synthdata import ConfigurationError
from .transformer import TrainingDivergence

OUT_ENV = "PBPK_SCIML_OUT"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING, EXIT_CRITERIA = 0, 2, 3, 4, 5

log = logging.getLogger("pbpk_sciml")


class CriteriaFailed(Exception):
    pass


def resolve_config(args) -> ExperimentConfig:
    """Config file, then ``--seed``; output dir from ``--out``, else the env var, else the file."""
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    run = cfg.run
    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed)
    out = args.out or os.environ.get(OUT_ENV) or run.out_dir
    cfg.run = dataclasses.replace(run, out_dir=str(out))
    return cfg


def _finish(cfg: ExperimentConfig, files, timings=None, metrics=None) -> Path:
    out = Path(cfg.run.out_dir)
    files = list(files) + [cfg.dump(out / "config.json")]
    return update_manifest(out, cfg.digest(), cfg.run.seed, files, timings, metrics)


def cmd_generate(cfg, args) -> int:
    (ds, files), dt = pipeline.timed(pipeline.generate, cfg, cfg.run.out_dir)
    print(f"dataset1: {len(ds.d1.profiles)} subjects; physio: {ds.physio.shape[0]} vectors; "
          f"xspecies: {len(ds.d3.records)} profiles -> {cfg.run.out_dir}")
    _finish(cfg, files, {"generate": dt})
    return EXIT_OK


def cmd_train_transformer(cfg, args) -> int:
    (_, rep, files), dt = pipeline.timed(pipeline.train_transformer, cfg, cfg.run.out_dir)
    print(f"transformer test MSE {rep.test_mse:.6g} vs carry-forward {rep.baseline_mse:.6g} "
          f"(ratio {rep.ratio_to_baseline:.4f})")
    _finish(cfg, files, {"train_transformer": dt},
            {"transformer_test_mse": rep.test_mse, "transformer_baseline_mse": rep.baseline_mse,
             "transformer_final_train_mse": rep.epoch_loss[-1]})
    return EXIT_OK


def cmd_forecast(cfg, args) -> int:
    path = pipeline.forecast(cfg, cfg.run.out_dir, args.subjects)
    print(f"wrote {path}")
    _finish(cfg, [path])
    return EXIT_OK


def cmd_train_diffusion(cfg, args) -> int:
    (_, files), dt = pipeline.timed(pipeline.train_diffusion, cfg, cfg.run.out_dir, args.lam)
    print(f"trained diffusion model with lambda={args.lam:g}")
    _finish(cfg, files, {f"train_diffusion_lambda{args.lam:g}": dt})
    return EXIT_OK


def cmd_sample_population(cfg, args) -> int:
    n = args.n or cfg.diffusion.n_samples
    samples, path = pipeline.sample_population(cfg, cfg.run.out_dir, n, args.lam)
    rate = violation_rate(samples)
    print(f"{n} samples, violation rate {100 * rate:.2f}% -> {path}")
    _finish(cfg, [path], metrics={f"sample_violation_rate_lambda{args.lam:g}": rate})
    return EXIT_OK


def cmd_ablation(cfg, args) -> int:
    (rep, files), dt = pipeline.timed(pipeline.ablation, cfg, cfg.run.out_dir, args.parallel_ablation or None)
    for lam, rate in rep.rates.items():
        print(f"lambda={lam:g}: violation rate {100 * rate:.2f}%")
    metrics = {f"violation_rate_lambda{lam:g}": r for lam, r in rep.rates.items()}
    _finish(cfg, files, {"ablation": dt}, metrics)
    lam1 = cfg.diffusion.penalty_weight
    if not rep.rates[lam1] < rep.rates[0.0]:
        raise CriteriaFailed(f"constrained rate {100 * rep.rates[lam1]:.2f}% is not below "
                             f"unconstrained {100 * rep.rates[0.0]:.2f}%")
    return EXIT_OK


def cmd_train_allometry(cfg, args) -> int:
    (_, rep, files), dt = pipeline.timed(pipeline.train_allometry, cfg, cfg.run.out_dir, args.holdout)
    print(f"held out {rep.held_out}: test MSE {rep.test_mse:.6g}, mean-profile baseline {rep.baseline_mse:.6g}, "
          f"log-weight interpolated embedding {rep.interpolated_mse:.6g}")
    _finish(cfg, files, {"train_allometry": dt},
            {"loso_test_mse": rep.test_mse, "loso_baseline_mse": rep.baseline_mse,
             "loso_interpolated_mse": rep.interpolated_mse})
    return EXIT_OK


def cmd_predict_species(cfg, args) -> int:
    drugs = None
    if args.all_drugs:
        drugs = [g.drug_id for g in pipeline.load_xspecies(cfg, Path(cfg.run.out_dir)).graphs]
    elif args.drug is not None:
        drugs = args.drug
    path = pipeline.predict_species(cfg, cfg.run.out_dir, drugs, args.species)
    print(f"wrote {path}")
    _finish(cfg, [path])
    return EXIT_OK


def cmd_reproduce_figures(cfg, args) -> int:
    out = Path(cfg.run.out_dir)
    files, metrics = [], {}
    if args.train:
        _, trep, f1 = pipeline.train_transformer(cfg, out)
        arep, f2 = pipeline.ablation(cfg, out, args.parallel_ablation or None)
        _, lrep, f3 = pipeline.train_allometry(cfg, out)
        files += f1 + f2 + f3
        metrics = {"transformer_test_mse": trep.test_mse, "transformer_baseline_mse": trep.baseline_mse,
                   "loso_test_mse": lrep.test_mse, "loso_baseline_mse": lrep.baseline_mse,
                   "loso_interpolated_mse": lrep.interpolated_mse}
        metrics.update({f"violation_rate_lambda{lam:g}": r for lam, r in arep.rates.items()})
    files.append(pipeline.forecast(cfg, out, args.subjects))
    if not args.train:
        samples = {}
        for lam in (0.0, cfg.diffusion.penalty_weight):
            samples[lam], _ = pipeline.sample_population(cfg, out, cfg.diffusion.n_samples, lam)
        files.append(pipeline.write_fig2(out, samples))
    files.append(pipeline.predict_species(cfg, out, [g.drug_id for g in pipeline.load_xspecies(cfg, out).graphs]))
    for f in (out / "fig1_data.csv", out / "fig2_data.csv", out / "fig3_data.csv"):
        print(f"wrote {f}")
    _finish(cfg, files, metrics=metrics)
    return EXIT_OK


def cmd_selftest(cfg, args) -> int:
    results = run_selftest()
    for c in results:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    if not all(c.passed for c in results):
        raise CriteriaFailed("selftest failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", type=Path, help=f"output directory (overrides ${OUT_ENV} and the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pbpk-sciml", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    add("generate", cmd_generate, "write the three synthetic datasets")
    add("train-transformer", cmd_train_transformer, "train the forecasting transformer")
    sp = add("forecast", cmd_forecast, "write fig1_data.csv from a trained transformer")
    sp.add_argument("--subjects", type=int, default=1, help="number of test subjects")
    sp = add("train-diffusion", cmd_train_diffusion, "train one diffusion model")
    sp.add_argument("--lambda", dest="lam", type=float, required=True, help="physics penalty weight")
    sp = add("sample-population", cmd_sample_population, "sample a virtual population into samples.csv")
    sp.add_argument("--n", type=int, help="number of samples (default: diffusion.n_samples)")
    sp.add_argument("--lambda", dest="lam", type=float, default=1.0, help="which trained model to sample")
    sp = add("ablation", cmd_ablation, "train both diffusion arms, write table1.csv and fig2_data.csv")
    sp.add_argument("--parallel-ablation", action="store_true")
    sp = add("train-allometry", cmd_train_allometry, "leave-one-species-out Neural ODE training")
    sp.add_argument("--holdout", help="species to hold out (default from config)")
    sp = add("predict-species", cmd_predict_species, "write fig3_data.csv for the held-out species")
    sp.add_argument("--species", help="species to predict (default: the checkpoint's held-out species)")
    sp.add_argument("--drug", type=int, action="append", help="drug id (repeatable; default: first drug)")
    sp.add_argument("--all-drugs", action="store_true")
    sp = add("reproduce-figures", cmd_reproduce_figures, "write fig1/fig2/fig3 plot data")
    sp.add_argument("--train", action="store_true", help="train every model first")
    sp.add_argument("--subjects", type=int, default=1)
    sp.add_argument("--parallel-ablation", action="store_true")
    add("selftest", cmd_selftest, "run the invariant checks")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return args.fn(cfg, args)
    except (ConfigError, ConfigurationError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFileError, pipeline.MissingArtifact, OSError, ParameterError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, DivergenceError) as err:
        print(f"training failed: {err}", file=sys.stderr)
        return EXIT_TRAINING
    except CriteriaFailed as err:
        print(f"check failed: {err}", file=sys.stderr)
        return EXIT_CRITERIA


if __name__ == "__main__":
    sys.exit(main())
