"""Train the forecasting transformer and write fig1 plot data for a few test subjects."""
from _common import parse

from pbpk_sciml import pipeline

cfg, args = parse(__doc__, lambda p: p.add_argument("--subjects", type=int, default=3))
_, rep, _ = pipeline.train_transformer(cfg, cfg.run.out_dir)
pipeline.forecast(cfg, cfg.run.out_dir, args.subjects)
print(f"test MSE {rep.test_mse:.5g} | carry-forward {rep.baseline_mse:.5g} | ratio {rep.ratio_to_baseline:.4f}")
print(f"normalised: {rep.test_mse_normalized:.5g} vs {rep.baseline_mse_normalized:.5g}")
