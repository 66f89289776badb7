"""Leave-one-species-out Neural ODE run; writes loso_report.csv, loso_variants.csv and fig3_data.csv."""
from _common import parse

from pbpk_sciml import pipeline

cfg, args = parse(__doc__, lambda p: p.add_argument("--holdout", default=None))
_, rep, _ = pipeline.train_allometry(cfg, cfg.run.out_dir, args.holdout)
data = pipeline.load_xspecies(cfg, cfg.run.out_dir)
pipeline.predict_species(cfg, cfg.run.out_dir, [g.drug_id for g in data.graphs])
print(f"held out {rep.held_out}: test {rep.test_mse:.5g} | mean-profile baseline {rep.baseline_mse:.5g} "
      f"| log-weight interpolated embedding {rep.interpolated_mse:.5g}")
