"""Unconstrained vs physics-penalised diffusion: table1.csv and fig2_data.csv."""
from _common import parse

from pbpk_sciml import pipeline

cfg, args = parse(__doc__, lambda p: p.add_argument("--parallel-ablation", action="store_true"))
(rep, _), seconds = pipeline.timed(pipeline.ablation, cfg, cfg.run.out_dir, args.parallel_ablation or None)
for lam, rate in rep.rates.items():
    print(f"lambda={lam:g}  violation rate {100 * rate:.2f}%")
print(f"ratio {rep.ratio:.2f}, {seconds:.0f}s")
