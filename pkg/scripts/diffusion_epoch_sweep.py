"""Unconstrained violation rate as a function of training epochs.

Shows how the sample violation rate of the lambda=0 model approaches the data
rate (zero) as training proceeds.
"""
import dataclasses

from _common import parse

from pbpk_sciml import diffusion, synthdata

cfg, args = parse(__doc__, lambda p: p.add_argument("--epochs", type=int, nargs="+", default=[1, 3, 10, 30, 100]))
data = synthdata.gen_physio(cfg.data.n_physio, cfg.run.seed)
ratio = (data[:, 3] + data[:, 4]) / data[:, 2]
print(f"data (liver+heart)/weight: mean {ratio.mean():.4f}, sd {ratio.std():.5f}, max {ratio.max():.4f}")
for e in args.epochs:
    dcfg = dataclasses.replace(cfg.diffusion, epochs=e)
    model, _ = diffusion.train_diffusion(data, dcfg, 0.0, cfg.run.seed)
    s = diffusion.sample(model, diffusion.DiffusionSchedule.from_config(dcfg), dcfg.n_samples, cfg.run.seed)
    print(f"epochs={e:5d}  lambda=0 violation rate {100 * diffusion.violation_rate(s):.2f}%")
