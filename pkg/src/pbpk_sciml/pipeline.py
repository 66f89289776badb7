"""End-to-end steps shared by the CLI and the scripts: each reads inputs from
and writes artifacts into one output directory."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import allometry, datafiles as df, diffusion, synthdata, transformer
from .config import ExperimentConfig
from .pkode import SolverConfig, default_grid
from .synthdata import organ_budget_excess, species_by_name

log = logging.getLogger(__name__)

TRANSFORMER_CKPT = "transformer.ckpt"
ALLOMETRY_CKPT = "allometry.ckpt"


class MissingArtifact(FileNotFoundError):
    pass


def diffusion_ckpt_name(lam: float) -> str:
    return f"diffusion_lambda{lam:g}.ckpt"


def prepare_out(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise df.DataFileError(f"output directory {out} is not writable: {err}") from err
    return out


@dataclass
class Datasets:
    d1: synthdata.Dataset1
    physio: np.ndarray
    d3: synthdata.Dataset3


def generate(cfg: ExperimentConfig, out) -> tuple[Datasets, list[Path]]:
    out = prepare_out(out)
    c, seed = cfg.data, cfg.run.seed
    grid = default_grid(c.t_end_h, c.n_times)
    solver = SolverConfig(method=c.solver, substeps=c.substeps)
    d1 = synthdata.gen_dataset1(c.n_patients, seed, c.patient_cv, c.dose_mg, grid, solver)
    physio = synthdata.gen_physio(c.n_physio, seed)
    d3 = synthdata.gen_crossspecies(c.n_drugs, seed, grid, solver)
    files = df.write_dataset1(out, d1)
    files.append(df.write_physio(out / df.PHYSIO_FILE, physio))
    files += df.write_xspecies(out, d3)
    cfg.dump(out / "config.json")
    return Datasets(d1, physio, d3), files


def _ensure_data(cfg: ExperimentConfig, out, needed: tuple[str, ...]) -> Path:
    out = Path(out)
    if not all((out / f).exists() for f in needed):
        log.info("dataset files missing in %s; generating", out)
        _, files = generate(cfg, out)
        df.update_manifest(out, cfg.digest(), cfg.run.seed, files)
    return out


def load_dataset1(cfg, out) -> synthdata.Dataset1:
    return df.read_dataset1(_ensure_data(cfg, out, (df.DATASET1_FILE, df.PATIENTS_FILE)))


def load_physio(cfg, out) -> np.ndarray:
    return df.read_physio(_ensure_data(cfg, out, (df.PHYSIO_FILE,)) / df.PHYSIO_FILE)


def load_xspecies(cfg, out) -> synthdata.Dataset3:
    return df.read_xspecies(_ensure_data(cfg, out, (df.XSPECIES_FILE, df.XSPECIES_PARAMS_FILE, df.DRUGS_FILE)))


# -- transformer --------------------------------------------------------------------


def train_transformer(cfg: ExperimentConfig, out) -> tuple[transformer.ForecastModel, transformer.ForecastReport, list[Path]]:
    out = prepare_out(out)
    data = load_dataset1(cfg, out)
    model = transformer.ForecastModel.init(cfg.transformer, cfg.run.seed)
    report = transformer.train(model, data, cfg.run.seed,
                               log=lambda e, l: log.info("transformer epoch %d train_mse %.6g", e, l))
    files = [model.save(out / TRANSFORMER_CKPT),
             df.write_csv(out / "transformer_log.csv", ("epoch", "train_mse"),
                          enumerate(report.epoch_loss, start=1))]
    summary = {k: v for k, v in asdict(report).items() if k != "epoch_loss"}
    summary["ratio_to_baseline"] = report.ratio_to_baseline
    p = out / "transformer_report.json"
    p.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files.append(p)
    return model, report, files


def forecast(cfg: ExperimentConfig, out, n_subjects: int = 1) -> Path:
    out = Path(out)
    ckpt = out / TRANSFORMER_CKPT
    if not ckpt.exists():
        raise MissingArtifact(f"{ckpt} not found; run train-transformer first")
    model = transformer.ForecastModel.load(ckpt)
    data = load_dataset1(cfg, out)
    subjects = data.test_idx[:n_subjects]
    conc = data.matrix(subjects)
    k = model.cfg.input_len
    pred = transformer.generate(model, conc[:, :k])
    rows = []
    for s, truth, fc in zip(subjects, conc, pred):
        for j, t in enumerate(data.times):
            rows.append((int(s), t, truth[j], fc[j - k] if j >= k else None))
    return df.write_csv(out / "fig1_data.csv", ("subject_id", "time_h", "truth", "prediction"), rows)


# -- diffusion ----------------------------------------------------------------------


def _write_diffusion_log(out: Path, histories: dict[float, list[float]]) -> Path:
    path = out / "diffusion_log.csv"
    kept = []
    if path.exists():
        kept = [(float(r["lambda"]), int(r["epoch"]), float(r["loss"])) for r in df.read_csv(path)
                if float(r["lambda"]) not in histories]
    rows = kept + [(lam, e, l) for lam, h in histories.items() for e, l in enumerate(h, start=1)]
    rows.sort(key=lambda r: (r[0], r[1]))
    return df.write_csv(path, ("lambda", "epoch", "loss"), rows)


def train_diffusion(cfg: ExperimentConfig, out, lam: float) -> tuple[diffusion.DenoiserMLP, list[Path]]:
    out = prepare_out(out)
    data = load_physio(cfg, out)
    model, history = diffusion.train_diffusion(
        data, cfg.diffusion, lam, cfg.run.seed,
        log=lambda e, l: log.debug("diffusion lambda=%g epoch %d loss %.6g", lam, e, l))
    files = [model.save(out / diffusion_ckpt_name(lam), {"lambda": lam}), _write_diffusion_log(out, {lam: history})]
    return model, files


def sample_population(cfg: ExperimentConfig, out, n: int, lam: float) -> tuple[np.ndarray, Path]:
    out = Path(out)
    ckpt = out / diffusion_ckpt_name(lam)
    if not ckpt.exists():
        raise MissingArtifact(f"{ckpt} not found; run train-diffusion --lambda {lam:g} first")
    model = diffusion.DenoiserMLP.load(ckpt)
    samples = diffusion.sample(model, diffusion.DiffusionSchedule.from_config(model.cfg), n, cfg.run.seed)
    path = df.write_physio(out / "samples.csv", samples, organ_budget_excess(samples) > 0)
    return samples, path


def write_fig2(out: Path, samples: dict[float, np.ndarray]) -> Path:
    rows = []
    for lam, s in samples.items():
        viol = organ_budget_excess(s) > 0
        name = "unconstrained" if lam == 0 else f"pcdm_lambda{lam:g}"
        rows += [(name, r[2], r[3], r[4], bool(v)) for r, v in zip(s, viol)]
    # boundary liver + heart = 0.04 W, drawn with heart at its nominal 0.5% of weight
    lo = min(float(s[:, 2].min()) for s in samples.values())
    hi = max(float(s[:, 2].max()) for s in samples.values())
    for w in np.linspace(lo, hi, 50):
        heart = synthdata.HEART_FRACTION * w
        rows.append(("boundary", w, synthdata.ORGAN_BUDGET * w - heart, heart, False))
    return df.write_csv(out / "fig2_data.csv", ("model", "weight_kg", "liver_L", "heart_L", "violates"), rows)


def ablation(cfg: ExperimentConfig, out, parallel: bool | None = None) -> tuple[diffusion.AblationReport, list[Path]]:
    out = prepare_out(out)
    data = load_physio(cfg, out)
    par = cfg.run.parallel_ablation if parallel is None else parallel
    report = diffusion.run_ablation(data, cfg.diffusion, cfg.run.seed, (0.0, cfg.diffusion.penalty_weight), par)
    files = [m.save(out / diffusion_ckpt_name(lam), {"lambda": lam}) for lam, m in report.models.items()]
    files.append(_write_diffusion_log(out, report.histories))
    rows = [("unconstrained" if lam == 0 else f"pcdm_lambda{lam:g}", 100.0 * r) for lam, r in report.rates.items()]
    files.append(df.write_csv(out / "table1.csv", ("config", "violation_pct"), rows))
    files.append(write_fig2(out, report.samples))
    return report, files


# -- allometry ----------------------------------------------------------------------


def train_allometry(cfg: ExperimentConfig, out, holdout: str | None = None):
    out = prepare_out(out)
    data = load_xspecies(cfg, out)
    held = species_by_name(holdout or cfg.allometry.holdout).name
    model, report = allometry.train_loso(
        data, held, cfg.allometry, cfg.run.seed,
        log=lambda e, l: log.info("allometry epoch %d train_mse %.6g", e, l))
    files = [
        model.save(out / ALLOMETRY_CKPT),
        df.write_csv(out / "allometry_log.csv", ("epoch", "train_mse"), enumerate(report.epoch_loss, start=1)),
        df.write_csv(out / "loso_report.csv", ("held_out", "test_mse", "baseline_mse"),
                     [(report.held_out, report.test_mse, report.baseline_mse)]),
        df.write_csv(out / "loso_variants.csv", ("held_out", "embedding", "test_mse"),
                     [(report.held_out, "untouched_init", report.test_mse),
                      (report.held_out, "log_weight_interpolated", report.interpolated_mse)]),
    ]
    return model, report, files


def predict_species(cfg: ExperimentConfig, out, drugs: list[int] | None = None,
                    species: str | None = None) -> Path:
    """fig3 rows for the held-out species; ``drugs=None`` means the first drug only."""
    out = Path(out)
    ckpt = out / ALLOMETRY_CKPT
    if not ckpt.exists():
        raise MissingArtifact(f"{ckpt} not found; run train-allometry first")
    model = allometry.AllometryModel.load(ckpt)
    data = load_xspecies(cfg, out)
    sp = species_by_name(species or model.meta.get("held_out", cfg.allometry.holdout)).name
    graphs = {g.drug_id: g for g in data.graphs}
    chosen = [data.graphs[0].drug_id] if drugs is None else drugs
    truth = {r.drug_id: r.conc_norm for r in data.for_species(sp)}
    rows = []
    for d in chosen:
        prof = allometry.predict_profile(model, graphs[d], sp, data.times)
        rows += [(d, sp, t, truth[d][j], prof.concentrations[j]) for j, t in enumerate(data.times)]
    return df.write_csv(out / "fig3_data.csv", ("drug_id", "species", "time_h", "truth", "prediction"), rows)


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - t0
