"""DDPM over standardised physiological vectors with an organ-budget penalty.

The penalty is ``relu(g(x0_hat))**2`` where ``g = liver + heart - 0.04 * weight``
is evaluated in physical units on the clean-data estimate recovered from the
denoiser's noise prediction.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .pkode import DivergenceError
from .rng import stream
from .synthdata import ORGAN_BUDGET, PHYSIO_COLUMNS, organ_budget_excess
from .transformer import TrainingDivergence, positional_encoding

DATA_DIM = len(PHYSIO_COLUMNS)


@dataclass
class DiffusionConfig:
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: int = 128
    n_hidden: int = 3
    time_dim: int = 16
    epochs: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    penalty_weight: float = 1.0
    n_samples: int = 2000


class DiffusionSchedule:
    """Linear betas for t = 1..T; arrays are indexed by ``t - 1``."""

    def __init__(self, steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02):
        self.T = int(steps)
        self.betas = np.linspace(beta_start, beta_end, self.T)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> "DiffusionSchedule":
        return cls(cfg.steps, cfg.beta_start, cfg.beta_end)

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"diffusion step out of range [1, {self.T}]: {t}")
        return t.astype(int)

    def beta(self, t):
        return self.betas[self._check(t) - 1]

    def alpha(self, t):
        return self.alphas[self._check(t) - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[self._check(t) - 1]


def _per_row(coef, shape) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return np.full(shape, float(coef))
    return np.broadcast_to(coef.reshape(-1, *([1] * (len(shape) - 1))), shape).copy()


def forward_noising(x0, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    ab = _per_row(schedule.alpha_bar(t), x0.shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)


def predict_x0(x_t, t, eps_hat, schedule: DiffusionSchedule):
    """Invert the noising map given a noise estimate; ``eps_hat`` may be a Tensor."""
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = _per_row(schedule.alpha_bar(t), x_t.shape)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) * (1.0 / np.sqrt(ab))


@dataclass
class Normalizer:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        return cls(x.mean(axis=0), x.std(axis=0))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x) - self.mean) / self.sd

    def inverse(self, z) -> np.ndarray:
        return np.asarray(z) * self.sd + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["sd"], dtype=np.float64))


@dataclass(frozen=True)
class ConstraintSpec:
    """Single affine inequality ``coef @ x <= 0`` over physical-unit vectors."""

    weight: float = 1.0
    budget: float = ORGAN_BUDGET

    @property
    def coef(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.budget, 1.0, 1.0])

    def g(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.coef


def physics_penalty(x0_hat, stats: Normalizer | None, constraint: ConstraintSpec = ConstraintSpec()) -> Tensor:
    """Batch mean of ``relu(g)**2`` with ``g`` taken on de-normalised rows."""
    if stats is None:
        raise ValueError("physics_penalty needs normalisation statistics")
    x = ad.as_tensor(x0_hat)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    phys = x * np.broadcast_to(stats.sd, x.shape).copy() + stats.mean
    g = ad.relu(phys @ constraint.coef.reshape(-1, 1))
    return ad.mean(g * g)


def time_embedding(t, dim: int) -> np.ndarray:
    return positional_encoding(np.asarray(t, dtype=np.float64), dim)


@dataclass
class DenoiserMLP:
    cfg: DiffusionConfig
    params: dict[str, Tensor]
    stats: Normalizer | None = None
    optimizer: AdamState | None = None

    @classmethod
    def init(cls, cfg: DiffusionConfig, seed: int) -> "DenoiserMLP":
        rng = stream(seed, "diffusion_init")
        widths = [DATA_DIM + cfg.time_dim] + [cfg.hidden] * cfg.n_hidden + [DATA_DIM]
        p = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            p[f"w{i}"] = ad.glorot_uniform(rng, a, b, name=f"w{i}")
            p[f"b{i}"] = ad.zeros(b, name=f"b{i}")
        return cls(cfg, p)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def layers(self) -> list[tuple[Tensor, Tensor]]:
        n = len(self.params) // 2
        return [(self.params[f"w{i}"], self.params[f"b{i}"]) for i in range(n)]

    def __call__(self, x_t, t) -> Tensor:
        x_t = np.asarray(x_t, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        inp = np.concatenate([x_t, time_embedding(t, self.cfg.time_dim)], axis=1)
        return ad.mlp(Tensor(inp), self.layers())

    def save(self, path, extra: dict | None = None):
        meta = {"config": asdict(self.cfg), "stats": self.stats.to_dict() if self.stats else None}
        meta.update(extra or {})
        return ad.save_checkpoint(path, "diffusion", self.params, self.optimizer, meta)

    @classmethod
    def load(cls, path) -> "DenoiserMLP":
        ck = ad.load_checkpoint(path, "diffusion")
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in ck.params.items()}
        stats = Normalizer.from_dict(ck.extra["stats"]) if ck.extra.get("stats") else None
        model = cls(DiffusionConfig(**ck.extra["config"]), params, stats, ck.optimizer)
        model.meta = ck.extra
        return model


def training_loss(x0, model: DenoiserMLP, schedule: DiffusionSchedule, lam: float,
                  rng: np.random.Generator, stats: Normalizer | None = None,
                  constraint: ConstraintSpec = ConstraintSpec()) -> Tensor:
    """Noise-matching loss plus ``lam`` times the penalty on the recovered clean data.

    Draws ``t`` then ``eps`` from ``rng`` regardless of ``lam`` so that arms
    with different weights see identical noise.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    x_t = forward_noising(x0, t, eps, schedule)
    eps_hat = model(x_t, t)
    loss = ad.mse_loss(eps_hat, eps) * float(x0.shape[1])
    if lam != 0:
        stats = stats if stats is not None else model.stats
        loss = loss + physics_penalty(predict_x0(x_t, t, eps_hat, schedule), stats, constraint) * float(lam)
    return loss


def sample(model: DenoiserMLP, schedule: DiffusionSchedule, n: int, seed: int,
           stats: Normalizer | None = None) -> np.ndarray:
    """Ancestral sampling with reverse variance ``beta_t``; returns physical units."""
    stats = stats if stats is not None else model.stats
    rng = stream(seed, "diffusion_sample")
    x = rng.standard_normal((n, DATA_DIM))
    for t in range(schedule.T, 0, -1):
        eps_hat = model(x, t).data
        beta, alpha, ab = schedule.betas[t - 1], schedule.alphas[t - 1], schedule.alpha_bars[t - 1]
        x = (x - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
        if t > 1:
            x = x + math.sqrt(beta) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite sample at diffusion step {t}", float(t))
    return stats.inverse(x)


def violation_rate(samples) -> float:
    samples = np.asarray(samples)
    if samples.shape[0] == 0:
        raise ValueError("violation_rate needs at least one sample")
    return float(np.mean(organ_budget_excess(samples) > 0))


def train_diffusion(data: np.ndarray, cfg: DiffusionConfig, lam: float, seed: int,
                    log=None) -> tuple[DenoiserMLP, list[float]]:
    """Train a denoiser on physical-unit rows of ``data``; returns (model, per-epoch loss)."""
    stats = Normalizer.fit(data)
    z = stats.transform(data)
    model = DenoiserMLP.init(cfg, seed)
    model.stats = stats
    schedule = DiffusionSchedule.from_config(cfg)
    opt = AdamState(lr=cfg.lr)
    params = model.parameters()
    order_rng = stream(seed, "diffusion_batches")
    noise_rng = stream(seed, "diffusion_noise")
    n = z.shape[0]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with Tape() as tape:
                loss = training_loss(z[idx], model, schedule, lam, noise_rng, stats)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(
                    f"non-finite diffusion loss in epoch {epoch} (lambda={lam}, batch start {start})", epoch)
            ad.backward(loss, tape)
            ad.adam_step(params, opt)
            total += value * len(idx)
        history.append(total / n)
        if log is not None:
            log(epoch, history[-1])
    model.optimizer = opt
    return model, history


@dataclass
class AblationReport:
    rates: dict[float, float]
    samples: dict[float, np.ndarray]
    histories: dict[float, list[float]] = field(default_factory=dict)
    models: dict[float, DenoiserMLP] = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        lo = self.rates[1.0]
        return math.inf if lo == 0 else self.rates[0.0] / lo


def _ablation_arm(args):
    data, cfg, lam, seed = args
    model, history = train_diffusion(data, cfg, lam, seed)
    samples = sample(model, DiffusionSchedule.from_config(cfg), cfg.n_samples, seed)
    return lam, model, history, samples


def run_ablation(data: np.ndarray, cfg: DiffusionConfig, seed: int,
                 weights: tuple[float, ...] = (0.0, 1.0), parallel: bool = False) -> AblationReport:
    """Train one arm per penalty weight from the same initialisation and noise, then sample each."""
    jobs = [(data, cfg, float(lam), seed) for lam in weights]
    if parallel:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            results = list(pool.map(_ablation_arm, jobs))
    else:
        results = [_ablation_arm(j) for j in jobs]
    report = AblationReport({}, {})
    for lam, model, history, samples in results:
        report.rates[lam] = violation_rate(samples)
        report.samples[lam] = samples
        report.histories[lam] = history
        report.models[lam] = model
    return report
