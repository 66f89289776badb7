"""Decoder-only Transformer that forecasts a concentration curve from its first points.

Concentrations are modelled as standardised log values. The network predicts
the next value at every position under a causal mask; training is
teacher-forced and inference is greedy autoregression.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .pkode import DivergenceError
from .rng import stream
from .synthdata import Dataset1

LOG_FLOOR = 1e-12


@dataclass
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    ff_dim: int = 64
    input_len: int = 5
    output_len: int = 45
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 32
    lr_schedule: str = "cosine"
    input_noise: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def seq_len(self) -> int:
        return self.input_len + self.output_len


class TrainingDivergence(ArithmeticError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


def positional_encoding(pos, d_model: int) -> np.ndarray:
    """Sinusoidal encoding; ``pos`` may be a scalar or an array of positions.

    Dimension ``2i`` holds ``sin(pos / 10000**(2i/d))`` and ``2i+1`` the cosine.
    """
    pos = np.asarray(pos, dtype=np.float64)
    i = np.arange(d_model) // 2
    angle = pos[..., None] / np.power(10000.0, 2.0 * i / d_model)
    return np.where(np.arange(d_model) % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(length: int) -> np.ndarray:
    m = np.zeros((length, length))
    m[np.triu_indices(length, k=1)] = -np.inf
    return m


def attention_weights(q: Tensor, k: Tensor, causal: bool = False) -> Tensor:
    dk = q.shape[-1]
    kt = ad.transpose(k, (1, 0) if k.ndim == 2 else (0, 2, 1))
    scores = ad.matmul(q, kt) / math.sqrt(dk)
    if causal:
        scores = scores + np.broadcast_to(causal_mask(q.shape[-2]), scores.shape).copy()
    return ad.softmax_rows(scores)


def attention(q, k, v, causal: bool = False) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d_k)) V for ``L×d_k`` or batched ``B×L×d_k`` inputs."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    return ad.matmul(attention_weights(q, k, causal), v)


@dataclass
class Scaler:
    mean: float = 0.0
    sd: float = 1.0

    @classmethod
    def fit(cls, conc: np.ndarray) -> "Scaler":
        z = np.log(np.maximum(conc, LOG_FLOOR))
        return cls(float(z.mean()), float(z.std()))

    def transform(self, conc) -> np.ndarray:
        return (np.log(np.maximum(np.asarray(conc, dtype=np.float64), LOG_FLOOR)) - self.mean) / self.sd

    def inverse(self, z) -> np.ndarray:
        return np.exp(np.asarray(z) * self.sd + self.mean)


@dataclass
class ForecastModel:
    cfg: TransformerConfig
    params: dict[str, Tensor]
    scaler: Scaler = field(default_factory=Scaler)
    optimizer: AdamState | None = None
    residual_head: bool = True

    @classmethod
    def init(cls, cfg: TransformerConfig, seed: int, zero_head: bool = False) -> "ForecastModel":
        rng = stream(seed, "transformer_init")
        d, f = cfg.d_model, cfg.ff_dim
        p = {"w_in": ad.glorot_uniform(rng, 1, d), "b_in": ad.zeros(d)}
        for l in range(cfg.n_layers):
            for name in ("wq", "wk", "wv", "wo"):
                p[f"l{l}.{name}"] = ad.glorot_uniform(rng, d, d)
            p[f"l{l}.bo"] = ad.zeros(d)
            p[f"l{l}.w1"] = ad.glorot_uniform(rng, d, f)
            p[f"l{l}.b1"] = ad.zeros(f)
            p[f"l{l}.w2"] = ad.glorot_uniform(rng, f, d)
            p[f"l{l}.b2"] = ad.zeros(d)
        p["w_out"] = ad.zeros((d, 1)) if zero_head else ad.glorot_uniform(rng, d, 1)
        p["b_out"] = ad.zeros(1)
        for k, t in p.items():
            t.name = k
        return cls(cfg, p)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _mha(self, h: Tensor, l: int, batch: int, length: int) -> Tensor:
        p, H = self.params, self.cfg.n_heads
        dk = self.cfg.d_model // H

        def heads(t: Tensor) -> Tensor:
            t = ad.reshape(t, (batch, length, H, dk))
            return ad.reshape(ad.transpose(t, (0, 2, 1, 3)), (batch * H, length, dk))

        q = heads(h @ p[f"l{l}.wq"])
        k = heads(h @ p[f"l{l}.wk"])
        v = heads(h @ p[f"l{l}.wv"])
        o = attention(q, k, v, causal=True)
        o = ad.transpose(ad.reshape(o, (batch, H, length, dk)), (0, 2, 1, 3))
        o = ad.reshape(o, (batch * length, self.cfg.d_model))
        return o @ p[f"l{l}.wo"] + p[f"l{l}.bo"]

    def __call__(self, seq) -> Tensor:
        """Next-value predictions ``(B, L)`` for standardised inputs ``(B, L)``."""
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim == 1:
            seq = seq[None, :]
        batch, length = seq.shape
        if length < 1:
            raise ValueError("forward needs a non-empty sequence")
        p, d = self.params, self.cfg.d_model
        x = Tensor(seq.reshape(batch * length, 1))
        pe = np.tile(positional_encoding(np.arange(length), d), (batch, 1))
        h = x @ p["w_in"] + p["b_in"] + pe
        for l in range(self.cfg.n_layers):
            h = h + self._mha(h, l, batch, length)
            f = ad.relu(h @ p[f"l{l}.w1"] + p[f"l{l}.b1"]) @ p[f"l{l}.w2"] + p[f"l{l}.b2"]
            h = h + f
        out = h @ p["w_out"] + p["b_out"]
        if self.residual_head:
            out = out + x
        return ad.reshape(out, (batch, length))

    def checkpoint_extra(self) -> dict:
        return {"config": asdict(self.cfg), "scaler": asdict(self.scaler)}

    def save(self, path):
        return ad.save_checkpoint(path, "transformer", self.params, self.optimizer, self.checkpoint_extra())

    @classmethod
    def load(cls, path) -> "ForecastModel":
        ck = ad.load_checkpoint(path, "transformer")
        cfg = TransformerConfig(**ck.extra["config"])
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in ck.params.items()}
        return cls(cfg, params, Scaler(**ck.extra["scaler"]), ck.optimizer)


def forward(model: ForecastModel, sequence) -> np.ndarray:
    """Standardised next-value predictions, same shape as ``sequence``."""
    seq = np.asarray(sequence, dtype=np.float64)
    out = model(seq).data
    return out.reshape(seq.shape)


def generate(model: ForecastModel, prefix, n_steps: int | None = None) -> np.ndarray:
    """Greedy autoregressive forecast in concentration units.

    ``prefix`` holds the first ``input_len`` concentrations, either ``(k,)`` or
    ``(B, k)``; the result has ``output_len`` values per row.
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    single = prefix.ndim == 1
    rows = prefix[None, :] if single else prefix
    if rows.shape[1] != model.cfg.input_len:
        raise ValueError(f"prefix length {rows.shape[1]} != input_len {model.cfg.input_len}")
    n_steps = model.cfg.output_len if n_steps is None else n_steps
    seq = model.scaler.transform(rows)
    for _ in range(n_steps):
        nxt = model(seq).data[:, -1]
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"non-finite forecast at position {seq.shape[1]}", float(seq.shape[1]))
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    out = model.scaler.inverse(seq[:, rows.shape[1]:])
    return out[0] if single else out


@dataclass
class ForecastReport:
    epoch_loss: list[float]
    test_mse: float
    test_mse_normalized: float
    baseline_mse: float
    baseline_mse_normalized: float

    @property
    def ratio_to_baseline(self) -> float:
        return self.test_mse / self.baseline_mse


def evaluate(model: ForecastModel, conc: np.ndarray) -> tuple[float, float, float, float, np.ndarray]:
    """Autoregressive test MSE and last-value-carried-forward baseline MSE.

    Returns ``(mse, mse_normalized, baseline, baseline_normalized, forecasts)``.
    """
    k = model.cfg.input_len
    truth = conc[:, k:]
    pred = generate(model, conc[:, :k])
    locf = np.repeat(conc[:, k - 1:k], truth.shape[1], axis=1)
    zt = model.scaler.transform(truth)
    mse = float(np.mean((pred - truth) ** 2))
    mse_n = float(np.mean((model.scaler.transform(pred) - zt) ** 2))
    base = float(np.mean((locf - truth) ** 2))
    base_n = float(np.mean((model.scaler.transform(locf) - zt) ** 2))
    return mse, mse_n, base, base_n, pred


def learning_rate(cfg: TransformerConfig, step: int, total_steps: int) -> float:
    """Peak ``cfg.lr``; with the cosine schedule it anneals to zero by the last step."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total_steps))
    raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")


def train(model: ForecastModel, data: Dataset1, seed: int, log=None) -> ForecastReport:
    """Teacher-forced next-step MSE with Adam; evaluates autoregressively on the test split."""
    cfg = model.cfg
    train_conc = data.matrix(data.train_idx)
    if train_conc.shape[0] == 0:
        raise ValueError("empty training split")
    if train_conc.shape[1] != cfg.seq_len:
        raise ValueError(f"profiles have {train_conc.shape[1]} points, config expects {cfg.seq_len}")
    model.scaler = Scaler.fit(train_conc)
    z = model.scaler.transform(train_conc)
    inputs, targets = z[:, :-1], z[:, 1:]
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    rng = stream(seed, "transformer_shuffle")
    epoch_loss = []
    n = z.shape[0]
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.lr = learning_rate(cfg, opt.step, total_steps)
            x = inputs[idx]
            if cfg.input_noise > 0:
                x = x + cfg.input_noise * rng.standard_normal(x.shape)
            with Tape() as tape:
                loss = ad.mse_loss(model(x), targets[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite training loss in epoch {epoch}", epoch)
            ad.backward(loss, tape)
            ad.adam_step(params, opt)
            total += value * len(idx)
        epoch_loss.append(total / n)
        if log is not None:
            log(epoch, epoch_loss[-1])
    model.optimizer = opt
    mse, mse_n, base, base_n, _ = evaluate(model, data.matrix(data.test_idx))
    return ForecastReport(epoch_loss, mse, mse_n, base, base_n)
