"""Graph-encoded drugs and learned species embeddings conditioning a Neural ODE.

``dC/dtau = NN(C, tau, z_drug, z_species)`` on normalised time ``tau = t / t_end``
with concentrations scaled to ``C(0) = 1``. Gradients flow through the unrolled
fixed-step solver from :mod:`pbpk_sciml.pkode`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .pkode import PKProfile, SolverConfig, march
from .rng import stream
from .synthdata import NODE_FEATURES, SPECIES, Dataset3, MoleculeGraph, SpeciesSpec, species_by_name
from .transformer import TrainingDivergence

BLOWUP = 1e6


@dataclass
class AllometryConfig:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 8
    gnn_rounds: int = 2
    drug_dim: int = 16
    species_dim: int = 8
    hidden: int = 64
    n_layers: int = 4
    method: str = "rk4"
    substeps: int = 1
    holdout: str = "Human"

    @property
    def rhs_input_dim(self) -> int:
        return 2 + self.drug_dim + self.species_dim

    def solver(self) -> SolverConfig:
        return SolverConfig(method=self.method, substeps=self.substeps)


def mean_adjacency(graph: MoleculeGraph) -> np.ndarray:
    """Row-normalised adjacency with self loops: row v averages N(v) and v."""
    if graph.n_nodes == 0:
        raise ValueError(f"drug {graph.drug_id}: empty graph")
    a = np.eye(graph.n_nodes)
    for u, v in graph.edges:
        a[u, v] = a[v, u] = 1.0
    return a / a.sum(axis=1, keepdims=True)


def _block_diag(blocks: list[np.ndarray]) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        out[i:i + k, i:i + k] = b
        i += k
    return out


def _pooling(sizes: list[int]) -> np.ndarray:
    out = np.zeros((len(sizes), sum(sizes)))
    i = 0
    for g, k in enumerate(sizes):
        out[g, i:i + k] = 1.0 / k
        i += k
    return out


@dataclass
class AllometryModel:
    cfg: AllometryConfig
    params: dict[str, Tensor]
    optimizer: AdamState | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: AllometryConfig, seed: int, zero_head: bool = False,
             n_species: int = len(SPECIES)) -> "AllometryModel":
        rng = stream(seed, "allometry_init")
        p = {}
        dims = [NODE_FEATURES] + [cfg.drug_dim] * cfg.gnn_rounds
        for k in range(cfg.gnn_rounds):
            p[f"gnn.w{k}"] = ad.glorot_uniform(rng, dims[k], dims[k + 1])
        p["species"] = ad.glorot_uniform(rng, n_species, cfg.species_dim)
        widths = [cfg.rhs_input_dim] + [cfg.hidden] * (cfg.n_layers - 1) + [1]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            p[f"rhs.w{i}"] = ad.zeros((a, b)) if (last and zero_head) else ad.glorot_uniform(rng, a, b)
            p[f"rhs.b{i}"] = ad.zeros(b)
        for k, t in p.items():
            t.name = k
        return cls(cfg, p)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def encoder_weights(self) -> list[Tensor]:
        return [self.params[f"gnn.w{k}"] for k in range(self.cfg.gnn_rounds)]

    @property
    def rhs_layers(self) -> list[tuple[Tensor, Tensor]]:
        return [(self.params[f"rhs.w{i}"], self.params[f"rhs.b{i}"]) for i in range(self.cfg.n_layers)]

    def encode(self, graphs: list[MoleculeGraph]) -> Tensor:
        """``(len(graphs), drug_dim)`` embeddings, all graphs in one block-diagonal pass."""
        adj = Tensor(_block_diag([mean_adjacency(g) for g in graphs]))
        h = Tensor(np.concatenate([g.features for g in graphs], axis=0))
        for w in self.encoder_weights:
            h = ad.relu(adj @ (h @ w))
        return Tensor(_pooling([g.n_nodes for g in graphs])) @ h

    def species_rows(self, idx) -> Tensor:
        return ad.index(self.params["species"], np.asarray(idx, dtype=int))

    def rhs(self, c: Tensor, tau: float, z_drug: Tensor, z_species: Tensor) -> Tensor:
        return node_ode_rhs(c, tau, z_drug, z_species, self.rhs_layers)

    def conditioned_rhs(self, z_drug: Tensor, z_species: Tensor):
        """Same field as :meth:`rhs` with the time-invariant part of the first layer hoisted.

        The embeddings enter the first layer linearly, so their contribution is
        computed once per trajectory instead of once per solver stage.
        """
        (w0, b0), rest = self.rhs_layers[0], self.rhs_layers[1:]
        w_c, w_tau = ad.index(w0, slice(0, 1)), ad.index(w0, 1)
        cond = ad.concat([z_drug, z_species], axis=1) @ ad.index(w0, slice(2, None)) + b0

        def field(c, tau, *_):
            h = ad.relu(ad.as_tensor(c) @ w_c + cond + ad.scale(w_tau, float(tau)))
            return ad.mlp(h, rest)

        return field

    def save(self, path, extra: dict | None = None):
        meta = {"config": asdict(self.cfg)}
        meta.update(self.meta)
        meta.update(extra or {})
        return ad.save_checkpoint(path, "allometry", self.params, self.optimizer, meta)

    @classmethod
    def load(cls, path) -> "AllometryModel":
        ck = ad.load_checkpoint(path, "allometry")
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in ck.params.items()}
        meta = {k: v for k, v in ck.extra.items() if k != "config"}
        return cls(AllometryConfig(**ck.extra["config"]), params, ck.optimizer, meta)


def gnn_encode(graph: MoleculeGraph, model: AllometryModel) -> np.ndarray:
    """Mean-aggregation message passing followed by mean pooling; returns ``(drug_dim,)``."""
    return model.encode([graph]).data[0]


def node_ode_rhs(c, tau, z_drug, z_species, layers: list[tuple[Tensor, Tensor]]) -> Tensor:
    """MLP derivative from ``[C, tau, z_drug, z_species]``; ``c`` is ``(B, 1)``."""
    c = ad.as_tensor(c)
    batch = c.shape[0]
    tcol = Tensor(np.full((batch, 1), float(tau)))
    return ad.mlp(ad.concat([c, tcol, z_drug, z_species], axis=1), layers)


def integrate_neural(rhs, c0, grid, z_drug, z_species, cfg: SolverConfig = SolverConfig(substeps=1)) -> Tensor:
    """Unrolled fixed-step solve; returns the ``(B, len(grid))`` trajectory as a Tensor.

    ``rhs(C, tau, z_drug, z_species)`` is any callable of that signature, e.g.
    :meth:`AllometryModel.rhs` or an injected test field.
    """
    c0 = ad.as_tensor(np.asarray(c0, dtype=np.float64).reshape(-1, 1) if not isinstance(c0, Tensor) else c0)
    z_drug, z_species = ad.as_tensor(z_drug), ad.as_tensor(z_species)
    states = march(lambda tau, c: rhs(c, tau, z_drug, z_species), c0, grid, cfg, blowup=BLOWUP)
    return ad.concat(states, axis=1)


@dataclass
class TrainingView:
    """Rows a LOSO run may read: everything except the held-out species."""

    conc: np.ndarray
    drug_ids: np.ndarray
    species_idx: np.ndarray

    @classmethod
    def build(cls, data: Dataset3, held_out: str) -> "TrainingView":
        hold = species_by_name(held_out)
        rows = [r for r in data.records if r.species != hold.name]
        names = {r.species for r in rows}
        if len(names) < 2:
            raise ValueError(f"LOSO needs at least two training species, got {sorted(names)}")
        idx = {s.name: s.index for s in data.species}
        return cls(np.stack([r.conc_norm for r in rows]).copy(),
                   np.array([r.drug_id for r in rows]),
                   np.array([idx[r.species] for r in rows]))


@dataclass
class LosoReport:
    held_out: str
    test_mse: float
    baseline_mse: float
    interpolated_mse: float
    epoch_loss: list[float]
    predictions: dict[int, np.ndarray]


def _trajectory(model: AllometryModel, graphs: list[MoleculeGraph], species_idx, c0, tau,
                z_species: Tensor | None = None) -> Tensor:
    z_drug = model.encode(graphs)
    zs = model.species_rows(species_idx) if z_species is None else z_species
    return integrate_neural(model.conditioned_rhs(z_drug, zs), c0, tau, z_drug, zs, model.cfg.solver())


def interpolated_species_embedding(model: AllometryModel, train_species: list[SpeciesSpec],
                                   target: SpeciesSpec) -> np.ndarray:
    """Least-squares line through the training rows against log body weight, evaluated at ``target``."""
    table = model.params["species"].data
    x = np.log([s.weight_kg for s in train_species])
    design = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(design, table[[s.index for s in train_species]], rcond=None)
    return coef[0] + coef[1] * math.log(target.weight_kg)


def predict_profile(model: AllometryModel, graph: MoleculeGraph, species: str, grid,
                    z_species: np.ndarray | None = None) -> PKProfile:
    """Normalised profile (C(0)=1) for one drug and species on ``grid`` hours."""
    sp = species_by_name(species)
    if sp.index >= model.params["species"].shape[0]:
        raise KeyError(f"species {species!r} has no embedding row")
    grid = np.asarray(grid, dtype=np.float64)
    tau = grid / grid[-1]
    zs = None if z_species is None else Tensor(np.asarray(z_species).reshape(1, -1))
    traj = _trajectory(model, [graph], [sp.index], [1.0], tau, zs).data[0]
    meta = {"drug_id": graph.drug_id, "species": sp.name,
            "normalization": "concentration divided by C(0); time integrated as t / t_end",
            "t_end_h": float(grid[-1])}
    return PKProfile(grid.copy(), traj, 1.0, meta)


def fit_loso(data: Dataset3, held_out: str, cfg: AllometryConfig, seed: int,
             log=None) -> tuple[AllometryModel, list[float]]:
    """Train on every species except ``held_out``; the held-out rows are never read."""
    view = TrainingView.build(data, held_out)
    hold = species_by_name(held_out)
    graphs = {g.drug_id: g for g in data.graphs}
    tau = data.times / data.times[-1]

    model = AllometryModel.init(cfg, seed, n_species=len(data.species))
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    rng = stream(seed, "allometry_batches")
    n = view.conc.shape[0]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            target = view.conc[idx]
            with Tape() as tape:
                pred = _trajectory(model, [graphs[int(d)] for d in view.drug_ids[idx]],
                                   view.species_idx[idx], target[:, 0], tau)
                loss = ad.mse_loss(pred, target)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite allometry loss in epoch {epoch}", epoch)
            ad.backward(loss, tape)
            ad.adam_step(params, opt)
            total += value * len(idx)
        history.append(total / n)
        if log is not None:
            log(epoch, history[-1])
    model.optimizer = opt
    model.meta = {"held_out": hold.name, "t_end_h": float(data.times[-1]), "seed": seed,
                  "train_species": sorted({s.name for s in data.species if s.index in set(view.species_idx.tolist())})}
    return model, history


def evaluate_loso(model: AllometryModel, data: Dataset3, held_out: str,
                  history: list[float] | None = None) -> LosoReport:
    """Held-out MSE for the untouched and log-weight-interpolated embeddings, plus the mean-profile baseline."""
    view = TrainingView.build(data, held_out)
    hold = species_by_name(held_out)
    train_species = [s for s in data.species if s.index in set(view.species_idx.tolist())]
    graphs = {g.drug_id: g for g in data.graphs}
    tau = data.times / data.times[-1]
    test = data.for_species(hold.name)
    truth = np.stack([r.conc_norm for r in test])
    c0 = truth[:, 0]
    test_graphs = [graphs[r.drug_id] for r in test]
    pred = _trajectory(model, test_graphs, [hold.index] * len(test), c0, tau).data
    interp = interpolated_species_embedding(model, train_species, hold)
    zs = Tensor(np.tile(interp, (len(test), 1)))
    pred_interp = _trajectory(model, test_graphs, None, c0, tau, zs).data
    baseline = view.conc.mean(axis=0)
    return LosoReport(
        held_out=hold.name,
        test_mse=float(np.mean((pred - truth) ** 2)),
        baseline_mse=float(np.mean((baseline[None, :] - truth) ** 2)),
        interpolated_mse=float(np.mean((pred_interp - truth) ** 2)),
        epoch_loss=list(history or []),
        predictions={r.drug_id: pred[i] for i, r in enumerate(test)},
    )


def train_loso(data: Dataset3, held_out: str, cfg: AllometryConfig, seed: int, log=None) -> tuple[AllometryModel, LosoReport]:
    model, history = fit_loso(data, held_out, cfg, seed, log)
    return model, evaluate_loso(model, data, held_out, history)
