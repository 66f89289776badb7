"""Seeded generators for the three synthetic datasets.

* Dataset 1: two-compartment IV-bolus profiles for log-normal virtual patients.
* Dataset 2: physiological vectors (age, height, weight, liver, heart) that all
  satisfy ``liver + heart <= 0.04 * weight``.
* Dataset 3: one-compartment profiles of random-graph drugs in rat, dog and
  human, with clearance and volume scaled allometrically from human values.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import pkode
from .pkode import PKProfile, SolverConfig, TwoCompartmentParams
from .rng import stream

GENERATOR_VERSION = "1"

PATIENT_MEDIANS = {"CL": 5.0, "V1": 30.0, "V2": 50.0, "Q": 8.0}
PATIENT_CV = 0.30
TRAIN_FRACTION = 0.8

PHYSIO_COLUMNS = ("age", "height_cm", "weight_kg", "liver_L", "heart_L")
ORGAN_BUDGET = 0.04
LIVER_FRACTION = 0.025
HEART_FRACTION = 0.005
ORGAN_NOISE_SD = 0.1
MAX_REJECTIONS = 1000

NODE_FEATURES = 8
REFERENCE_WEIGHT_KG = 70.0
CL_EXPONENT = 0.75
V_EXPONENT = 1.0
DOSE_MG_PER_KG = 1.0
HUMAN_CL_MEDIAN = 5.0
HUMAN_V_MEDIAN = 50.0
# fixed read-out directions from mean node features to log CL_h and log V_h
_CL_DIRECTION = np.array([0.9, -0.6, 0.4, 0.0, 0.5, -0.3, 0.2, 0.1])
_V_DIRECTION = np.array([-0.2, 0.5, 0.3, 0.8, -0.4, 0.0, -0.3, 0.2])


class ConfigurationError(ValueError):
    pass


# -- Dataset 1 --------------------------------------------------------------


def sample_patients(n: int, seed: int, cv: float = PATIENT_CV,
                    medians: dict[str, float] | None = None) -> list[TwoCompartmentParams]:
    """Independent log-normal draws with the given medians and coefficient of variation."""
    if n <= 0:
        raise ConfigurationError(f"need a positive patient count, got {n}")
    med = dict(PATIENT_MEDIANS if medians is None else medians)
    sigma = np.sqrt(np.log1p(cv * cv))
    z = stream(seed, "patients").standard_normal((n, 4))
    log_med = np.log([med["CL"], med["V1"], med["V2"], med["Q"]])
    vals = np.exp(log_med + sigma * z)
    return [TwoCompartmentParams(*map(float, row)) for row in vals]


@dataclass
class Dataset1:
    params: list[TwoCompartmentParams]
    profiles: list[PKProfile]
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.profiles[0].times

    def matrix(self, idx=None) -> np.ndarray:
        idx = range(len(self.profiles)) if idx is None else idx
        return np.stack([self.profiles[i].concentrations for i in idx])

    @property
    def train(self) -> list[PKProfile]:
        return [self.profiles[i] for i in self.train_idx]

    @property
    def test(self) -> list[PKProfile]:
        return [self.profiles[i] for i in self.test_idx]


def split_indices(n: int, seed: int, train_fraction: float = TRAIN_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    perm = stream(seed, "dataset1_split").permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def gen_dataset1(n: int, seed: int, cv: float = PATIENT_CV, dose: float = pkode.DEFAULT_DOSE_MG,
                 grid=None, cfg: SolverConfig = SolverConfig()) -> Dataset1:
    params = sample_patients(n, seed, cv)
    grid = pkode.default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    conc = pkode.simulate_profiles(params, dose, grid, cfg)
    profiles = [PKProfile(grid.copy(), conc[i], dose, {"subject_id": i}) for i in range(n)]
    train_idx, test_idx = split_indices(n, seed)
    return Dataset1(params, profiles, train_idx, test_idx)


# -- Dataset 2 --------------------------------------------------------------


@dataclass(frozen=True)
class PhysioVector:
    age: float
    height_cm: float
    weight_kg: float
    liver_L: float
    heart_L: float

    def as_array(self) -> np.ndarray:
        return np.array([self.age, self.height_cm, self.weight_kg, self.liver_L, self.heart_L])

    @classmethod
    def from_array(cls, row) -> "PhysioVector":
        return cls(*map(float, row))


def organ_budget_excess(x) -> np.ndarray:
    """``liver + heart - 0.04 * weight`` over the last axis (positive means violation)."""
    x = np.asarray(x, dtype=np.float64)
    return x[..., 3] + x[..., 4] - ORGAN_BUDGET * x[..., 2]


def gen_physio(n: int, seed: int, noise_sd: float = ORGAN_NOISE_SD,
               max_attempts: int = MAX_REJECTIONS) -> np.ndarray:
    """``(n, 5)`` array in ``PHYSIO_COLUMNS`` order, every row inside the organ budget."""
    if n <= 0:
        raise ConfigurationError(f"need a positive sample count, got {n}")
    rng = stream(seed, "physio")
    out = np.empty((n, 5))
    for i in range(n):
        w = rng.normal(70.0, 12.0)
        while w < 40.0:
            w = rng.normal(70.0, 12.0)
        age = rng.uniform(20.0, 70.0)
        height = 170.0 + 0.3 * (w - 70.0) + rng.normal(0.0, 5.0)
        for _ in range(max_attempts):
            e1, e2 = rng.normal(0.0, noise_sd, size=2)
            liver = LIVER_FRACTION * w * (1.0 + e1)
            heart = HEART_FRACTION * w * (1.0 + e2)
            if liver > 0 and heart > 0 and liver + heart - ORGAN_BUDGET * w <= 0:
                break
        else:
            raise ConfigurationError(
                f"sample {i}: no compliant organ volumes after {max_attempts} attempts")
        out[i] = (age, height, w, liver, heart)
    return out


# -- Dataset 3 --------------------------------------------------------------


@dataclass(frozen=True)
class SpeciesSpec:
    name: str
    weight_kg: float
    index: int


SPECIES = (
    SpeciesSpec("Rat", 0.25, 0),
    SpeciesSpec("Dog", 10.0, 1),
    SpeciesSpec("Human", 70.0, 2),
)


def species_by_name(name: str) -> SpeciesSpec:
    for s in SPECIES:
        if s.name.lower() == name.lower():
            return s
    raise KeyError(f"unknown species {name!r}; known: {[s.name for s in SPECIES]}")


@dataclass
class MoleculeGraph:
    features: np.ndarray
    edges: list[tuple[int, int]]
    drug_id: int = 0

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    def neighbors(self) -> list[set[int]]:
        nb = [set() for _ in range(self.n_nodes)]
        for u, v in self.edges:
            nb[u].add(v)
            nb[v].add(u)
        return nb

    def is_connected(self) -> bool:
        if self.n_nodes == 0:
            return False
        nb = self.neighbors()
        seen = {0}
        queue = deque([0])
        while queue:
            for v in nb[queue.popleft()]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.n_nodes

    def permuted(self, perm) -> "MoleculeGraph":
        """Relabel nodes so old node ``perm[i]`` becomes new node ``i``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return MoleculeGraph(self.features[perm].copy(),
                             [(int(inv[u]), int(inv[v])) for u, v in self.edges], self.drug_id)


def make_drug_graph(drug_index: int, seed: int) -> MoleculeGraph:
    """Connected random graph with 5-15 nodes: a random tree plus a few chords."""
    rng = stream(seed, "drug_graph", int(drug_index))
    n = int(rng.integers(5, 16))
    edges = {(int(rng.integers(0, i)), i) for i in range(1, n)}
    for _ in range(int(rng.integers(0, n // 2 + 1))):
        u, v = sorted(int(k) for k in rng.choice(n, size=2, replace=False))
        edges.add((u, v))
    center = rng.normal(0.0, 1.0, NODE_FEATURES)
    feats = center + 0.5 * rng.normal(0.0, 1.0, (n, NODE_FEATURES))
    return MoleculeGraph(feats, sorted(edges), int(drug_index))


def baseline_pk(graph: MoleculeGraph) -> tuple[float, float]:
    """Human-scale (CL_h, V_h) as smooth functions of the mean node feature."""
    m = graph.features.mean(axis=0)
    cl = HUMAN_CL_MEDIAN * np.exp(0.6 * np.tanh(_CL_DIRECTION @ m / 2.0))
    v = HUMAN_V_MEDIAN * np.exp(0.4 * np.tanh(_V_DIRECTION @ m / 2.0))
    return float(cl), float(v)


def scale_to_species(cl_h: float, v_h: float, weight_kg: float) -> tuple[float, float]:
    r = weight_kg / REFERENCE_WEIGHT_KG
    return cl_h * r ** CL_EXPONENT, v_h * r ** V_EXPONENT


@dataclass
class XSpeciesRecord:
    drug_id: int
    species: str
    weight_kg: float
    CL: float
    V: float
    profile: PKProfile
    conc_norm: np.ndarray


@dataclass
class Dataset3:
    graphs: list[MoleculeGraph]
    records: list[XSpeciesRecord]
    times: np.ndarray
    species: tuple[SpeciesSpec, ...] = field(default=SPECIES)

    def for_species(self, name: str) -> list[XSpeciesRecord]:
        return [r for r in self.records if r.species.lower() == name.lower()]


def gen_crossspecies(n_drugs: int, seed: int, grid=None, cfg: SolverConfig = SolverConfig(),
                     species: tuple[SpeciesSpec, ...] = SPECIES) -> Dataset3:
    if n_drugs <= 0:
        raise ConfigurationError(f"need a positive drug count, got {n_drugs}")
    grid = pkode.default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    graphs = [make_drug_graph(d, seed) for d in range(n_drugs)]
    records = []
    for g in graphs:
        cl_h, v_h = baseline_pk(g)
        for sp in species:
            cl, v = scale_to_species(cl_h, v_h, sp.weight_kg)
            dose = DOSE_MG_PER_KG * sp.weight_kg
            prof = pkode.one_compartment_profile(
                cl, v, dose, grid, cfg, {"drug_id": g.drug_id, "species": sp.name})
            records.append(XSpeciesRecord(g.drug_id, sp.name, sp.weight_kg, cl, v, prof,
                                          prof.concentrations / prof.concentrations[0]))
    return Dataset3(graphs, records, grid.copy(), tuple(species))
