"""Two-compartment IV-bolus PK model and fixed-step Euler / RK4 integrators.

The steppers only use ``+`` and multiplication by Python floats on the state,
so the same code advances numpy arrays and autodiff tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DOSE_MG = 100.0
DEFAULT_T_END_H = 24.0
DEFAULT_N_TIMES = 50
DEFAULT_SUBSTEPS = 10


class ParameterError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class TwoCompartmentParams:
    CL: float
    V1: float
    V2: float
    Q: float

    def __post_init__(self):
        vals = (self.CL, self.V1, self.V2, self.Q)
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError(f"non-finite PK parameters: {self}")
        if self.V1 <= 0 or self.V2 <= 0:
            raise ParameterError(f"volumes must be positive: V1={self.V1}, V2={self.V2}")
        if self.CL < 0 or self.Q < 0:
            raise ParameterError(f"clearances must be non-negative: CL={self.CL}, Q={self.Q}")


@dataclass
class PKProfile:
    times: np.ndarray
    concentrations: np.ndarray
    dose: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.concentrations = np.asarray(self.concentrations, dtype=np.float64)
        if self.times.shape != self.concentrations.shape:
            raise GridError(f"{self.times.shape[0]} times but {self.concentrations.shape[0]} concentrations")


@dataclass(frozen=True)
class SolverConfig:
    """Fixed-step scheme.

    ``step`` is the internal step in the integration time unit; when it is
    ``None`` each output-grid gap is split into ``substeps`` equal steps.
    """

    method: str = "rk4"
    step: float | None = None
    substeps: int = DEFAULT_SUBSTEPS

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown solver method {self.method!r}; expected 'euler' or 'rk4'")
        if self.step is not None and not self.step > 0:
            raise ValueError(f"solver step must be positive, got {self.step}")
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")

    def steps_for(self, gap: float) -> int:
        if self.step is None:
            return self.substeps
        n = int(round(gap / self.step))
        if n < 1 or abs(n * self.step - gap) > 1e-9 * max(gap, 1.0):
            raise GridError(f"solver step {self.step} does not divide grid gap {gap}")
        return n


def default_grid(t_end: float = DEFAULT_T_END_H, n: int = DEFAULT_N_TIMES) -> np.ndarray:
    return np.linspace(0.0, t_end, n)


def two_compartment_rhs(state, params: TwoCompartmentParams):
    """Amount derivatives ``(dA1/dt, dA2/dt)`` for central/peripheral amounts in mg."""
    if params.V1 <= 0 or params.V2 <= 0:
        raise ParameterError(f"volumes must be positive: V1={params.V1}, V2={params.V2}")
    return _mass_balance(state, params.CL / params.V1, params.Q / params.V1, params.Q / params.V2)


def _mass_balance(state, k10, k12, k21):
    a1, a2 = state[0], state[1]
    return np.array([-(k10 + k12) * a1 + k21 * a2, k12 * a1 - k21 * a2])


def _euler(rhs, t, y, h):
    return y + rhs(t, y) * h


def _rk4(rhs, t, y, h):
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + k1 * (0.5 * h))
    k3 = rhs(t + 0.5 * h, y + k2 * (0.5 * h))
    k4 = rhs(t + h, y + k3 * h)
    return y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)


_STEPPERS = {"euler": _euler, "rk4": _rk4}


def _values(y) -> np.ndarray:
    return y.data if hasattr(y, "data") and not isinstance(y, np.ndarray) else np.asarray(y)


def march(rhs: Callable, y0, grid: Sequence[float], cfg: SolverConfig = SolverConfig(),
          blowup: float = np.inf) -> list:
    """States at every grid point, advancing with ``cfg``'s fixed-step scheme.

    ``rhs(t, y)`` must return something of the same kind as ``y``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 1:
        raise GridError("grid must be a non-empty 1-D sequence")
    gaps = np.diff(grid)
    if np.any(gaps <= 0):
        raise GridError("grid must be strictly increasing")
    if cfg.step is not None and grid.size > 1 and cfg.step > grid[-1] - grid[0] + 1e-12:
        raise GridError(f"solver step {cfg.step} exceeds grid span {grid[-1] - grid[0]}")
    stepper = _STEPPERS[cfg.method]
    out = [y0]
    y = y0
    for t0, gap in zip(grid[:-1], gaps):
        n = cfg.steps_for(gap)
        h = gap / n
        for j in range(n):
            t = t0 + j * h
            y = stepper(rhs, t, y, h)
            vals = _values(y)
            if not np.all(np.isfinite(vals)) or np.any(np.abs(vals) > blowup):
                raise DivergenceError(f"integration diverged at t={t + h:.6g}", t + h)
        out.append(y)
    return out


def integrate(rhs: Callable, y0, grid: Sequence[float], cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Trajectory array of shape ``(len(grid),) + shape(y0)``."""
    y0 = np.asarray(y0, dtype=np.float64)
    return np.stack(march(rhs, y0, grid, cfg))


def simulate_profile(params: TwoCompartmentParams, dose: float = DEFAULT_DOSE_MG,
                     grid: Sequence[float] | None = None, cfg: SolverConfig = SolverConfig(),
                     meta: dict | None = None) -> PKProfile:
    """Central concentration after an IV bolus of ``dose`` mg at t=0."""
    if not dose > 0:
        raise ParameterError(f"dose must be positive, got {dose}")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    traj = integrate(lambda t, y: two_compartment_rhs(y, params), [dose, 0.0], grid, cfg)
    conc = traj[:, 0] / params.V1
    return PKProfile(grid.copy(), conc, dose, dict(meta or {}))


def simulate_profiles(params: Sequence[TwoCompartmentParams], dose: float = DEFAULT_DOSE_MG,
                      grid: Sequence[float] | None = None, cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Vectorised ``simulate_profile``: concentration matrix ``(len(params), len(grid))``.

    Elementwise arithmetic is identical to the scalar path, so rows match it bit for bit.
    """
    if not dose > 0:
        raise ParameterError(f"dose must be positive, got {dose}")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    cl = np.array([p.CL for p in params])
    v1 = np.array([p.V1 for p in params])
    v2 = np.array([p.V2 for p in params])
    q = np.array([p.Q for p in params])
    k10, k12, k21 = cl / v1, q / v1, q / v2
    y0 = np.stack([np.full(len(params), float(dose)), np.zeros(len(params))])
    traj = integrate(lambda t, y: _mass_balance(y, k10, k12, k21), y0, grid, cfg)
    return (traj[:, 0, :] / v1).T


def one_compartment_profile(cl: float, v: float, dose: float, grid: Sequence[float],
                            cfg: SolverConfig = SolverConfig(), meta: dict | None = None) -> PKProfile:
    if not (cl >= 0 and v > 0 and dose > 0):
        raise ParameterError(f"invalid one-compartment inputs CL={cl}, V={v}, dose={dose}")
    k = cl / v
    grid = np.asarray(grid, dtype=np.float64)
    traj = integrate(lambda t, y: -k * y, [dose], grid, cfg)
    conc = traj[:, 0] / v
    return PKProfile(grid.copy(), conc, dose, dict(meta or {}))
