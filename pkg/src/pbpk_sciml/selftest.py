"""Fast invariant checks runnable without pytest (``pbpk-sciml selftest``)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import diffusion, pkode, synthdata
from .autodiff import Tensor
from .rng import stream


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _rk4_order() -> tuple[bool, str]:
    errs = []
    for h in (0.1, 0.05, 0.025):
        y = pkode.integrate(lambda t, y: -y, np.array([1.0]), [0.0, 1.0], pkode.SolverConfig("rk4", step=h))
        errs.append(abs(y[-1, 0] - math.exp(-1.0)))
    orders = [math.log2(a / b) for a, b in zip(errs[:-1], errs[1:])]
    return all(3.5 <= p <= 4.5 for p in orders), f"observed orders {', '.join(f'{p:.3f}' for p in orders)}"


def _mass_conservation() -> tuple[bool, str]:
    p = pkode.TwoCompartmentParams(CL=0.0, V1=30.0, V2=50.0, Q=8.0)
    y = pkode.integrate(lambda t, s: pkode.two_compartment_rhs(s, p), np.array([100.0, 0.0]), pkode.default_grid())
    drift = float(np.max(np.abs(y.sum(axis=1) - 100.0)) / 100.0)
    return drift <= 1e-9, f"max relative drift {drift:.2e}"


def _schedule() -> tuple[bool, str]:
    s = diffusion.DiffusionSchedule()
    ok = s.beta(1) == 1e-4 and s.beta(100) == 0.02
    return bool(ok), f"beta_1={float(s.beta(1))!r}, beta_100={float(s.beta(100))!r}"


def _x0_identity() -> tuple[bool, str]:
    rng = stream(0, "selftest")
    s = diffusion.DiffusionSchedule()
    x0 = rng.standard_normal((64, 5))
    eps = rng.standard_normal((64, 5))
    t = rng.integers(1, s.T + 1, size=64)
    err = float(np.max(np.abs(diffusion.predict_x0(diffusion.forward_noising(x0, t, eps, s), t, eps, s) - x0)))
    return err <= 1e-12, f"max abs error {err:.2e}"


def _gradcheck() -> tuple[bool, str]:
    rng = stream(0, "selftest_grad")
    a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    err = ad.check_gradients(lambda: ad.mean(ad.tanh(ad.softmax_rows(a @ w))), [a, w])
    return err <= 1e-5, f"relative error {err:.2e}"


def _generator_determinism() -> tuple[bool, str]:
    a = synthdata.gen_physio(50, 7)
    b = synthdata.gen_physio(50, 7)
    viol = int(np.sum(synthdata.organ_budget_excess(a) > 0))
    return bool(np.array_equal(a, b) and viol == 0), f"identical={np.array_equal(a, b)}, violations={viol}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("rk4_convergence_order", _rk4_order),
    ("mass_conservation_cl0", _mass_conservation),
    ("diffusion_schedule_endpoints", _schedule),
    ("predict_x0_identity", _x0_identity),
    ("autodiff_gradcheck", _gradcheck),
    ("generator_determinism", _generator_determinism),
]


def run_selftest() -> list[Check]:
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as err:  # a crashing check is a failed check
            ok, detail = False, f"{type(err).__name__}: {err}"
        out.append(Check(name, ok, detail))
    return out
