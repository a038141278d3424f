"""
Fitting the phase-noise hyperparameters by energy minimization.

The energy of a parameter pair is the negative EKF log marginal likelihood
minus a log prior; it is minimized with a Nelder-Mead simplex working on the
logarithm of the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .phase_estimation import NumericalFailure, ekf_run, pilot_initial_state
from .signal_model import ReceivedSequence, RevelationMask, StateSpaceParams, SymbolSequence


class EnergyFailure(NumericalFailure):
    """EKF breakdown while evaluating the energy; carries the offending parameters."""

    def __init__(self, theta: StateSpaceParams, cause: Exception):
        super().__init__(f"energy evaluation failed at {theta}: {cause}")
        self.theta = theta


@dataclass(frozen=True)
class LogUniformPrior:
    """Flat density in log-parameter space on ``[low, high]`` per component."""

    low: float = 1e-20
    high: float = 1e-2

    def log_density(self, theta: StateSpaceParams) -> float:
        for v in theta.as_array():
            if not self.low <= v <= self.high:
                return -math.inf
        return 0.0


@dataclass(frozen=True)
class EnergyEvaluation:
    theta: StateSpaceParams
    energy: float
    K: int


def energy_function(
    theta: StateSpaceParams,
    b: ReceivedSequence,
    mask: RevelationMask,
    known: SymbolSequence,
    prior: LogUniformPrior = LogUniformPrior(),
    init: tuple | None = None,
) -> float:
    """Negative log posterior of ``theta`` up to a dataset-dependent constant.

    Outside the prior box the energy is ``+inf``. Values are comparable only
    between parameter sets evaluated on the same data.
    """
    if len(b) < 100:
        raise ValueError("the energy needs at least 100 symbols")
    if not (theta.sigma2_omega > 0 and theta.sigma2_phi > 0):
        raise ValueError("both variances must be positive")
    log_prior = prior.log_density(theta)
    if not math.isfinite(log_prior):
        return math.inf
    try:
        ll = ekf_run(b, mask, known, theta, init).log_likelihood
    except NumericalFailure as exc:
        raise EnergyFailure(theta, exc) from exc
    return -ll - log_prior


def evaluate_energy(theta, b, mask, known, **kwargs) -> EnergyEvaluation:
    return EnergyEvaluation(theta, energy_function(theta, b, mask, known, **kwargs), len(b))


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def _diameter(simplex: np.ndarray) -> float:
    diff = simplex[:, None, :] - simplex[None, :, :]
    return float(np.max(np.sqrt(np.sum(diff**2, axis=-1))))


def nelder_mead(
    f: Callable[[np.ndarray], float],
    x0: Sequence[float],
    step: float | Sequence[float] = 0.5,
    tolerance: float = 1e-6,
    max_iter: int = 500,
) -> SimplexResult:
    """Nelder-Mead minimization with coefficients 1, 2, 0.5, 0.5.

    The initial simplex is ``x0`` plus ``step`` along each axis. Stops when the
    simplex diameter falls below ``tolerance``; otherwise after ``max_iter``
    iterations with ``converged=False``. ``trace`` holds the best vertex
    after every iteration.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    steps = np.broadcast_to(np.asarray(step, dtype=float), (n,))
    simplex = np.vstack([x0] + [x0 + np.eye(n)[i] * steps[i] for i in range(n)])
    fvals = np.array([f(x) for x in simplex])
    trace = []
    it = 0
    converged = False
    while True:
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        trace.append((it, simplex[0].copy(), float(fvals[0])))
        if _diameter(simplex) < tolerance:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = f(xr)
        if fr < fvals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = f(xe)
            simplex[-1], fvals[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], fvals[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = f(xc)
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
                continue
        # shrink toward the best vertex
        simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
        fvals[1:] = [f(x) for x in simplex[1:]]
    return SimplexResult(simplex[0].copy(), float(fvals[0]), it, converged, trace)


@dataclass
class OptimizationResult:
    theta_hat: StateSpaceParams
    energy: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)

    def trace_rows(self) -> list[dict]:
        """Optimizer trace as table rows (iteration, parameters, energy)."""
        return [
            {"iteration": it, "sigma2_omega": th.sigma2_omega, "sigma2_phi": th.sigma2_phi, "energy": e}
            for it, th, e in self.trace
        ]


def simplex_minimize(
    objective: Callable[[StateSpaceParams], float],
    theta0: StateSpaceParams,
    tolerance: float = 1e-3,
    max_iter: int = 200,
    initial_step: float = math.log(10.0),
) -> OptimizationResult:
    """Minimize ``objective`` over ``theta`` with a simplex in natural-log coordinates.

    ``tolerance`` and ``initial_step`` are in log units, so positivity of the
    variances is structural.
    """

    def f(z):
        return objective(StateSpaceParams.from_array(np.exp(z)))

    res = nelder_mead(f, np.log(theta0.as_array()), initial_step, tolerance, max_iter)
    trace = [(it, StateSpaceParams.from_array(np.exp(z)), e) for it, z, e in res.trace]
    return OptimizationResult(
        StateSpaceParams.from_array(np.exp(res.x)), res.fun, res.iterations, res.converged, trace
    )


def fit_state_space_params(
    b: ReceivedSequence,
    mask: RevelationMask,
    known: SymbolSequence,
    theta0: StateSpaceParams,
    prior: LogUniformPrior = LogUniformPrior(),
    tolerance: float = 1e-3,
    max_iter: int = 200,
) -> OptimizationResult:
    """Energy minimization on one dataset; the EKF start is shared by all evaluations."""
    init = pilot_initial_state(b, mask, known)
    return simplex_minimize(
        lambda th: energy_function(th, b, mask, known, prior, init), theta0, tolerance, max_iter
    )
