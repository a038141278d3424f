"""
Asymptotic secret key rates over a lossy fiber with a noisy heterodyne receiver.

Reverse reconciliation on a linear Gaussian channel: the key rate is
``beta * I_AB - chi_BE``, where ``I_AB`` is the hard-decision M-PSK mutual
information and ``chi_BE`` is the Holevo bound computed from the covariance
matrix of the entanglement-based picture. The Alice-Bob correlation term of
that covariance matrix is a plug-in (:data:`CorrelationFn`): the Gaussian
modulation value is the default, :func:`psk_correlation` is the M-symmetric
coherent-state value.

Units: quadrature variances in shot-noise units (vacuum = 1). The receiver's
electrical noise ``epsilon_el`` is the ratio of electrical to shot noise at
the heterodyne output; ``eta`` its quantum efficiency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import gammaln

from .metrics import EPSILON_EL, ETA, snr_from_photons, theoretical_mi

CorrelationFn = Callable[[float, int], float]


class InvalidPhysicalState(ValueError):
    """A covariance matrix violated the uncertainty principle."""


def gaussian_correlation(va: float, M: int | None = None) -> float:
    """``sqrt(V**2 - 1)`` with ``V = va + 1`` (Gaussian modulation)."""
    return math.sqrt(va * (va + 2.0))


def psk_eigenvalues(va: float, M: int) -> np.ndarray:
    """Weights ``lambda_k = exp(-a2) * sum_{n = k mod M} a2**n / n!``, ``a2 = va/2``."""
    a2 = va / 2.0
    n_max = int(a2 + 12 * math.sqrt(a2) + 60)
    n = np.arange(n_max)
    log_terms = n * math.log(a2) - gammaln(n + 1) - a2 if a2 > 0 else np.where(n == 0, 0.0, -np.inf)
    lam = np.zeros(M)
    for k in range(M):
        lt = log_terms[k::M]
        top = np.max(lt)
        lam[k] = math.exp(top) * np.sum(np.exp(lt - top)) if np.isfinite(top) else 0.0
    return lam


def psk_correlation(va: float, M: int) -> float:
    """Alice-Bob correlation of the M-symmetric coherent-state purification.

    ``Z = 2 a2 sum_k lambda_{k-1}**1.5 / lambda_k**0.5`` with ``a2 = va/2``.
    For M = 4 this is the four-state protocol's correlation; for M = 2 the
    true state is not phase-symmetric and the value is an approximation.
    """
    lam = psk_eigenvalues(va, M)
    a2 = va / 2.0
    total = 0.0
    for k in range(M):
        prev = lam[(k - 1) % M]
        if lam[k] > 0:
            total += prev**1.5 / math.sqrt(lam[k])
    return 2.0 * a2 * total


def g_entropy(x) -> np.ndarray:
    """``(x+1) log2(x+1) - x log2(x)``, von Neumann entropy of a thermal mode."""
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        xlx = np.where(x > 0, x * np.log2(np.where(x > 0, x, 1.0)), 0.0)
    return (x + 1) * np.log2(x + 1) - xlx


def _omega(n_modes: int) -> np.ndarray:
    return np.kron(np.eye(n_modes), np.array([[0.0, 1.0], [-1.0, 0.0]]))


def symplectic_eigenvalues(gamma: np.ndarray) -> np.ndarray:
    """Symplectic spectrum of a ``2n x 2n`` covariance matrix (ascending)."""
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.shape[0] // 2
    ev = np.abs(np.linalg.eigvals(1j * _omega(n) @ gamma))
    return np.sort(ev)[::2]


def _entropy(nus: np.ndarray) -> float:
    if np.any(nus < 1 - 1e-9):
        raise InvalidPhysicalState(f"symplectic eigenvalue {nus.min():.12g} < 1")
    return float(np.sum(g_entropy((nus - 1) / 2)))


def _heterodyne_condition(gamma: np.ndarray, measured: int) -> np.ndarray:
    """Conditional covariance of the other modes after heterodyning mode ``measured``."""
    idx_b = [2 * measured, 2 * measured + 1]
    idx_x = [i for i in range(gamma.shape[0]) if i not in idx_b]
    gb = gamma[np.ix_(idx_b, idx_b)]
    gx = gamma[np.ix_(idx_x, idx_x)]
    c = gamma[np.ix_(idx_x, idx_b)]
    return gx - c @ np.linalg.solve(gb + np.eye(2), c.T)


def channel_covariance(T: float, xi: float, va: float, Z: float) -> np.ndarray:
    """Covariance of Alice's reference mode and Bob's mode at the receiver input."""
    V = va + 1.0
    vb = T * (V - 1.0) + 1.0 + T * xi
    I = np.eye(2)
    sz = np.diag([1.0, -1.0])
    c = math.sqrt(T) * Z * sz
    return np.block([[V * I, c], [c, vb * I]])


def holevo_bound(
    T: float,
    xi_snu: float,
    va: float,
    eta: float = ETA,
    epsilon_el: float = EPSILON_EL,
    M: int = 4,
    correlation: CorrelationFn = gaussian_correlation,
    trusted_receiver: bool = True,
) -> float:
    """Eve's Holevo information on Bob's heterodyne data, bits per symbol.

    ``xi_snu`` is the excess noise referred to the channel input. With a
    trusted receiver, its inefficiency and electrical noise are modeled by a
    beam splitter mixing Bob's mode with one half of an EPR pair held by
    nobody; otherwise they are folded into the channel.
    """
    if not 0 < T <= 1:
        raise ValueError("T must lie in (0, 1]")
    if xi_snu < 0:
        raise ValueError("xi must be non-negative")
    if not va > 0:
        raise ValueError("va must be positive")
    if not 0 < eta <= 1 or epsilon_el < 0:
        raise ValueError("need 0 < eta <= 1 and epsilon_el >= 0")
    Z = correlation(va, M)

    if not trusted_receiver:
        xi_eff = xi_snu + 2 * epsilon_el / (eta * T)
        gamma = channel_covariance(T * eta, xi_eff, va, Z)
        s_e = _entropy(symplectic_eigenvalues(gamma))
        s_e_given_b = _entropy(symplectic_eigenvalues(_heterodyne_condition(gamma, 1)))
        return max(s_e - s_e_given_b, 0.0)

    gamma_ab = channel_covariance(T, xi_snu, va, Z)
    s_e = _entropy(symplectic_eigenvalues(gamma_ab))
    if eta == 1.0:
        if epsilon_el > 0:
            raise ValueError("a trusted receiver with eta = 1 cannot carry electrical noise")
        cond = _heterodyne_condition(gamma_ab, 1)
        return max(s_e - _entropy(symplectic_eigenvalues(cond)), 0.0)

    # modes: A, B, F, G; EPR(F, G) with variance v models electrical noise
    v = 1.0 + 2.0 * epsilon_el / (1.0 - eta)
    I = np.eye(2)
    sz = np.diag([1.0, -1.0])
    epr = np.block([[v * I, math.sqrt(v * v - 1) * sz], [math.sqrt(v * v - 1) * sz, v * I]])
    gamma = np.zeros((8, 8))
    gamma[:4, :4] = gamma_ab
    gamma[4:, 4:] = epr
    t, r = math.sqrt(eta), math.sqrt(1.0 - eta)
    S = np.eye(8)
    S[2:6, 2:6] = np.block([[t * I, r * I], [-r * I, t * I]])
    gamma = S @ gamma @ S.T
    cond = _heterodyne_condition(gamma, 1)
    return max(s_e - _entropy(symplectic_eigenvalues(cond)), 0.0)


def fiber_transmission(distance_km: float, loss_db_per_km: float = 0.2) -> float:
    if distance_km < 0:
        raise ValueError("distance must be non-negative")
    return 10 ** (-loss_db_per_km * distance_km / 10)


# ---------------------------------------------------------------------------
# Excess-noise models: SNR_b (linear) -> xi' at Bob's receiver, SNU


def constant_excess_noise(xi: float = 0.0) -> Callable[[float], float]:
    return lambda snr_b: xi


@dataclass(frozen=True)
class PolynomialExcessNoise:
    """``10*log10(xi') = polyval(coeffs, 10*log10(SNR_b))`` (numpy order, highest first)."""

    coeffs: tuple

    def __call__(self, snr_b: float) -> float:
        return float(10 ** (np.polyval(self.coeffs, 10 * np.log10(snr_b)) / 10))

    @classmethod
    def fit(cls, snr_db, xi, degree: int = 2) -> "PolynomialExcessNoise":
        snr_db = np.asarray(snr_db, dtype=float)
        xi = np.asarray(xi, dtype=float)
        keep = xi > 0
        if keep.sum() <= degree:
            raise ValueError("not enough positive excess-noise points to fit")
        return cls(tuple(np.polyfit(snr_db[keep], 10 * np.log10(xi[keep]), degree)))


@dataclass
class LinkParams:
    """Fiber link, receiver and reconciliation settings.

    ``snr_floor`` (linear) is the lowest admissible ``SNR_b``: the receiver
    sensitivity, or the lowest SNR at which the excess-noise model is valid.
    """

    distance_km: float = 0.0
    loss_db_per_km: float = 0.2
    beta: float = 0.95
    eta: float = ETA
    epsilon_el: float = EPSILON_EL
    excess_noise_model: Callable[[float], float] = field(default_factory=constant_excess_noise)
    snr_floor: float = 10 ** (-33 / 10)
    correlation: CorrelationFn = gaussian_correlation
    trusted_receiver: bool = True
    launch_bounds: tuple = (1e-4, 10.0)

    def __post_init__(self):
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.distance_km < 0:
            raise ValueError("distance must be non-negative")

    @property
    def transmission(self) -> float:
        return fiber_transmission(self.distance_km, self.loss_db_per_km)


@dataclass
class KeyRateResult:
    rate_bits_per_symbol: float
    optimal_launch_photons: float
    snr_b_at_optimum: float
    xi_used: float = 0.0
    mi_bits: float = 0.0

    def rate_bits_per_second(self, symbol_rate: float = 17e9) -> float:
        return self.rate_bits_per_symbol * symbol_rate


def received_snr(link: LinkParams, launch_photons: float) -> float:
    """SNR of Bob's symbols for a given launch power (photons/symbol at Alice)."""
    return snr_from_photons(link.transmission * launch_photons, link.epsilon_el, link.eta)


def _evaluate(link: LinkParams, M: int, launch_photons: float) -> KeyRateResult:
    if not launch_photons > 0:
        raise ValueError("launch power must be positive")
    T = link.transmission
    snr_b = received_snr(link, launch_photons)
    if snr_b < link.snr_floor * (1 - 1e-12):
        return KeyRateResult(0.0, launch_photons, snr_b)
    xi_b = float(link.excess_noise_model(snr_b))
    # excess noise lowers the effective SNR of the hard decisions
    snr_eff = snr_b / (1.0 + xi_b / (2.0 * (1.0 + link.epsilon_el)))
    mi = theoretical_mi(snr_eff, M)
    if link.beta == 0:
        return KeyRateResult(0.0, launch_photons, snr_b, xi_b, mi)
    chi = holevo_bound(
        T, xi_b / (T * link.eta), 2.0 * launch_photons, link.eta, link.epsilon_el, M,
        link.correlation, link.trusted_receiver,
    )
    return KeyRateResult(max(link.beta * mi - chi, 0.0), launch_photons, snr_b, xi_b, mi)


def key_rate(link: LinkParams, M: int, launch_photons: float) -> float:
    """Asymptotic key rate in bits per symbol (0 when negative or below the SNR floor)."""
    return _evaluate(link, M, launch_photons).rate_bits_per_symbol


def optimize_launch_power(link: LinkParams, M: int, tol: float = 1e-4) -> KeyRateResult:
    """Maximize the key rate over launch power.

    A 41-point log grid over the admissible range brackets the optimum,
    which a golden-section search in log power then refines. The admissible
    range is ``link.launch_bounds`` intersected with ``SNR_b >= snr_floor``.
    """
    lo, hi = link.launch_bounds
    T = link.transmission
    n_min = link.snr_floor * (1 + link.epsilon_el) / (link.eta * T)
    lo = max(lo, n_min)
    if lo > hi:
        return KeyRateResult(0.0, hi, received_snr(link, hi))

    def f(logn):
        return _evaluate(link, M, math.exp(logn))

    grid = np.linspace(math.log(lo), math.log(hi), 41)
    vals = [f(x) for x in grid]
    rates = np.array([v.rate_bits_per_symbol for v in vals])
    best = int(np.argmax(rates))
    if rates[best] <= 0:
        return vals[0]
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, len(grid) - 1)]
    inv_phi = (math.sqrt(5) - 1) / 2
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc.rate_bits_per_symbol >= fd.rate_bits_per_symbol:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return max([vals[best], fc, fd], key=lambda r: r.rate_bits_per_symbol)
