"""
Receiver calibration and evaluation quantities.

Covers the power decomposition of Bob's symbols (quantum signal, shot
noise, electrical noise, excess noise), excess noise in shot-noise units by
two independent routes, the photon budget of a non-ideal heterodyne
receiver, and hard-decision mutual information, both measured and
theoretical for an AWGN channel.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate
from scipy.special import erfc

from .signal_model import SymbolSequence, psk_alphabet, rng_stream

#: Receiver characteristics measured in the reference setup.
EPSILON_EL = 0.70
ETA = 0.232


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class CalibrationRecord:
    p_sn: float
    p_en: float
    epsilon_el: float
    eta: float = ETA

    @classmethod
    def from_powers(cls, p_sn: float, p_en: float, eta: float = ETA) -> "CalibrationRecord":
        return cls(p_sn, p_en, p_en / p_sn, eta)


@dataclass
class MetricsReport:
    """Per-trial evaluation. ``excess_noise_snu`` may be negative (not clipped)."""

    p_b: float
    p_q: float
    excess_noise_snu: float
    photons_per_symbol: float
    mi_bits: float
    mi_theory_bits: float

    @property
    def mi_negative(self) -> bool:
        return self.mi_bits < 0

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Power and excess noise


def estimate_quantum_power(a, b) -> float:
    """``|mean(a * conj(b))|**2``.

    Unbiased only asymptotically: with ``b`` independent of ``a`` the
    estimate is about ``P_noise / K``.
    """
    a = a.symbols if isinstance(a, SymbolSequence) else np.asarray(a)
    b = np.asarray(getattr(b, "samples", b))
    if len(a) != len(b):
        raise ValueError("a and b must have equal length")
    return float(np.abs(np.mean(a * np.conj(b))) ** 2)


def excess_noise_calibrated(p_b: float, p_q: float, p_sn: float, p_en: float) -> float:
    """Excess noise in shot-noise units, ``2 (P_b - P_Q - P_SN - P_EN) / P_SN``."""
    if not p_sn > 0:
        raise ValueError("p_sn must be positive")
    return 2.0 * (p_b - p_q - p_sn - p_en) / p_sn


def excess_noise_from_phase(snr_b: float, epsilon_el: float, phase_err) -> float:
    """Excess noise induced by a carrier phase error sequence.

    ``2 * snr_b * (1 + epsilon_el) * mean(sin(err)**2)``; no small-angle
    approximation.
    """
    if not snr_b > 0:
        raise ValueError("snr_b must be positive")
    err = np.asarray(phase_err, dtype=float)
    return float(2.0 * snr_b * (1.0 + epsilon_el) * np.mean(np.sin(err) ** 2))


def photons_per_symbol(snr_b: float, epsilon_el: float = EPSILON_EL, eta: float = ETA) -> float:
    """Received photons per symbol ``N_B = SNR_b (1 + eps_el) / eta``."""
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    if snr_b < 0:
        raise ValueError("snr_b must be non-negative")
    return snr_b * (1.0 + epsilon_el) / eta


def snr_from_photons(n_b: float, epsilon_el: float = EPSILON_EL, eta: float = ETA) -> float:
    """Inverse of :func:`photons_per_symbol`."""
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    return n_b * eta / (1.0 + epsilon_el)


def receiver_penalty_db(epsilon_el: float = EPSILON_EL, eta: float = ETA) -> float:
    """SNR penalty against an ideal heterodyne receiver, in dB."""
    return 10 * np.log10((1.0 + epsilon_el) / eta)


@dataclass(frozen=True)
class NoiseCalibrationScenario:
    """True receiver noise for a simulated two-stage calibration."""

    p_sn: float = 1.0
    p_en: float = EPSILON_EL
    n_samples: int = 1_000_000
    eta: float = ETA


def simulate_noise_calibration(scenario: NoiseCalibrationScenario, seed: int) -> CalibrationRecord:
    """Simulated noise calibration with the quantum signal switched off.

    Stage one records shot plus electrical noise (LO on), stage two only
    electrical noise (LO off). Both are circular Gaussian sequences of
    ``n_samples``; the shot-noise estimate is the difference of their sample
    powers.
    """
    K = int(scenario.n_samples)

    def record(power, name):
        z = rng_stream(seed, "calibration", name).standard_normal((2, K))
        return np.mean(np.sum(z**2, axis=0)) * power / 2

    p_total = record(scenario.p_sn + scenario.p_en, "lo-on")
    p_en = record(scenario.p_en, "lo-off")
    return CalibrationRecord.from_powers(p_total - p_en, p_en, scenario.eta)


def lo_drift_bias(relative_drift: float) -> float:
    """Excess-noise bias (SNU) from LO power drift between calibration and signal run.

    The shot noise of the signal run is ``(1 + d)`` times the calibrated
    value while the quantum power is estimated in-run, so the bias is ``2 d``.
    """
    return 2.0 * relative_drift


# ---------------------------------------------------------------------------
# Mutual information


def hard_decisions(b, M: int) -> np.ndarray:
    """Nearest-point M-PSK decisions (alphabet positions); ties go to the lower index."""
    b = np.asarray(getattr(b, "samples", b))
    alphabet = psk_alphabet(M)
    out = np.empty(len(b), dtype=np.int64)
    step = 1 << 18
    for start in range(0, len(b), step):
        chunk = b[start : start + step]
        out[start : start + step] = np.argmax(
            np.real(chunk[:, None] * np.conj(alphabet)[None, :]), axis=1
        )
    return out


def _indices(a, M):
    if isinstance(a, SymbolSequence):
        return np.asarray(a.indices)
    return hard_decisions(np.asarray(a), M)


def joint_histogram(a, b, M: int) -> np.ndarray:
    """Empirical ``p(a = j, a_hat = i)`` as an ``(M, M)`` array indexed ``[j, i]``."""
    ia = _indices(a, M)
    ib = hard_decisions(b, M)
    if len(ia) != len(ib):
        raise ValueError("a and b must have equal length")
    counts = np.bincount(ia * M + ib, minlength=M * M).reshape(M, M)
    return counts / max(len(ia), 1)


def mutual_information(joint: np.ndarray) -> float:
    """Mutual information (bits) of a joint probability table; ``0 log 0 = 0``."""
    joint = np.asarray(joint, dtype=float)
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (pa @ pb)[nz])))


def hard_decision_mi(a, b, M: int) -> float:
    """Plug-in hard-decision mutual information between Alice and Bob.

    Decisions are phase-sector based, so ``b`` may be in either
    normalization (unit signal or unit noise).
    """
    return mutual_information(joint_histogram(a, b, M))


def mi_standard_error(joint: np.ndarray, K: int) -> float:
    """Delta-method standard error of the plug-in MI estimate from ``K`` samples."""
    joint = np.asarray(joint, dtype=float)
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    info = np.log2(joint[nz] / (pa @ pb)[nz])
    mi = np.sum(joint[nz] * info)
    var = np.sum(joint[nz] * info**2) - mi**2
    return float(np.sqrt(max(var, 0.0) / K))


def phase_density(beta, snr_b: float, alpha: float = 0.0):
    """Density of ``arg(sqrt(snr) e^{j alpha} + n)``, ``E|n|^2 = 1``."""
    psi = alpha - np.asarray(beta, dtype=float)
    root = np.sqrt(snr_b)
    c = np.cos(psi)
    return np.exp(-snr_b) / (2 * np.pi) + root / (2 * np.sqrt(np.pi)) * c * np.exp(
        -snr_b * np.sin(psi) ** 2
    ) * erfc(-root * c)


def _quad(f, lo, hi, points=None):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(f, lo, hi, epsabs=1e-10, epsrel=1e-12, limit=200, points=points)
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(str(exc)) from exc
    return val


def decision_probabilities(snr_b: float, M: int) -> np.ndarray:
    """``P(decision offset = d | sent)`` for ``d = 0..M-1`` (sector index offsets)."""
    if snr_b < 0:
        raise ValueError("snr_b must be non-negative")
    psk_alphabet(M)
    width = 2 * np.pi / M
    probs = np.empty(M)
    for d in range(M):
        center = d * width
        lo, hi = center - width / 2, center + width / 2
        points = [0.0] if lo < 0.0 < hi else None
        probs[d] = _quad(lambda x: phase_density(x, snr_b), lo, hi, points)
    return probs


def theoretical_joint(snr_b: float, M: int) -> np.ndarray:
    """Circulant joint table ``p(a = j, a_hat = i)`` for the ideal AWGN channel."""
    probs = decision_probabilities(snr_b, M)
    j = np.arange(M)
    return probs[(j[None, :] - j[:, None]) % M] / M


def theoretical_mi(snr_b: float, M: int) -> float:
    """Hard-decision mutual information (bits/symbol) of M-PSK over AWGN."""
    if snr_b == 0:
        return 0.0
    return max(mutual_information(theoretical_joint(snr_b, M)), 0.0)
