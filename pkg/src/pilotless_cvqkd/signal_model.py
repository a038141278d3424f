"""
Synthetic ground truth for pilotless M-PSK reception.

Everything here is a pure function of its inputs and seed: symbol draws,
the random-walk phase/frequency trajectory, the AWGN channel, revelation
masks and the oversampled root-raised-cosine waveform used by the timing
recovery chain.

Normalization: the signal component has unit mean power and the channel
noise has mean power ``1 / snr_b``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import oaconvolve, windows

from ._kernels import fractional_delay_kernel

#: Optimized state-space parameters of the laser phase model (rad^2).
PAPER_SIGMA2_OMEGA = 1.66e-16
PAPER_SIGMA2_PHI = 6.36e-9


def rng_stream(seed: int, *names: str) -> np.random.Generator:
    """Named, reproducible random stream derived from a master seed.

    Streams with different names are statistically independent; the same
    (seed, names) pair always yields the same stream.
    """
    key = tuple(zlib.crc32(name.encode("utf-8")) for name in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StateSpaceParams:
    """Random-walk variances of the phase model, in rad^2 per symbol."""

    sigma2_omega: float = PAPER_SIGMA2_OMEGA
    sigma2_phi: float = PAPER_SIGMA2_PHI

    def __post_init__(self):
        for name in ("sigma2_omega", "sigma2_phi"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma2_omega, self.sigma2_phi])

    @classmethod
    def from_array(cls, values) -> "StateSpaceParams":
        return cls(float(values[0]), float(values[1]))

    def scaled(self, factor: float) -> "StateSpaceParams":
        return StateSpaceParams(self.sigma2_omega * factor, self.sigma2_phi * factor)


PAPER_THETA = StateSpaceParams(PAPER_SIGMA2_OMEGA, PAPER_SIGMA2_PHI)


@dataclass(frozen=True)
class SymbolSequence:
    """Unit-modulus M-PSK symbols together with their alphabet indices."""

    symbols: np.ndarray
    modulation_order: int
    indices: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "symbols", _frozen(np.asarray(self.symbols, dtype=complex)))
        if self.indices is None:
            idx = symbol_indices(self.symbols, self.modulation_order)
        else:
            idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", _frozen(idx))

    def __len__(self) -> int:
        return len(self.symbols)

    def rotated(self, steps: int = 1) -> "SymbolSequence":
        """Rotate every symbol by ``steps * 2*pi/M``."""
        M = self.modulation_order
        idx = (self.indices + steps) % M
        return SymbolSequence(psk_alphabet(M)[idx], M, idx)


@dataclass(frozen=True)
class PhaseTrajectory:
    """Unwrapped carrier phase and normalized frequency per symbol."""

    phase: np.ndarray
    frequency: np.ndarray
    params: StateSpaceParams = PAPER_THETA

    def __post_init__(self):
        object.__setattr__(self, "phase", _frozen(np.asarray(self.phase, dtype=float)))
        object.__setattr__(self, "frequency", _frozen(np.asarray(self.frequency, dtype=float)))
        if self.phase.shape != self.frequency.shape:
            raise ValueError("phase and frequency must have equal length")

    def __len__(self) -> int:
        return len(self.phase)

    @classmethod
    def from_phase(cls, phase, params: StateSpaceParams = PAPER_THETA) -> "PhaseTrajectory":
        """Wrap an externally measured phase trace.

        The trace is unwrapped; the frequency is the forward difference,
        repeated at the last sample.
        """
        phase = np.unwrap(np.asarray(phase, dtype=float))
        if phase.size < 2:
            freq = np.zeros_like(phase)
        else:
            freq = np.append(np.diff(phase), phase[-1] - phase[-2])
        return cls(phase, freq, params)


@dataclass(frozen=True)
class ReceivedSequence:
    """Normalized channel output with known total noise power."""

    samples: np.ndarray
    total_noise_power: float
    snr_b: float

    def __post_init__(self):
        object.__setattr__(self, "samples", _frozen(np.asarray(self.samples, dtype=complex)))

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class RevelationMask:
    revealed: np.ndarray
    p_r: float

    def __post_init__(self):
        object.__setattr__(self, "revealed", _frozen(np.asarray(self.revealed, dtype=bool)))

    def __len__(self) -> int:
        return len(self.revealed)


@dataclass(frozen=True)
class Waveform:
    """Oversampled complex baseband signal.

    Sample ``k * samples_per_symbol`` is the nominal sampling instant of
    symbol ``k`` (filter group delay already removed).
    """

    samples: np.ndarray
    samples_per_symbol: int
    rolloff: float
    span_symbols: int = 32

    def __post_init__(self):
        object.__setattr__(self, "samples", _frozen(np.asarray(self.samples, dtype=complex)))

    @property
    def n_symbols(self) -> int:
        return len(self.samples) // self.samples_per_symbol

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.samples_per_symbol, self.rolloff, self.span_symbols)


# ---------------------------------------------------------------------------
# Symbols, phase, channel, revelation


def psk_alphabet(M: int) -> np.ndarray:
    """Points ``exp(j*2*pi*i/M)`` for ``i = 1..M`` (array position ``i-1``)."""
    if int(M) != M or M < 2:
        raise ValueError(f"modulation order must be an integer >= 2, got {M}")
    i = np.arange(1, M + 1)
    return np.exp(2j * np.pi * i / M)


def symbol_indices(symbols: np.ndarray, M: int) -> np.ndarray:
    """Alphabet position of each symbol; raises if a symbol is off-alphabet."""
    symbols = np.asarray(symbols, dtype=complex)
    alphabet = psk_alphabet(M)
    dist = np.abs(symbols[:, None] - alphabet[None, :])
    idx = np.argmin(dist, axis=1)
    if symbols.size and np.max(dist[np.arange(len(idx)), idx]) > 1e-9:
        raise ValueError("symbols are not members of the M-PSK alphabet")
    return idx


def gen_symbols(M: int, K: int, seed: int) -> SymbolSequence:
    """Draw ``K`` i.i.d. uniform M-PSK symbols."""
    if K < 1:
        raise ValueError("K must be >= 1")
    alphabet = psk_alphabet(M)
    idx = rng_stream(seed, "symbols").integers(0, M, size=int(K))
    return SymbolSequence(alphabet[idx], M, idx)


def gen_phase_trajectory(
    K: int,
    params: StateSpaceParams,
    init_phase: float = 0.0,
    init_frequency: float = 0.0,
    seed: int = 0,
) -> PhaseTrajectory:
    """Random-walk phase with a random-walk normalized frequency.

    ``phi[k] = phi[k-1] + omega[k-1] + w[k]`` and
    ``omega[k] = omega[k-1] + v[k]``, with ``w ~ N(0, sigma2_phi)`` and
    ``v ~ N(0, sigma2_omega)``. The phase is left unwrapped.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = rng_stream(seed, "phase")
    w = rng.standard_normal(K) * np.sqrt(params.sigma2_phi)
    v = rng.standard_normal(K) * np.sqrt(params.sigma2_omega)
    w[0] = 0.0
    v[0] = 0.0
    freq = init_frequency + np.cumsum(v)
    steps = np.empty(K)
    steps[0] = init_phase
    steps[1:] = freq[:-1] + w[1:]
    phase = np.cumsum(steps)
    return PhaseTrajectory(phase, freq, params)


def load_phase_trace(path, params: StateSpaceParams = PAPER_THETA) -> PhaseTrajectory:
    """Import a measured phase trace (``.npy`` or one-column text/CSV, rad)."""
    path = Path(path)
    if path.suffix == ".npy":
        phase = np.load(path)
    else:
        phase = np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None, ndmin=1)
    return PhaseTrajectory.from_phase(np.ravel(phase), params)


def apply_awgn_channel(
    a: SymbolSequence, phi: PhaseTrajectory, snr_b: float, seed: int
) -> ReceivedSequence:
    """``b[k] = a[k] * exp(j*phi[k]) + n[k]`` with ``E|n|^2 = 1/snr_b``.

    ``snr_b = inf`` produces the noiseless signal (``total_noise_power = 0``).
    """
    if len(a) != len(phi):
        raise ValueError(f"length mismatch: {len(a)} symbols vs {len(phi)} phases")
    if not snr_b > 0:
        raise ValueError("snr_b must be positive")
    clean = a.symbols * np.exp(1j * phi.phase)
    if np.isinf(snr_b):
        return ReceivedSequence(clean, 0.0, snr_b)
    p_tn = 1.0 / snr_b
    rng = rng_stream(seed, "awgn")
    noise = rng.standard_normal((2, len(a))) * np.sqrt(p_tn / 2)
    return ReceivedSequence(clean + noise[0] + 1j * noise[1], p_tn, snr_b)


def gen_revelation_mask(K: int, p_r: float, seed: int) -> RevelationMask:
    if not 0.0 <= p_r <= 1.0:
        raise ValueError(f"p_r must lie in [0, 1], got {p_r}")
    revealed = rng_stream(seed, "reveal").random(int(K)) < p_r
    return RevelationMask(revealed, p_r)


# ---------------------------------------------------------------------------
# Pulse shaping and timing


def rrc_taps(sps: int, rolloff: float, span_symbols: int = 32, taper: float = 0.5) -> np.ndarray:
    """Unit-energy root-raised-cosine impulse response, ``span*sps + 1`` taps.

    The truncated response is tapered with a Tukey window of shape
    ``taper`` (0 is a plain truncation); at span 32 and rolloff 0.1 the
    default keeps the cascade's residual ISI below 1e-3 per symbol.
    """
    if sps < 2:
        raise ValueError("sps must be >= 2")
    if not 0 < rolloff <= 1:
        raise ValueError("rolloff must lie in (0, 1]")
    n = span_symbols * sps
    t = (np.arange(n + 1) - n / 2) / sps
    b = rolloff
    h = np.empty_like(t)
    at_zero = np.isclose(t, 0.0)
    at_sing = np.isclose(np.abs(t), 1 / (4 * b))
    regular = ~(at_zero | at_sing)
    tr = t[regular]
    h[regular] = (
        np.sin(np.pi * tr * (1 - b)) + 4 * b * tr * np.cos(np.pi * tr * (1 + b))
    ) / (np.pi * tr * (1 - (4 * b * tr) ** 2))
    h[at_zero] = 1 - b + 4 * b / np.pi
    h[at_sing] = (b / np.sqrt(2)) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
    )
    if taper > 0:
        h = h * windows.tukey(len(h), taper)
    return h / np.sqrt(np.sum(h**2))


def _centered_convolve(x: np.ndarray, h: np.ndarray, length: int) -> np.ndarray:
    full = oaconvolve(x, h)
    delay = (len(h) - 1) // 2
    return full[delay : delay + length]


def rrc_pulse_shape(
    a, sps: int = 4, rolloff: float = 0.1, span_symbols: int = 32
) -> Waveform:
    """Upsample symbols by ``sps`` and filter with a unit-energy RRC.

    The output has ``sps * len(a)`` samples; the first and last
    ``span_symbols`` symbols carry filter transients.
    """
    if span_symbols < 8:
        raise ValueError("span_symbols must be >= 8")
    symbols = a.symbols if isinstance(a, SymbolSequence) else np.asarray(a, dtype=complex)
    h = rrc_taps(sps, rolloff, span_symbols)
    up = np.zeros(len(symbols) * sps, dtype=complex)
    up[::sps] = symbols
    return Waveform(_centered_convolve(up, h, len(up)), sps, rolloff, span_symbols)


def matched_filter(w: Waveform) -> Waveform:
    """Filter with the (real, symmetric) RRC matching ``w``'s pulse."""
    h = rrc_taps(w.samples_per_symbol, w.rolloff, w.span_symbols)
    return w.with_samples(_centered_convolve(np.asarray(w.samples), h, len(w.samples)))


def add_waveform_noise(w: Waveform, snr_b: float, seed: int) -> Waveform:
    """White complex noise such that the matched-filter output has ``E|n|^2 = 1/snr_b``."""
    if np.isinf(snr_b):
        return w
    rng = rng_stream(seed, "waveform-noise")
    noise = rng.standard_normal((2, len(w.samples))) * np.sqrt(0.5 / snr_b)
    return w.with_samples(w.samples + noise[0] + 1j * noise[1])


def fractional_delay(
    samples: np.ndarray, delay_samples, taps: int = 64, kaiser_beta: float = 8.0
) -> np.ndarray:
    """Kaiser-windowed sinc interpolation ``y[m] = x(m - d[m])``.

    ``delay_samples`` is a scalar or one delay per output sample. Samples
    outside the input are treated as zero. Integer delays are exact shifts.
    """
    x = np.ascontiguousarray(samples, dtype=complex)
    d = np.broadcast_to(np.asarray(delay_samples, dtype=float), x.shape)
    return fractional_delay_kernel(x, np.ascontiguousarray(d), int(taps), float(kaiser_beta))


def apply_timing_offset(
    w: Waveform, tau0: float, drift_per_symbol: float = 0.0, taps: int = 64
) -> Waveform:
    """Delay the waveform by ``tau(k) = tau0 + drift_per_symbol * k`` symbol periods."""
    if not abs(tau0) < 1:
        raise ValueError("|tau0| must be < 1 symbol period")
    sps = w.samples_per_symbol
    m = np.arange(len(w.samples))
    delay = (tau0 + drift_per_symbol * m / sps) * sps
    return w.with_samples(fractional_delay(w.samples, delay, taps))
