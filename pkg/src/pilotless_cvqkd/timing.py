"""
Blockwise symbol-timing recovery.

Each block of the matched-filter output yields the Fourier coefficient of
its squared magnitude at the symbol rate (square-law / Oerder-Meyr
estimator). A two-state Kalman tracker follows the coefficient's argument
and its per-block drift across blocks; the tracked offset then drives a
fractional-delay correction and decimation to one sample per symbol.

Sign convention: a waveform delayed by ``tau`` symbol periods (see
:func:`~pilotless_cvqkd.signal_model.apply_timing_offset`) gives
``arg(X) = -2*pi*tau``, so ``timing_offset = -arg(X) / (2*pi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit
from scipy.signal import resample

from .phase_estimation import NumericalFailure, wrap_angle
from .signal_model import (
    PAPER_THETA,
    StateSpaceParams,
    Waveform,
    _centered_convolve,
    fractional_delay,
    gen_symbols,
    rng_stream,
    rrc_taps,
)

#: Timing drift from the reference setup's clock offset, symbol periods per block.
PAPER_DRIFT_PER_BLOCK = 0.032
#: Block length of the reference setup, symbols.
PAPER_BLOCK_LENGTH = 680_000
# sub-blocks used for the per-block SNR estimate
_SUB_BLOCKS = 16


@dataclass(frozen=True)
class TimingBlockResult:
    """Per-block estimator output.

    ``snr_x`` is estimated within the block from sub-block coefficients and
    is only a rough figure; :func:`estimate_snr_x` is the across-block value.
    """

    fourier_coefficient: complex
    block_index: int
    timing_offset: float
    snr_x: float


def _tone(power: np.ndarray, sps: int) -> complex:
    m = np.arange(len(power))
    return complex(np.sum(power * np.exp(-2j * np.pi * (m % sps) / sps)))


def oerder_meyr_block(w: Waveform, L: int, block_index: int = 0, start_symbol: int = 0) -> TimingBlockResult:
    """Square-law timing estimate from ``L`` symbols of ``w`` starting at ``start_symbol``.

    With 2 samples per symbol the symbol-rate tone of ``|w|**2`` sits at the
    folding frequency, so the block is first interpolated to 4 samples per
    symbol (band-limited FFT resampling).
    """
    sps = w.samples_per_symbol
    if sps < 2:
        raise ValueError("need at least 2 samples per symbol")
    if L < 1 or w.n_symbols - start_symbol < L:
        raise ValueError("waveform shorter than the requested block")
    x = np.asarray(w.samples[start_symbol * sps : (start_symbol + L) * sps])
    if sps == 2:
        x = resample(x, 2 * len(x))
        sps = 4
    power = x.real**2 + x.imag**2
    X = _tone(power, sps)
    # sub-block spread gives a rough within-block SNR
    sub = np.array([_tone(p, sps) for p in np.array_split(power, _SUB_BLOCKS)])
    spread = np.sum(np.abs(sub - sub.mean()) ** 2) / (_SUB_BLOCKS - 1)
    if spread <= 1e-30 * max(abs(X) ** 2, 1e-300):
        snr_x = math.inf
    else:
        # noise variance of X per quadrature is half the complex spread
        noise = _SUB_BLOCKS * spread
        snr_x = max(abs(X) ** 2 - noise, 0.0) / (noise / 2)
    offset = -np.angle(X) / (2 * np.pi) if X != 0 else 0.0
    offset = (offset + 0.5) % 1.0 - 0.5
    return TimingBlockResult(X, block_index, float(offset), float(snr_x))


def _detrend_rate(X: np.ndarray) -> float:
    """Per-block phase slope maximizing ``|sum X_n exp(-j r n)|``."""
    n = len(X)
    pad = 1 << int(np.ceil(np.log2(64 * n)))
    spec = np.abs(np.fft.fft(X, pad))
    k = int(np.argmax(spec))
    # parabolic refinement of the peak
    lo, mid, hi = spec[(k - 1) % pad], spec[k], spec[(k + 1) % pad]
    denom = lo - 2 * mid + hi
    shift = 0.5 * (lo - hi) / denom if denom != 0 else 0.0
    return float(wrap_angle(2 * np.pi * (k + shift) / pad))


def estimate_snr_x(results: Sequence[TimingBlockResult]) -> float:
    """SNR of the block Fourier coefficients after removing a linear phase trend.

    ``|mean(Y)|**2 / (mean(|Y - mean(Y)|**2) / 2)`` with ``Y_n = X_n exp(-j r n)``,
    i.e. noise variance per quadrature, so that ``Var(arg X) ~ 1 / SNR_X``.
    Returns ``inf`` for noiseless blocks.
    """
    if len(results) < 10:
        raise ValueError("need at least 10 blocks")
    X = np.array([r.fourier_coefficient for r in results])
    n = np.arange(len(X))
    Y = X * np.exp(-1j * _detrend_rate(X) * n)
    mean = Y.mean()
    var = np.mean(np.abs(Y - mean) ** 2)
    if var <= 1e-24 * abs(mean) ** 2:
        return math.inf
    return float(abs(mean) ** 2 / (var / 2))


# ---------------------------------------------------------------------------
# Tracker


@dataclass(frozen=True)
class TimingTrackerState:
    """Tracked ``arg X`` (unwrapped, rad), its drift (rad/block) and covariance."""

    timing_phase: float
    timing_drift: float
    covariance: np.ndarray
    block_index: int = 0

    def __post_init__(self):
        P = np.array(self.covariance, dtype=float).reshape(2, 2)
        P.setflags(write=False)
        object.__setattr__(self, "covariance", P)

    @property
    def offset(self) -> float:
        """Tracked timing offset in symbol periods (not wrapped)."""
        return -self.timing_phase / (2 * np.pi)

    @property
    def drift_symbols(self) -> float:
        return -self.timing_drift / (2 * np.pi)

    @classmethod
    def initial(
        cls, first: TimingBlockResult, drift_stddev: float = 0.5, measurement_var: float | None = None
    ) -> "TimingTrackerState":
        r = measurement_variance(first) if measurement_var is None else measurement_var
        return cls(float(np.angle(first.fourier_coefficient)), 0.0, np.diag([r, drift_stddev**2]), first.block_index)


def measurement_variance(result: TimingBlockResult, floor: float = 1e-12) -> float:
    """Variance of ``arg X`` implied by the block SNR, capped at the uniform value."""
    if math.isinf(result.snr_x):
        return floor
    if result.snr_x <= 0:
        return np.pi**2 / 3
    return float(min(max(1.0 / result.snr_x, floor), np.pi**2 / 3))


@dataclass(frozen=True)
class TimingProcessNoise:
    """Per-block process variances of the tracker (rad^2)."""

    phase: float
    drift: float

    @classmethod
    def from_phase_params(cls, params: StateSpaceParams, L: int) -> "TimingProcessNoise":
        """Per-symbol phase-model variances accumulated over a block of ``L`` symbols."""
        return cls(params.sigma2_phi * L, params.sigma2_omega * L)


def timing_ekf_step(
    state: TimingTrackerState,
    measurement: TimingBlockResult,
    params: StateSpaceParams | TimingProcessNoise = PAPER_THETA,
    L: int = PAPER_BLOCK_LENGTH,
    measurement_var: float | None = None,
) -> TimingTrackerState:
    """Predict one block ahead and update with ``arg X`` of ``measurement``.

    The measurement is the state's phase itself, so the filter is linear
    apart from the wrapped innovation. ``params`` given as phase-model
    parameters are converted with :meth:`TimingProcessNoise.from_phase_params`.
    """
    q = params if isinstance(params, TimingProcessNoise) else TimingProcessNoise.from_phase_params(params, L)
    r = measurement_variance(measurement) if measurement_var is None else measurement_var
    F = np.array([[1.0, 1.0], [0.0, 1.0]])
    x = F @ np.array([state.timing_phase, state.timing_drift])
    P = F @ state.covariance @ F.T + np.diag([q.phase, q.drift])
    nu = float(wrap_angle(np.angle(measurement.fourier_coefficient) - x[0]))
    S = P[0, 0] + r
    gain = P[:, 0] / S
    x = x + gain * nu
    A = np.eye(2) - np.outer(gain, [1.0, 0.0])
    P = A @ P @ A.T + r * np.outer(gain, gain)
    P = 0.5 * (P + P.T)
    if not (np.all(np.isfinite(P)) and P[0, 0] > 0 and P[1, 1] > 0 and np.linalg.det(P) > -1e-12 * P[0, 0] * P[1, 1]):
        raise NumericalFailure(f"timing covariance not positive definite at block {measurement.block_index}")
    return TimingTrackerState(float(x[0]), float(x[1]), P, measurement.block_index)


@dataclass
class TimingTrack:
    states: list = field(default_factory=list)
    measurements: list = field(default_factory=list)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([s.offset for s in self.states])

    @property
    def measured_offsets(self) -> np.ndarray:
        return np.array([m.timing_offset for m in self.measurements])


def track_timing(
    measurements: Sequence[TimingBlockResult],
    process_noise: StateSpaceParams | TimingProcessNoise = PAPER_THETA,
    L: int = PAPER_BLOCK_LENGTH,
    drift_stddev: float = 0.5,
    measurement_var: float | None = None,
) -> TimingTrack:
    """Run the tracker over a sequence of blocks (first block initializes it)."""
    if not measurements:
        raise ValueError("no measurements")
    state = TimingTrackerState.initial(measurements[0], drift_stddev, measurement_var)
    track = TimingTrack([state], [measurements[0]])
    for m in measurements[1:]:
        state = timing_ekf_step(state, m, process_noise, L, measurement_var)
        track.states.append(state)
        track.measurements.append(m)
    return track


def apply_timing_correction(w: Waveform, tracked_offset, taps: int = 64) -> Waveform:
    """Undo a timing offset and decimate to one sample per symbol.

    ``tracked_offset`` (symbol periods) is a scalar for the block or one
    value per symbol. The returned waveform has ``samples_per_symbol == 1``.
    """
    sps = w.samples_per_symbol
    n = w.n_symbols
    off = np.broadcast_to(np.asarray(tracked_offset, dtype=float), (n,))
    # output sample m reads the input at m + offset*sps
    per_sample = np.repeat(off, sps)
    per_sample = np.concatenate([per_sample, np.full(len(w.samples) - len(per_sample), off[-1] if n else 0.0)])
    y = fractional_delay(np.asarray(w.samples), -per_sample * sps, taps)
    return Waveform(y[::sps][:n], 1, w.rolloff, w.span_symbols)


# ---------------------------------------------------------------------------
# Block synthesis at full block length


def raised_cosine(t: np.ndarray, rolloff: float) -> np.ndarray:
    """Raised-cosine pulse at times ``t`` (symbol periods); peak 1 at ``t = 0``."""
    t = np.asarray(t, dtype=float)
    b = rolloff
    den = 1.0 - (2.0 * b * t) ** 2
    sing = np.abs(den) < 1e-10
    safe = np.where(sing, 1.0, den)
    out = np.sinc(t) * np.cos(np.pi * b * t) / safe
    return np.where(sing, np.pi / 4 * np.sinc(1 / (2 * b)), out)


@njit(cache=True)
def _superpose(symbols, chunk_taps, chunk, sps, half, n_out):
    out = np.zeros(n_out, dtype=np.complex128)
    n_taps = chunk_taps.shape[1]
    for k in range(symbols.size):
        taps = chunk_taps[k // chunk]
        start = k * sps - half
        a = symbols[k]
        for i in range(n_taps):
            m = start + i
            if 0 <= m < n_out:
                out[m] += a * taps[i]
    return out


def synthesize_matched_output(
    L: int,
    snr_b: float,
    tau_start: float,
    drift_per_symbol: float,
    seed: int,
    M: int = 4,
    sps: int = 4,
    rolloff: float = 0.1,
    span_symbols: int = 32,
    chunk: int = 1024,
) -> Waveform:
    """Matched-filter output of ``L`` delayed M-PSK symbols plus filtered noise.

    Symbol ``k`` arrives ``tau_start + drift_per_symbol * k`` symbol periods
    late; the delay is held constant over chunks of ``chunk`` symbols. The
    signal part uses the analytic raised-cosine pulse (the RRC pair), the
    noise is white noise through the RRC with variance ``1/snr_b`` at the
    output. Meant for long blocks where interpolating a whole waveform
    would be slow.
    """
    a = gen_symbols(M, L, seed).symbols
    half = span_symbols * sps // 2
    rel = (np.arange(2 * half + 1) - half) / sps
    n_chunks = -(-L // chunk)
    delays = tau_start + drift_per_symbol * (np.arange(n_chunks) * chunk + chunk / 2)
    chunk_taps = raised_cosine(rel[None, :] - delays[:, None], rolloff)
    sig = _superpose(np.ascontiguousarray(a), chunk_taps, chunk, sps, half, L * sps)
    if np.isfinite(snr_b):
        rng = rng_stream(seed, "timing-noise")
        white = (rng.standard_normal(L * sps) + 1j * rng.standard_normal(L * sps)) * math.sqrt(0.5 / snr_b)
        sig = sig + _centered_convolve(white, rrc_taps(sps, rolloff, span_symbols), L * sps)
    return Waveform(sig, sps, rolloff, span_symbols)


def simulate_timing_blocks(
    n_blocks: int,
    L: int,
    snr_b: float,
    seed: int,
    tau0: float = 0.0,
    drift_per_block: float = 0.0,
    M: int = 4,
    sps: int = 4,
    rolloff: float = 0.1,
) -> tuple[list, np.ndarray]:
    """Block estimates for a drifting timing offset.

    Returns the :class:`TimingBlockResult` list and the true mean offset of
    each block (symbol periods, unwrapped). Each block is an independent
    realization whose offset continues the drift.
    """
    results = []
    truth = np.empty(n_blocks)
    per_symbol = drift_per_block / L
    for n in range(n_blocks):
        start = tau0 + drift_per_block * n
        wrapped = (start + 0.5) % 1.0 - 0.5
        w = synthesize_matched_output(L, snr_b, wrapped, per_symbol, _block_seed(seed, n), M, sps, rolloff)
        results.append(oerder_meyr_block(w, L, n))
        truth[n] = start + drift_per_block / 2
    return results, truth


def _block_seed(seed: int, n: int) -> int:
    return int(rng_stream(seed, "timing-block", str(n)).integers(2**62))


def tracking_residual(track: TimingTrack, truth: np.ndarray) -> np.ndarray:
    """Tracked minus true offset, wrapped to [-0.5, 0.5) symbol periods."""
    d = track.offsets - np.asarray(truth)
    return (d + 0.5) % 1.0 - 0.5


__all__ = [
    "PAPER_DRIFT_PER_BLOCK",
    "PAPER_BLOCK_LENGTH",
    "TimingBlockResult",
    "TimingTrackerState",
    "TimingProcessNoise",
    "TimingTrack",
    "oerder_meyr_block",
    "estimate_snr_x",
    "measurement_variance",
    "timing_ekf_step",
    "track_timing",
    "apply_timing_correction",
    "raised_cosine",
    "synthesize_matched_output",
    "simulate_timing_blocks",
    "tracking_residual",
]
