"""
Carrier phase estimation at ultra-low SNR.

A bootstrap particle filter and a backward-simulation particle smoother on
the two-state model (phase, normalized frequency), with a measurement model
that switches between a single Gaussian (revealed symbol) and an
equal-weight M-PSK mixture (unrevealed symbol). An extended Kalman filter on
the same state space provides the prediction-error likelihood used for
parameter fitting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .signal_model import (
    PAPER_THETA,
    ReceivedSequence,
    RevelationMask,
    StateSpaceParams,
    SymbolSequence,
    psk_alphabet,
    rng_stream,
)

logger = logging.getLogger(__name__)

_CHUNK = 2048


class DegeneracyError(RuntimeError):
    """All particle weights vanished at a filter step."""

    def __init__(self, step: int):
        super().__init__(f"particle weights degenerated at step {step}")
        self.step = step


class NumericalFailure(RuntimeError):
    """Covariance lost positive definiteness or a quadrature failed."""


@dataclass(frozen=True)
class SmootherConfig:
    """Particle filter/smoother settings.

    ``init_phase_stddev=None`` draws initial phases uniformly: over the full
    circle if any symbol is revealed, otherwise over ``[0, 2*pi/M)``.
    """

    n_particles: int = 200
    n_trajectories: int = 10
    resample_fraction: float = 0.2
    params: StateSpaceParams = PAPER_THETA
    init_phase_mean: float = 0.0
    init_phase_stddev: float | None = None
    init_frequency_mean: float = 0.0
    init_frequency_stddev: float = 1e-5

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        if not 0 < self.resample_fraction <= 1:
            raise ValueError("resample_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class ParticleCloud:
    phases: np.ndarray
    frequencies: np.ndarray
    log_weights: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - np.max(self.log_weights))
        return w / w.sum()

    @property
    def effective_count(self) -> float:
        return effective_count(self.log_weights)

    def circular_mean(self) -> float:
        return float(np.angle(np.sum(self.weights * np.exp(1j * self.phases))))


@dataclass
class ParticleHistory:
    """Per-step filter clouds, stored before any resampling at that step."""

    phases: np.ndarray  # (K, N)
    frequencies: np.ndarray  # (K, N)
    log_weights: np.ndarray  # (K, N)

    def __len__(self) -> int:
        return self.phases.shape[0]

    def __getitem__(self, k: int) -> ParticleCloud:
        return ParticleCloud(self.phases[k], self.frequencies[k], self.log_weights[k])


@dataclass
class SmootherOutput:
    phase_estimate: np.ndarray
    effective_count: np.ndarray
    log_likelihood: float
    degenerate_steps: list[int] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return bool(self.degenerate_steps)


@dataclass
class FilterResult:
    clouds: ParticleHistory
    output: SmootherOutput
    final_cloud: ParticleCloud
    """Cloud after the last step's resampling; seeds the next block."""
    resample_count: int = 0


@dataclass
class EKFResult:
    phase: np.ndarray
    frequency: np.ndarray
    log_density: np.ndarray

    @property
    def log_likelihood(self) -> float:
        return float(np.sum(self.log_density))

    def as_smoother_output(self) -> SmootherOutput:
        return SmootherOutput(
            np.angle(np.exp(1j * self.phase)), np.ones_like(self.phase), self.log_likelihood
        )


def effective_count(log_weights) -> float:
    """``1 / sum(w**2)`` of the normalized weights."""
    lw = np.asarray(log_weights, dtype=float)
    w = np.exp(lw - np.max(lw))
    w /= w.sum()
    return float(1.0 / np.sum(w**2))


def wrap_angle(x):
    """Map angles to (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=float) + np.pi, 2 * np.pi) - np.pi
    y = np.where(y == -np.pi, np.pi, y)
    return y if np.ndim(y) else float(y)


def measurement_loglik(
    sample: complex,
    phase: float,
    revealed: bool,
    known_symbol: complex | None,
    P_TN: float,
    M: int,
) -> float:
    """Log density of one normalized sample given the carrier phase.

    A revealed symbol gives a circular Gaussian around
    ``known_symbol * exp(j*phase)`` with per-quadrature variance ``P_TN/2``;
    an unrevealed one gives the equal-weight mixture over the M-PSK alphabet.
    """
    if not P_TN > 0:
        raise ValueError("P_TN must be positive")
    if revealed and known_symbol is None:
        raise ValueError("a revealed sample needs its known symbol")
    known = complex(known_symbol) if revealed else 0j
    return float(
        _kernels.measurement_loglik_kernel(
            complex(sample), float(phase), bool(revealed), known, psk_alphabet(M), float(P_TN)
        )
    )


def _check_lengths(b, mask, known):
    if not (len(b) == len(mask) == len(known)):
        raise ValueError(
            f"length mismatch: samples {len(b)}, mask {len(mask)}, symbols {len(known)}"
        )


def _initial_cloud(cfg: SmootherConfig, M: int, any_revealed: bool, rng) -> ParticleCloud:
    N = cfg.n_particles
    if cfg.init_phase_stddev is None:
        width = 2 * np.pi if any_revealed else 2 * np.pi / M
        lo = cfg.init_phase_mean - np.pi if any_revealed else cfg.init_phase_mean
        phases = lo + width * rng.random(N)
    else:
        phases = cfg.init_phase_mean + cfg.init_phase_stddev * rng.standard_normal(N)
    freqs = cfg.init_frequency_mean + cfg.init_frequency_stddev * rng.standard_normal(N)
    return ParticleCloud(phases, freqs, np.full(N, -np.log(N)))


def bootstrap_filter(
    b: ReceivedSequence,
    mask: RevelationMask,
    known: SymbolSequence,
    cfg: SmootherConfig = SmootherConfig(),
    seed: int = 0,
    initial_cloud: ParticleCloud | None = None,
    on_degeneracy: str = "raise",
) -> FilterResult:
    """Bootstrap particle filter with systematic resampling.

    Parameters
    ----------
    b, mask, known
        Normalized samples, revelation flags and Alice's symbols (only the
        revealed ones are consulted).
    cfg
        Particle count, resampling threshold, dynamics and prior.
    seed
        Master seed for the filter's random stream.
    initial_cloud
        Continue from a previous block's final cloud instead of the prior;
        the first sample is then preceded by a propagation step.
    on_degeneracy
        ``"raise"`` raises :class:`DegeneracyError`; ``"reset"`` restores
        uniform weights and records the step in ``degenerate_steps``.

    Returns
    -------
    FilterResult
        Stored clouds, filtered circular-mean phase, ``N_eff`` per step and
        the accumulated prediction log-likelihood.
    """
    _check_lengths(b, mask, known)
    if on_degeneracy not in ("raise", "reset"):
        raise ValueError("on_degeneracy must be 'raise' or 'reset'")
    if not b.total_noise_power > 0:
        raise ValueError("the particle filter needs a positive total noise power")
    K = len(b)
    N = cfg.n_particles
    M = known.modulation_order
    rng = rng_stream(seed, "particle-filter")

    if initial_cloud is None:
        cloud = _initial_cloud(cfg, M, bool(np.any(mask.revealed)), rng)
        start_fresh = True
    else:
        cloud = initial_cloud
        start_fresh = False
    phases = np.array(cloud.phases, dtype=float)
    freqs = np.array(cloud.frequencies, dtype=float)
    logw = np.array(cloud.log_weights, dtype=float)
    logw -= np.logaddexp.reduce(logw)

    hist = ParticleHistory(np.empty((K, N)), np.empty((K, N)), np.empty((K, N)))
    est = np.empty(K)
    neff = np.empty(K)
    resampled = np.zeros(K, dtype=bool)
    degenerate = np.zeros(K, dtype=bool)
    samples = np.ascontiguousarray(b.samples)
    revealed = np.ascontiguousarray(mask.revealed)
    symbols = np.ascontiguousarray(known.symbols)
    alphabet = psk_alphabet(M)
    s_phi = np.sqrt(cfg.params.sigma2_phi)
    s_om = np.sqrt(cfg.params.sigma2_omega)

    loglik = 0.0
    for start in range(0, K, _CHUNK):
        stop = min(start + _CHUNK, K)
        n = stop - start
        z_phi = rng.standard_normal((n, N))
        z_om = rng.standard_normal((n, N))
        u = rng.random(n)
        loglik += _kernels.pf_chunk(
            samples[start:stop], revealed[start:stop], symbols[start:stop], alphabet,
            float(b.total_noise_power), s_phi, s_om, float(cfg.resample_fraction),
            phases, freqs, logw, z_phi, z_om, u, start_fresh and start == 0,
            hist.phases[start:stop], hist.frequencies[start:stop],
            hist.log_weights[start:stop], est[start:stop], neff[start:stop],
            resampled[start:stop], degenerate[start:stop],
        )
        if on_degeneracy == "raise" and degenerate[start:stop].any():
            raise DegeneracyError(int(start + np.argmax(degenerate[start:stop])))

    steps = [int(k) for k in np.flatnonzero(degenerate)]
    if steps:
        logger.warning("particle filter degenerated at %d steps (first %d)", len(steps), steps[0])
    out = SmootherOutput(est, neff, float(loglik), steps)
    return FilterResult(hist, out, ParticleCloud(phases, freqs, logw), int(resampled.sum()))


def backward_simulation_smoother(
    clouds: ParticleHistory,
    n_trajectories: int = 10,
    seed: int = 0,
    params: StateSpaceParams = PAPER_THETA,
    filtered: SmootherOutput | None = None,
) -> SmootherOutput:
    """Backward-simulation particle smoother.

    Each trajectory is drawn from the last filter cloud and then
    backward through time with weights proportional to the filter weight
    times the transition density to the already drawn future state. The
    phase estimate is the circular mean over trajectories.

    ``filtered`` (optional) carries the filter's ``N_eff`` and likelihood
    into the returned output.
    """
    if len(clouds) == 0:
        raise ValueError("no filter clouds to smooth")
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    K = len(clouds)
    rng = rng_stream(seed, "backward-simulation")
    u = rng.random((K, n_trajectories))
    traj_ph = np.empty((K, n_trajectories))
    traj_fr = np.empty((K, n_trajectories))
    fallbacks = _kernels.backward_simulation_kernel(
        clouds.phases, clouds.frequencies, clouds.log_weights,
        float(params.sigma2_phi), float(params.sigma2_omega), u, traj_ph, traj_fr,
    )
    if fallbacks:
        logger.warning("backward simulation fell back to filter weights at %d steps", fallbacks)
    est = np.angle(np.mean(np.exp(1j * traj_ph), axis=1))
    if filtered is not None:
        return SmootherOutput(est, filtered.effective_count, filtered.log_likelihood,
                              list(filtered.degenerate_steps))
    neff = np.array([effective_count(lw) for lw in clouds.log_weights])
    return SmootherOutput(est, neff, float("nan"))


def particle_smoother(
    b: ReceivedSequence,
    mask: RevelationMask,
    known: SymbolSequence,
    cfg: SmootherConfig = SmootherConfig(),
    seed: int = 0,
    initial_cloud: ParticleCloud | None = None,
    on_degeneracy: str = "raise",
) -> tuple[SmootherOutput, FilterResult]:
    """Filter forward, then smooth by backward simulation."""
    filt = bootstrap_filter(b, mask, known, cfg, seed, initial_cloud, on_degeneracy)
    smooth = backward_simulation_smoother(
        filt.clouds, cfg.n_trajectories, seed, cfg.params, filt.output
    )
    return smooth, filt


def ekf_run(
    b: ReceivedSequence,
    mask: RevelationMask,
    known: SymbolSequence,
    params: StateSpaceParams,
    init: tuple | None = None,
) -> EKFResult:
    """Extended Kalman filter on (phase, frequency).

    The measurement ``b = a * exp(j*phase) + n`` is linearized in phase at
    the predicted state, with noise ``P_TN/2`` per quadrature. Unrevealed
    symbols are replaced by a hard decision on the de-rotated sample, which
    is only an approximation; the intended use is fully revealed data.

    ``init`` is ``(mean, covariance)`` of the state at the first sample;
    by default it is taken from :func:`pilot_initial_state`.
    """
    _check_lengths(b, mask, known)
    if not b.total_noise_power > 0:
        raise ValueError("the EKF needs a positive total noise power")
    if init is None:
        init = pilot_initial_state(b, mask, known)
    x0 = np.asarray(init[0], dtype=float).reshape(2)
    P0 = np.asarray(init[1], dtype=float).reshape(2, 2)
    K = len(b)
    phase = np.empty(K)
    freq = np.empty(K)
    logd = np.empty(K)
    bad = _kernels.ekf_kernel(
        np.ascontiguousarray(b.samples), np.ascontiguousarray(mask.revealed),
        np.ascontiguousarray(known.symbols), psk_alphabet(known.modulation_order),
        float(b.total_noise_power), float(params.sigma2_phi), float(params.sigma2_omega),
        x0, P0, phase, freq, logd,
    )
    if bad >= 0:
        raise NumericalFailure(f"EKF covariance not positive definite at step {bad}")
    return EKFResult(phase, freq, logd)


def pilot_initial_state(
    b: ReceivedSequence,
    mask: RevelationMask,
    known: SymbolSequence,
    n: int = 100,
    frequency_stddev: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Initial EKF state from the first ``n`` revealed samples.

    Phase: argument of the summed de-modulated pilots, with variance
    ``P_TN / (2 n)`` plus a small floor. Frequency: zero mean with the
    given standard deviation.
    """
    idx = np.flatnonzero(mask.revealed)[:n]
    if idx.size == 0:
        return np.zeros(2), np.diag([np.pi**2, frequency_stddev**2])
    corr = np.sum(b.samples[idx] * np.conj(known.symbols[idx]))
    var_ph = b.total_noise_power / (2 * idx.size) + 1e-4
    return np.array([np.angle(corr), 0.0]), np.diag([var_ph, frequency_stddev**2])


def resolve_phase_ambiguity(
    phase_estimate, b: ReceivedSequence, a: SymbolSequence
) -> int:
    """M-fold rotation ``m`` in ``0..M-1`` carried by ``phase_estimate``.

    Returns the ``m`` maximizing
    ``Re sum(conj(a) * b * exp(-j*(phase - 2*pi*m/M)))``, i.e. the estimate
    is ``2*pi*m/M`` ahead of the truth and ``phase - 2*pi*m/M`` is the
    aligned estimate. An evaluation convention for unrevealed runs only;
    never used inside estimation.
    """
    M = a.modulation_order
    corrected = np.asarray(b.samples) * np.exp(-1j * np.asarray(phase_estimate))
    corr = np.sum(np.conj(a.symbols) * corrected)
    scores = [np.real(corr * np.exp(2j * np.pi * m / M)) for m in range(M)]
    return int(np.argmax(scores))
