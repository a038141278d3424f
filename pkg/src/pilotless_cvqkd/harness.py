"""
Sweep orchestration, trial records and result files.

A trial simulates one (M, SNR_b, p_r) point for one seed: a fully revealed
initialization block followed by ``blocks`` blocks of ``block_length``
symbols, blockwise particle filtering (the filter state carries over between
blocks, the smoother runs inside each segment), and the evaluation metrics
on everything after the initialization block.

Trials with the same seed index share their symbols, phase trajectory and
noise realization across grid points (common random numbers), which keeps
sweep curves smooth and comparisons between points paired.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .keyrate import (
    KeyRateResult,
    LinkParams,
    PolynomialExcessNoise,
    constant_excess_noise,
    optimize_launch_power,
)
from .metrics import (
    EPSILON_EL,
    ETA,
    MetricsReport,
    estimate_quantum_power,
    excess_noise_calibrated,
    excess_noise_from_phase,
    hard_decision_mi,
    photons_per_symbol,
    theoretical_mi,
)
from .phase_estimation import (
    SmootherConfig,
    backward_simulation_smoother,
    bootstrap_filter,
    resolve_phase_ambiguity,
    wrap_angle,
)
from .signal_model import (
    PAPER_THETA,
    ReceivedSequence,
    RevelationMask,
    StateSpaceParams,
    SymbolSequence,
    add_waveform_noise,
    apply_awgn_channel,
    apply_timing_offset,
    gen_phase_trajectory,
    gen_revelation_mask,
    gen_symbols,
    matched_filter,
    rng_stream,
    rrc_pulse_shape,
)
from .timing import (
    TimingProcessNoise,
    apply_timing_correction,
    oerder_meyr_block,
    track_timing,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
# longest stretch the smoother stores at once (memory bound)
MAX_SEGMENT = 50_000


@dataclass(frozen=True)
class TimingConfig:
    """Optional timing-error path: static offset plus linear drift."""

    enabled: bool = False
    tau0: float = 0.0
    drift_per_block: float = 0.0
    process_noise_phase: float = 1e-8
    process_noise_drift: float = 1e-10


@dataclass(frozen=True)
class ScenarioConfig:
    """Sweep definition. Defaults follow the reference system at desk scale."""

    M: tuple = (4,)
    snr_db: tuple = (-10.0,)
    p_r: tuple = (0.05,)
    block_length: int = 20_000
    blocks: int = 10
    seeds: int = 10
    master_seed: int = 0
    theta: StateSpaceParams = PAPER_THETA
    n_particles: int = 200
    n_trajectories: int = 10
    resample_fraction: float = 0.2
    init_frequency_stddev: float = 1e-5
    sps: int = 4
    rolloff: float = 0.1
    timing: TimingConfig = TimingConfig()
    epsilon_el: float = EPSILON_EL
    eta: float = ETA
    failure_threshold: float = 0.5
    output: str | None = None

    def __post_init__(self):
        for name in ("M", "snr_db", "p_r"):
            value = getattr(self, name)
            value = tuple(value) if isinstance(value, (list, tuple)) else (value,)
            if not value:
                raise ValueError(f"{name} grid is empty")
            object.__setattr__(self, name, value)
        if any(m < 2 for m in self.M):
            raise ValueError("modulation orders must be >= 2")
        if any(not 0 <= p <= 1 for p in self.p_r):
            raise ValueError("p_r must lie in [0, 1]")
        if self.block_length < 1 or self.blocks < 1 or self.seeds < 1:
            raise ValueError("block_length, blocks and seeds must be positive")

    @property
    def smoother(self) -> SmootherConfig:
        return SmootherConfig(
            n_particles=self.n_particles,
            n_trajectories=self.n_trajectories,
            resample_fraction=self.resample_fraction,
            params=self.theta,
            init_frequency_stddev=self.init_frequency_stddev,
        )

    def points(self) -> list[tuple[int, float, float]]:
        """Grid points in canonical order."""
        return sorted(itertools.product(self.M, self.snr_db, self.p_r))

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        if "theta" in data and not isinstance(data["theta"], StateSpaceParams):
            th = data["theta"]
            data["theta"] = StateSpaceParams(float(th["sigma2_omega"]), float(th["sigma2_phi"]))
        if "timing" in data and not isinstance(data["timing"], TimingConfig):
            data["timing"] = TimingConfig(**data["timing"])
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def as_dict(self) -> dict:
        out = asdict(self)
        out["M"], out["snr_db"], out["p_r"] = list(self.M), list(self.snr_db), list(self.p_r)
        return out


@dataclass
class TrialRecord:
    M: int
    snr_db: float
    p_r: float
    seed_index: int
    metrics: MetricsReport | None
    excess_noise_calibrated: float = math.nan
    failed: bool = False
    degenerate_steps: int = 0
    ambiguity_rotation: int = 0
    error: str = ""
    wall_time: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.M, self.snr_db, self.p_r, self.seed_index)

    def row(self) -> dict:
        m = self.metrics.as_dict() if self.metrics else {k: math.nan for k in _METRIC_FIELDS}
        return {
            "M": self.M,
            "snr_db": self.snr_db,
            "p_r": self.p_r,
            "seed_index": self.seed_index,
            **m,
            "excess_noise_calibrated": self.excess_noise_calibrated,
            "failed": int(self.failed),
            "degenerate_steps": self.degenerate_steps,
            "ambiguity_rotation": self.ambiguity_rotation,
            "error": self.error,
            "wall_time": self.wall_time,
        }


_METRIC_FIELDS = [f.name for f in fields(MetricsReport)]
CSV_COLUMNS = (
    ["M", "snr_db", "p_r", "seed_index"]
    + _METRIC_FIELDS
    + ["excess_noise_calibrated", "failed", "degenerate_steps", "ambiguity_rotation", "error", "wall_time"]
)


def trial_seed(master_seed: int, seed_index: int) -> int:
    """Seed of trial ``seed_index``, shared by all grid points."""
    return int(rng_stream(master_seed, "trial", str(seed_index)).integers(2**62))


# ---------------------------------------------------------------------------
# One trial


@dataclass
class TrialData:
    symbols: SymbolSequence
    phase: np.ndarray
    received: ReceivedSequence
    mask: RevelationMask


def synthesize_trial(cfg: ScenarioConfig, M: int, snr_db: float, p_r: float, seed: int) -> TrialData:
    """Symbols, true phase, received samples and revelation mask of one trial."""
    L = cfg.block_length
    K = L * (cfg.blocks + 1)
    snr = 10 ** (snr_db / 10)
    rng = rng_stream(seed, "initial-state")
    phi0 = rng.uniform(-np.pi, np.pi)
    f0 = rng.normal(0.0, cfg.init_frequency_stddev)
    a = gen_symbols(M, K, seed)
    traj = gen_phase_trajectory(K, cfg.theta, phi0, f0, seed)
    if cfg.timing.enabled:
        b = _timing_path(cfg, a, traj.phase, snr, seed)
    else:
        b = apply_awgn_channel(a, traj, snr, seed)
    revealed = np.array(gen_revelation_mask(K, p_r, seed).revealed)
    revealed[:L] = True
    return TrialData(a, np.asarray(traj.phase), b, RevelationMask(revealed, p_r))


def _timing_path(cfg: ScenarioConfig, a: SymbolSequence, phase, snr: float, seed: int) -> ReceivedSequence:
    """Pulse shaping, timing error, noise, matched filter, blockwise timing recovery."""
    L = cfg.block_length
    t = cfg.timing
    tx = rrc_pulse_shape(np.asarray(a.symbols) * np.exp(1j * np.asarray(phase)), cfg.sps, cfg.rolloff)
    rx = apply_timing_offset(tx, t.tau0, t.drift_per_block / L)
    w = matched_filter(add_waveform_noise(rx, snr, seed))
    n_blocks = w.n_symbols // L
    measurements = [oerder_meyr_block(w, L, n, n * L) for n in range(n_blocks)]
    track = track_timing(measurements, TimingProcessNoise(t.process_noise_phase, t.process_noise_drift), L)
    # tracked offsets refer to block centres; interpolate per symbol
    centres = np.arange(n_blocks) * L + L / 2
    offsets = np.interp(np.arange(w.n_symbols), centres, track.offsets)
    corrected = apply_timing_correction(w, offsets)
    return ReceivedSequence(np.asarray(corrected.samples), 1.0 / snr, snr)


def estimate_phase_blockwise(data: TrialData, cfg: ScenarioConfig, seed: int) -> tuple[np.ndarray, int]:
    """Blockwise filter with carried-over state; smoothing within each segment.

    Returns the smoothed phase estimate and the number of degenerate steps.
    """
    scfg = cfg.smoother
    b, mask, a = data.received, data.mask, data.symbols
    K = len(b)
    seg = min(cfg.block_length, MAX_SEGMENT)
    est = np.empty(K)
    cloud = None
    degenerate = 0
    for n, start in enumerate(range(0, K, seg)):
        sl = slice(start, min(start + seg, K))
        bb = ReceivedSequence(b.samples[sl], b.total_noise_power, b.snr_b)
        mm = RevelationMask(mask.revealed[sl], mask.p_r)
        aa = SymbolSequence(a.symbols[sl], a.modulation_order, a.indices[sl])
        sub_seed = int(rng_stream(seed, "segment", str(n)).integers(2**62))
        filt = bootstrap_filter(bb, mm, aa, scfg, sub_seed, cloud, on_degeneracy="reset")
        cloud = filt.final_cloud
        degenerate += len(filt.output.degenerate_steps)
        est[sl] = backward_simulation_smoother(filt.clouds, scfg.n_trajectories, sub_seed, scfg.params).phase_estimate
    return est, degenerate


def evaluate_trial(data: TrialData, estimate: np.ndarray, cfg: ScenarioConfig, skip: int) -> dict:
    """Metrics on symbols ``skip:`` given a phase estimate."""
    snr = data.received.snr_b
    M = data.symbols.modulation_order
    sl = slice(skip, None)
    a = SymbolSequence(data.symbols.symbols[sl], M, data.symbols.indices[sl])
    b = ReceivedSequence(data.received.samples[sl], data.received.total_noise_power, snr)
    est = np.asarray(estimate[sl])
    rotation = 0
    if data.mask.p_r == 0:
        rotation = resolve_phase_ambiguity(est, b, a)
        est = est - 2 * np.pi * rotation / M
    corrected = np.asarray(b.samples) * np.exp(-1j * est)
    err = wrap_angle(data.phase[sl] - est)
    p_b = float(np.mean(np.abs(corrected) ** 2))
    p_q = estimate_quantum_power(a, corrected)
    # total noise power splits into shot and electrical noise by eps_el
    p_sn = b.total_noise_power / (1 + cfg.epsilon_el)
    xi_cal = excess_noise_calibrated(p_b, p_q, p_sn, cfg.epsilon_el * p_sn)
    mi = hard_decision_mi(a, corrected, M)
    mi_theory = theoretical_mi(snr, M)
    report = MetricsReport(
        p_b=p_b,
        p_q=p_q,
        excess_noise_snu=excess_noise_from_phase(snr, cfg.epsilon_el, err),
        photons_per_symbol=photons_per_symbol(snr, cfg.epsilon_el, cfg.eta),
        mi_bits=mi,
        mi_theory_bits=mi_theory,
    )
    return {
        "metrics": report,
        "excess_noise_calibrated": xi_cal,
        "failed": bool(mi < cfg.failure_threshold * mi_theory),
        "ambiguity_rotation": rotation,
    }


def run_trial(cfg: ScenarioConfig, M: int, snr_db: float, p_r: float, seed_index: int) -> TrialRecord:
    """Simulate and evaluate one trial; exceptions end up in the record's ``error``."""
    t0 = time.perf_counter()
    seed = trial_seed(cfg.master_seed, seed_index)
    try:
        data = synthesize_trial(cfg, M, snr_db, p_r, seed)
        est, degenerate = estimate_phase_blockwise(data, cfg, seed)
        out = evaluate_trial(data, est, cfg, cfg.block_length)
        rec = TrialRecord(M, snr_db, p_r, seed_index, degenerate_steps=degenerate, **out)
    except Exception as exc:  # recorded, the sweep goes on
        logger.exception("trial %s failed", (M, snr_db, p_r, seed_index))
        rec = TrialRecord(M, snr_db, p_r, seed_index, None, error=f"{type(exc).__name__}: {exc}")
    rec.wall_time = time.perf_counter() - t0
    return rec


def _run_task(args):
    return run_trial(*args)


def run_sweep(cfg: ScenarioConfig, jobs: int = 1) -> list[TrialRecord]:
    """All grid points times all seeds, in canonical order regardless of ``jobs``."""
    tasks = [(cfg, M, s, p, i) for (M, s, p) in cfg.points() for i in range(cfg.seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_task, tasks))
    else:
        records = [_run_task(t) for t in tasks]
    return sorted(records, key=lambda r: r.key)


# ---------------------------------------------------------------------------
# Output


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_csv(records: Iterable[TrialRecord], include_wall_time: bool = True) -> str:
    cols = CSV_COLUMNS if include_wall_time else [c for c in CSV_COLUMNS if c != "wall_time"]
    buf = io.StringIO()
    buf.write(f"# pilotless_cvqkd trial records, schema v{SCHEMA_VERSION}, package {__version__}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for rec in records:
        row = rec.row()
        writer.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def records_to_json(records: Iterable[TrialRecord]) -> str:
    """Records nested by scenario point."""
    groups: dict[tuple, list] = {}
    for rec in records:
        groups.setdefault((rec.M, rec.snr_db, rec.p_r), []).append(rec)
    scenarios = []
    for (M, s, p), recs in groups.items():
        trials = []
        for r in recs:
            d = r.row()
            for k in ("M", "snr_db", "p_r"):
                d.pop(k)
            d["failed"] = bool(r.failed)
            trials.append(d)
        scenarios.append({"M": M, "snr_db": s, "p_r": p, "trials": trials})
    return json.dumps({"schema": SCHEMA_VERSION, "scenarios": scenarios}, indent=1)


def records_from_json(text: str) -> list[TrialRecord]:
    data = json.loads(text)
    if data.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema {data.get('schema')!r}")
    out = []
    for sc in data["scenarios"]:
        for t in sc["trials"]:
            t = dict(t)
            metrics = {k: t.pop(k) for k in _METRIC_FIELDS}
            has_metrics = not all(isinstance(v, float) and math.isnan(v) for v in metrics.values())
            out.append(
                TrialRecord(
                    sc["M"], sc["snr_db"], sc["p_r"], t.pop("seed_index"),
                    MetricsReport(**metrics) if has_metrics else None,
                    failed=bool(t.pop("failed")), **t,
                )
            )
    return out


def emit_results(records: Sequence[TrialRecord], out: str | Path, formats: Sequence[str] = ("csv", "json")) -> list[Path]:
    """Write ``<out>.csv`` and/or ``<out>.json``; returns the written paths."""
    base = Path(out)
    written = []
    for fmt in formats:
        path = base.with_suffix("." + fmt)
        text = {"csv": records_to_csv, "json": records_to_json}[fmt](records)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Key-rate sweeps

KEYRATE_COLUMNS = [
    "series", "M", "distance_km", "optimal_launch_photons", "snr_b", "xi_used",
    "rate_bits_per_symbol", "rate_bits_per_second",
]


@dataclass
class KeyRateSeries:
    name: str
    M: int
    link: LinkParams


@dataclass
class KeyRateRow:
    series: str
    M: int
    distance_km: float
    result: KeyRateResult
    symbol_rate: float = 17e9

    def row(self) -> dict:
        return {
            "series": self.series,
            "M": self.M,
            "distance_km": self.distance_km,
            "optimal_launch_photons": self.result.optimal_launch_photons,
            "snr_b": self.result.snr_b_at_optimum,
            "xi_used": self.result.xi_used,
            "rate_bits_per_symbol": self.result.rate_bits_per_symbol,
            "rate_bits_per_second": self.result.rate_bits_per_second(self.symbol_rate),
        }


def fit_excess_noise(records: Iterable[TrialRecord], M: int, p_r: float, degree: int = 2) -> tuple[PolynomialExcessNoise, float]:
    """Polynomial fit (dB vs dB) of the median excess noise per SNR point.

    Returns the fit and the lowest simulated SNR (linear), below which the
    fit is not used.
    """
    per_snr: dict[float, list] = {}
    for r in records:
        if r.M == M and r.p_r == p_r and r.metrics is not None and not r.failed:
            per_snr.setdefault(r.snr_db, []).append(r.metrics.excess_noise_snu)
    if not per_snr:
        raise ValueError(f"no usable records for M={M}, p_r={p_r}")
    snr = sorted(per_snr)
    xi = [float(np.median(per_snr[s])) for s in snr]
    return PolynomialExcessNoise.fit(snr, xi, degree), 10 ** (min(snr) / 10)


def default_keyrate_series(
    fits: dict[int, tuple[PolynomialExcessNoise, float]] | None = None,
    base: LinkParams | None = None,
) -> list[KeyRateSeries]:
    """Zero-excess-noise reference for M = 4 plus one series per fitted M."""
    base = base or LinkParams()
    series = [KeyRateSeries("xi0", 4, replace(base, excess_noise_model=constant_excess_noise(0.0)))]
    for M, (model, snr_min) in sorted((fits or {}).items()):
        floor = max(base.snr_floor, snr_min)
        series.append(KeyRateSeries(f"fit-M{M}", M, replace(base, excess_noise_model=model, snr_floor=floor)))
    return series


def run_keyrate_sweep(series: Sequence[KeyRateSeries], distances_km: Sequence[float], symbol_rate: float = 17e9) -> list[KeyRateRow]:
    rows = []
    for s in series:
        for d in distances_km:
            link = replace(s.link, distance_km=float(d))
            rows.append(KeyRateRow(s.name, s.M, float(d), optimize_launch_power(link, s.M), symbol_rate))
    return rows


def keyrate_to_csv(rows: Iterable[KeyRateRow]) -> str:
    buf = io.StringIO()
    buf.write(f"# pilotless_cvqkd key-rate sweep, schema v{SCHEMA_VERSION}, package {__version__}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(KEYRATE_COLUMNS)
    for r in rows:
        d = r.row()
        writer.writerow([_fmt(d[c]) for c in KEYRATE_COLUMNS])
    return buf.getvalue()
