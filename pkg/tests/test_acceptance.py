"""Acceptance criteria 1-10.

Each test reports one PASS/FAIL line through the ``report`` fixture and
then asserts the verdict. The lines are repeated in the terminal summary.

Set ``PILOTLESS_ACCEPTANCE_SCALE=full`` to run the pilotless failure
thresholds (criterion 4) with 100 blocks of 65 500 symbols per trial
instead of the desk-scale 2e4 evaluated symbols.
"""

import math
import os

import numpy as np
import pytest

from pilotless_cvqkd.harness import (
    ScenarioConfig,
    default_keyrate_series,
    evaluate_trial,
    fit_excess_noise,
    records_to_csv,
    run_keyrate_sweep,
    run_sweep,
    run_trial,
    synthesize_trial,
)
from pilotless_cvqkd.keyrate import (
    InvalidPhysicalState,
    LinkParams,
    channel_covariance,
    gaussian_correlation,
    holevo_bound,
    optimize_launch_power,
    psk_correlation,
    symplectic_eigenvalues,
)
from pilotless_cvqkd.metrics import (
    hard_decision_mi,
    joint_histogram,
    mi_standard_error,
    photons_per_symbol,
    receiver_penalty_db,
    theoretical_mi,
)
from pilotless_cvqkd.param_optimization import fit_state_space_params
from pilotless_cvqkd.signal_model import (
    PAPER_THETA,
    PhaseTrajectory,
    StateSpaceParams,
    apply_awgn_channel,
    apply_timing_offset,
    gen_phase_trajectory,
    gen_revelation_mask,
    gen_symbols,
    matched_filter,
    rng_stream,
    rrc_pulse_shape,
)
from pilotless_cvqkd.timing import (
    PAPER_BLOCK_LENGTH,
    PAPER_DRIFT_PER_BLOCK,
    TimingProcessNoise,
    estimate_snr_x,
    oerder_meyr_block,
    simulate_timing_blocks,
    track_timing,
    tracking_residual,
)

pytestmark = pytest.mark.acceptance

FULL_SCALE = os.environ.get("PILOTLESS_ACCEPTANCE_SCALE", "desk") == "full"
SWEEP_SNR_DB = (-30.0, -25.0, -20.0, -15.0, -10.0, -5.0)
DESK = dict(block_length=20_000, blocks=1, seeds=10)


@pytest.fixture(scope="module")
def sweep():
    """Desk-scale sweep shared by the slope, penalty and key-rate checks."""
    m4 = run_sweep(ScenarioConfig(M=(4,), snr_db=SWEEP_SNR_DB, p_r=(0.05, 1.0), **DESK))
    m2 = run_sweep(ScenarioConfig(M=(2,), snr_db=SWEEP_SNR_DB, p_r=(0.05,), **DESK))
    return m4 + m2


def median_xi(records, M, p_r, snr_db):
    xs = [r.metrics.excess_noise_snu for r in records
          if (r.M, r.p_r, r.snr_db) == (M, p_r, snr_db) and r.metrics is not None]
    return float(np.median(xs))


class TestCriterion1PhotonBudget:
    def test_photon_budget(self, report):
        ratio = photons_per_symbol(1.0, 0.70, 0.232)
        penalty = receiver_penalty_db(0.70, 0.232)
        ok = abs(ratio - 7.33) <= 0.01 and abs(penalty - 8.65) <= 0.01
        report(1, ok, f"N_B/SNR_b = {ratio:.4f} (7.33 +- 0.01), penalty = {penalty:.4f} dB (8.65 +- 0.01)")
        assert ok


class TestCriterion2MutualInformation:
    def test_hard_decision_mi(self, report):
        K = 1_000_000
        worst = 0.0
        parts = []
        for M in (2, 4):
            a = gen_symbols(M, K, 11)
            flat = PhaseTrajectory.from_phase(np.zeros(K))
            for snr_db in (-10.0, 0.0, 10.0):
                b = apply_awgn_channel(a, flat, 10 ** (snr_db / 10), 12)
                mi = hard_decision_mi(a, b, M)
                se = mi_standard_error(joint_histogram(a, b, M), K)
                z = abs(mi - theoretical_mi(10 ** (snr_db / 10), M)) / se
                worst = max(worst, z)
                parts.append(f"M{M}@{snr_db:+.0f}dB {z:.2f}sd")
        ok = worst <= 3.0
        report(2, ok, f"max |MI - theory| = {worst:.2f} standard errors (<= 3); " + ", ".join(parts))
        assert ok


class TestCriterion3SlopeLaw:
    def test_slope(self, sweep, report):
        xi = [median_xi(sweep, 4, 1.0, s) for s in SWEEP_SNR_DB]
        slope = np.polyfit(SWEEP_SNR_DB, 10 * np.log10(xi), 1)[0] * 10
        ok = abs(slope - 3.0) <= 1.0
        report(3, ok, f"xi' slope = {slope:.2f} dB/decade (3 +- 1); median xi' = "
               + ", ".join(f"{x:.2e}" for x in xi))
        assert ok


def majority_fails(cfg, M, snr_db, p_r, seeds=10):
    """Majority vote over seeds, stopping once the outcome is settled."""
    fails = ok = 0
    for i in range(seeds):
        rec = run_trial(cfg, M, snr_db, p_r, i)
        if rec.metrics is None or rec.failed:
            fails += 1
        else:
            ok += 1
        if fails > seeds // 2:
            return True
        if ok >= seeds - seeds // 2:
            return False
    return fails > seeds // 2


def failure_threshold(cfg, M, centre, tol, floor=-34.0):
    """Highest SNR (dB) at which the majority fails, scanning down from above the window.

    1 dB steps inside the window, 2 dB below it. Returns ``None`` when
    nothing fails above ``floor`` and ``+inf`` when the point just above
    the window already fails.
    """
    top = centre + tol + 1
    if majority_fails(cfg, M, top, 0.0):
        return math.inf
    grid = list(np.arange(top - 1, centre - tol - 0.5, -1.0))
    grid += list(np.arange(centre - tol - 2, floor - 0.5, -2.0))
    for snr in grid:
        if majority_fails(cfg, M, float(snr), 0.0):
            return float(snr)
    return None


class TestCriterion4FailureThresholds:
    def test_thresholds(self, report):
        if FULL_SCALE:
            cfg = ScenarioConfig(block_length=65_500, blocks=100, seeds=10)
            scale = "full scale, 100 x 65500 symbols"
        else:
            cfg = ScenarioConfig(**DESK)
            scale = "desk scale, 2e4 symbols"
        results = []
        for M, centre, tol in ((4, -8.0, 2.0), (2, -17.0, 3.0)):
            thr = failure_threshold(cfg, M, centre, tol)
            ok = thr is not None and abs(thr - centre) <= tol
            shown = "none down to -34 dB" if thr is None else f"{thr:+.0f} dB"
            results.append((ok, f"M={M} p_r=0 fails at {shown} ({centre:+.0f} +- {tol:.0f})"))
        pr_ok = not majority_fails(ScenarioConfig(**DESK), 4, -30.0, 0.05)
        results.append((pr_ok, f"M=4 p_r=0.05 {'succeeds' if pr_ok else 'fails'} at -30 dB"))
        ok = all(r[0] for r in results)
        report(4, ok, f"[{scale}] " + "; ".join(r[1] for r in results))
        assert ok


class TestCriterion5RevelationPenalty:
    def test_penalty(self, sweep, report):
        ratios = {s: median_xi(sweep, 4, 0.05, s) / median_xi(sweep, 4, 1.0, s) for s in (-15.0, -20.0, -25.0)}
        ok = all(4 <= r <= 16 for r in ratios.values())
        report(5, ok, "xi'(p_r=0.05)/xi'(p_r=1) = "
               + ", ".join(f"{r:.2f}@{s:+.0f}dB" for s, r in ratios.items()) + " (each in [4, 16])")
        assert ok


class TestCriterion6Timing:
    def static_error(self):
        worst = 0.0
        a = gen_symbols(4, 6000, 21)
        w = rrc_pulse_shape(a, 4, 0.1)
        for tau in np.linspace(-0.45, 0.45, 10):
            res = oerder_meyr_block(matched_filter(apply_timing_offset(w, tau)), 5000, start_symbol=500)
            worst = max(worst, abs(res.timing_offset - tau))
        return worst

    def snr_x_slope(self, L):
        snr_db = np.array([-25.0, -20.0, -15.0, -10.0])
        n = 20
        clean, _ = simulate_timing_blocks(n, L, math.inf, 31, tau0=0.2)
        amp2 = abs(np.mean([r.fourier_coefficient for r in clean])) ** 2
        snr_x = []
        for s in snr_db:
            noisy, _ = simulate_timing_blocks(n, L, 10 ** (s / 10), 31, tau0=0.2)
            X = np.array([r.fourier_coefficient for r in noisy])
            var = np.mean(np.abs(X - X.mean()) ** 2)
            snr_x.append(amp2 / (var / 2))
        return np.polyfit(snr_db, 10 * np.log10(snr_x), 1)[0], snr_x

    def test_timing(self, report):
        L = PAPER_BLOCK_LENGTH
        err = self.static_error()
        slope, snr_x = self.snr_x_slope(L)

        blocks, truth = simulate_timing_blocks(100, L, 0.01, 41, tau0=0.1, drift_per_block=PAPER_DRIFT_PER_BLOCK)
        track = track_timing(blocks, TimingProcessNoise(1e-8, 1e-10), L)
        rms = float(np.sqrt(np.mean(tracking_residual(track, truth)[-20:] ** 2)))
        raw = np.array([b.timing_offset for b in blocks]) - truth
        raw_rms = float(np.sqrt(np.mean(((raw + 0.5) % 1.0 - 0.5) ** 2)))
        drift = track.states[-1].drift_symbols

        ok = {"a": err <= 1e-2, "b": abs(slope - 2.0) <= 0.3, "c": rms <= 0.01}
        detail = (
            f"(a) static error {err:.2e} (<= 1e-2) {'PASS' if ok['a'] else 'FAIL'}; "
            f"(b) SNR_X slope {slope:.2f} (2 +- 0.3), SNR_X(-20 dB) = {10 * np.log10(snr_x[1]):.2f} dB "
            f"{'PASS' if ok['b'] else 'FAIL'}; "
            f"(c) residual RMS {rms:.4f} over last 20 of 100 blocks (<= 0.01), raw per-block RMS {raw_rms:.3f}, "
            f"drift {drift:.4f}/block, blockwise SNR_X {10 * np.log10(estimate_snr_x(blocks)):.2f} dB "
            f"{'PASS' if ok['c'] else 'FAIL'}"
        )
        report(6, all(ok.values()), detail)
        assert all(ok.values())


class TestCriterion7ParameterRecovery:
    def test_recovery(self, report):
        K = 200_000
        snr = 10 ** (11.5 / 10)
        theta0 = StateSpaceParams(10 * PAPER_THETA.sigma2_omega, PAPER_THETA.sigma2_phi / 10)
        hits = 0
        ratios = []
        for seed in range(10):
            a = gen_symbols(4, K, seed)
            f0 = rng_stream(seed, "init-frequency").normal(0.0, 1e-5)
            tr = gen_phase_trajectory(K, PAPER_THETA, 0.3, f0, seed)
            b = apply_awgn_channel(a, tr, snr, seed)
            mask = gen_revelation_mask(K, 1.0, seed)
            th = fit_state_space_params(b, mask, a, theta0).theta_hat
            r = (th.sigma2_omega / PAPER_THETA.sigma2_omega, th.sigma2_phi / PAPER_THETA.sigma2_phi)
            ratios.append(r)
            hits += all(1 / 3 <= x <= 3 for x in r)
        ok = hits >= 6
        report(7, ok, f"{hits}/10 seeds recover both components within x3 (>= 6); ratios "
               + " ".join(f"({x:.2f},{y:.2f})" for x, y in ratios))
        assert ok


class TestCriterion8CrossRoute:
    def test_closure(self, report):
        cfg = ScenarioConfig(block_length=500_000, blocks=1, p_r=(1.0,))
        data = synthesize_trial(cfg, 4, 0.0, 1.0, 5)
        est = data.phase + np.random.default_rng(6).normal(0.0, 0.3, len(data.phase))
        out = evaluate_trial(data, est, cfg, 0)
        phase_route = out["metrics"].excess_noise_snu
        cal = out["excess_noise_calibrated"]
        rel = abs(cal / phase_route - 1)
        ok = rel <= 0.10
        report(8, ok, f"calibrated {cal:.4f} vs phase-error {phase_route:.4f} SNU, differ by {100 * rel:.1f}% (<= 10%)")
        assert ok


class TestCriterion9KeyRate:
    def properties(self):
        problems = []
        dist = np.arange(0.0, 101.0, 5.0)
        res = [optimize_launch_power(LinkParams(distance_km=d), 4) for d in dist]
        rates = np.array([r.rate_bits_per_symbol for r in res])
        if not (np.all(rates > 0) and np.all(np.diff(rates) < 0)):
            problems.append("xi=0 curve not positive and decreasing")
        for r in res:
            if r.rate_bits_per_symbol > 0.95 * r.mi_bits + 1e-12:
                problems.append("rate exceeds beta*I_AB")
                break
        if holevo_bound(1.0, 0.0, 2.0, 1.0, 0.0) > 1e-9:
            problems.append("chi_BE nonzero on the identity channel")

        rng = np.random.default_rng(0)
        n_grid = 10_000
        chi_min = math.inf
        nu_min = math.inf
        for i in range(n_grid):
            T = 10 ** rng.uniform(-4, 0)
            xi = rng.choice([0.0, 10 ** rng.uniform(-5, -0.5)])
            va = 10 ** rng.uniform(-3, 1.3)
            corr = psk_correlation if i % 2 else gaussian_correlation
            M = (2, 4)[i % 3 == 0]
            nu_min = min(nu_min, symplectic_eigenvalues(channel_covariance(T, xi, va, corr(va, M))).min())
            trusted = i % 4 != 0
            eta = (0.232, 0.6, 0.999)[i % 3]
            eps = (0.0, 0.7, 0.05)[i % 3]
            try:
                chi = holevo_bound(T, xi, va, eta, eps, M, corr, trusted)
            except InvalidPhysicalState as exc:
                problems.append(f"InvalidPhysicalState at T={T:.3g}, xi={xi:.3g}, va={va:.3g}: {exc}")
                break
            chi_min = min(chi_min, chi)
        if nu_min < 1 - 1e-9:
            problems.append(f"symplectic eigenvalue {nu_min:.6f} < 1")
        if chi_min < 0:
            problems.append(f"chi_BE {chi_min:.3g} < 0")
        return problems, rates, nu_min

    def stretch(self, sweep):
        fits = {M: fit_excess_noise(sweep, M, 0.05) for M in (2, 4)}
        base = LinkParams(correlation=psk_correlation)
        series = default_keyrate_series(fits, base)[1:]
        dist = np.arange(0.0, 101.0, 1.0)
        rows = run_keyrate_sweep(series, dist)
        parts = []
        for s in series:
            rs = [r for r in rows if r.series == s.name]
            pos = [r.distance_km for r in rs if r.result.rate_bits_per_symbol > 0]
            at26 = next(r.result.rate_bits_per_symbol for r in rs if r.distance_km == 26.0)
            parts.append(f"{s.name}: max distance {max(pos) if pos else 0:.0f} km, rate@26 km {at26:.2e}")
        return "; ".join(parts) + " (reference 72 km / 32 km, 5.7e-4 at 26 km; reported only)"

    def test_keyrate(self, sweep, report):
        problems, rates, nu_min = self.properties()
        ok = not problems
        detail = (f"xi=0 rate {rates[0]:.3f} -> {rates[-1]:.2e} bits/symbol over 0-100 km, "
                  f"min symplectic eigenvalue {nu_min:.6f} on 1e4 points")
        if problems:
            detail += "; problems: " + "; ".join(problems)
        detail += "; stretch " + self.stretch(sweep)
        report(9, ok, detail)
        assert ok


class TestCriterion10Determinism:
    def test_rerun_is_identical(self, report):
        cfg = ScenarioConfig(M=(2, 4), snr_db=(-10.0, 0.0), p_r=(0.05, 1.0), block_length=2000, blocks=1,
                             seeds=2, master_seed=7)
        first = records_to_csv(run_sweep(cfg), include_wall_time=False)
        second = records_to_csv(run_sweep(cfg), include_wall_time=False)
        ok = first == second
        report(10, ok, f"two sweeps of {len(first.splitlines()) - 2} trials byte-identical: {ok}")
        assert ok
