"""Command-line entry point: ``pilotless-cvqkd {simulate,keyrate,optimize-theta,selftest}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .harness import (
    ScenarioConfig,
    default_keyrate_series,
    emit_results,
    fit_excess_noise,
    keyrate_to_csv,
    records_from_json,
    run_keyrate_sweep,
    run_sweep,
)
from .keyrate import LinkParams, holevo_bound
from .metrics import photons_per_symbol, theoretical_mi
from .param_optimization import fit_state_space_params
from .signal_model import (
    PAPER_THETA,
    StateSpaceParams,
    apply_awgn_channel,
    gen_phase_trajectory,
    gen_revelation_mask,
    gen_symbols,
)

log = logging.getLogger("pilotless_cvqkd")


def load_config(path: str | None) -> dict:
    """YAML or JSON mapping (JSON is valid YAML); empty when no path is given."""
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise SystemExit(f"cannot read config {path}: {exc}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise SystemExit(f"config {path} must be a mapping")
    return data


def _distances(spec) -> list[float]:
    if spec is None:
        return list(np.arange(0.0, 101.0, 2.0))
    if isinstance(spec, dict):
        return list(np.arange(spec["start"], spec["stop"] + 1e-9, spec["step"]))
    return [float(d) for d in spec]


def cmd_simulate(args) -> int:
    raw = load_config(args.config)
    raw = raw.get("scenario", raw)
    if args.seed is not None:
        raw["master_seed"] = args.seed
    cfg = ScenarioConfig.from_dict(raw)
    out = args.out or cfg.output or "results/sweep"
    records = run_sweep(cfg, jobs=args.jobs)
    paths = emit_results(records, out)
    n_err = sum(1 for r in records if r.error)
    n_fail = sum(1 for r in records if r.failed)
    print(f"{len(records)} trials, {n_fail} demodulation failures, {n_err} errors")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_keyrate(args) -> int:
    raw = load_config(args.config)
    link_kw = dict(raw.get("link", {}))
    if "snr_floor_db" in link_kw:
        link_kw["snr_floor"] = 10 ** (link_kw.pop("snr_floor_db") / 10)
    base = LinkParams(**link_kw)
    fits = {}
    source = args.fit_records or raw.get("fit_records")
    if source:
        records = records_from_json(Path(source).read_text())
        p_r = float(raw.get("fit_p_r", 0.05))
        for M in raw.get("fit_M", [4, 2]):
            try:
                fits[int(M)] = fit_excess_noise(records, int(M), p_r, int(raw.get("fit_degree", 2)))
            except ValueError as exc:
                log.warning("no fit for M=%s: %s", M, exc)
    rows = run_keyrate_sweep(default_keyrate_series(fits, base), _distances(raw.get("distances_km")),
                             float(raw.get("symbol_rate", 17e9)))
    text = keyrate_to_csv(rows)
    out = Path(args.out or "results/keyrate.csv").with_suffix(".csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(f"wrote {out} ({len(rows)} rows)")
    return 0


def cmd_optimize_theta(args) -> int:
    raw = load_config(args.config)
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    K = int(raw.get("K", 200_000))
    M = int(raw.get("M", 4))
    snr = 10 ** (float(raw.get("snr_db", 11.5)) / 10)
    th = raw.get("theta_true", {})
    truth = StateSpaceParams(float(th.get("sigma2_omega", PAPER_THETA.sigma2_omega)),
                             float(th.get("sigma2_phi", PAPER_THETA.sigma2_phi)))
    th0 = raw.get("theta0", {})
    theta0 = StateSpaceParams(float(th0.get("sigma2_omega", truth.sigma2_omega * 10)),
                              float(th0.get("sigma2_phi", truth.sigma2_phi / 10)))
    a = gen_symbols(M, K, seed)
    traj = gen_phase_trajectory(K, truth, 0.0, 0.0, seed)
    b = apply_awgn_channel(a, traj, snr, seed)
    mask = gen_revelation_mask(K, 1.0, seed)
    res = fit_state_space_params(b, mask, a, theta0, tolerance=float(raw.get("tolerance", 1e-3)),
                                 max_iter=int(raw.get("max_iter", 200)))
    print(f"sigma2_omega = {res.theta_hat.sigma2_omega:.6g}  (generator {truth.sigma2_omega:.6g})")
    print(f"sigma2_phi   = {res.theta_hat.sigma2_phi:.6g}  (generator {truth.sigma2_phi:.6g})")
    print(f"energy {res.energy:.6f}, {res.iterations} iterations, converged={res.converged}")
    if args.out:
        out = Path(args.out).with_suffix(".csv")
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, ["iteration", "sigma2_omega", "sigma2_phi", "energy"], lineterminator="\n")
            writer.writeheader()
            for row in res.trace_rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        print(f"wrote {out}")
    return 0


def cmd_selftest(args) -> int:
    checks = []
    checks.append(("photon budget N_B/SNR_b = 7.33", abs(photons_per_symbol(1.0) - 7.33) < 0.01))
    checks.append(("MI at 40 dB equals log2 M", abs(theoretical_mi(1e4, 4) - 2.0) < 1e-6))
    checks.append(("identity channel leaks nothing", holevo_bound(1.0, 0.0, 2.0, 1.0, 0.0) < 1e-9))
    cfg = ScenarioConfig(snr_db=(0.0,), p_r=(1.0,), block_length=2000, blocks=2, seeds=1,
                         master_seed=args.seed or 0)
    rec = run_sweep(cfg)[0]
    ok = rec.metrics is not None and not rec.failed and rec.metrics.excess_noise_snu < 0.05
    checks.append(("short pipeline run at 0 dB", ok))
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return 0 if all(p for _, p in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pilotless-cvqkd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="YAML or JSON configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--out", help=out_help)
        return p

    common(sub.add_parser("simulate", help="run a Monte Carlo sweep"), "output path stem (.csv and .json)") \
        .set_defaults(func=cmd_simulate)
    kr = common(sub.add_parser("keyrate", help="key rate versus distance"), "output CSV path")
    kr.add_argument("--fit-records", help="sweep JSON whose excess noise is fitted")
    kr.set_defaults(func=cmd_keyrate)
    common(sub.add_parser("optimize-theta", help="fit the phase-noise parameters on synthetic data"),
           "optimizer trace CSV").set_defaults(func=cmd_optimize_theta)
    common(sub.add_parser("selftest", help="quick consistency checks"), "unused").set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
