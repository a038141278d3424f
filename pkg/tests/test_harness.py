import json
import math

import numpy as np
import pytest
import yaml

from pilotless_cvqkd import cli
from pilotless_cvqkd.harness import (
    CSV_COLUMNS,
    ScenarioConfig,
    TimingConfig,
    TrialRecord,
    default_keyrate_series,
    emit_results,
    evaluate_trial,
    fit_excess_noise,
    keyrate_to_csv,
    records_from_json,
    records_to_csv,
    records_to_json,
    run_keyrate_sweep,
    run_sweep,
    run_trial,
    synthesize_trial,
    trial_seed,
)
from pilotless_cvqkd.metrics import MetricsReport
from pilotless_cvqkd.signal_model import StateSpaceParams

SMALL = dict(block_length=1000, blocks=2, seeds=2, snr_db=(0.0,), p_r=(1.0,))


@pytest.fixture(scope="module")
def small_records():
    return run_sweep(ScenarioConfig(**SMALL, M=(2, 4)))


class TestConfig:
    def test_round_trip(self):
        cfg = ScenarioConfig(M=[2, 4], snr_db=[-5, 0], timing=TimingConfig(True, 0.1))
        again = ScenarioConfig.from_dict(cfg.as_dict())
        assert again == cfg

    def test_scalars_become_grids(self):
        assert ScenarioConfig(M=2, snr_db=-3.0, p_r=0.0).points() == [(2, -3.0, 0.0)]

    def test_points_sorted(self):
        pts = ScenarioConfig(M=(4, 2), snr_db=(0, -10), p_r=(1, 0)).points()
        assert pts == sorted(pts) and len(pts) == 8

    @pytest.mark.parametrize("kw", [{"M": ()}, {"M": (1,)}, {"p_r": (1.5,)}, {"seeds": 0}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            ScenarioConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ScenarioConfig.from_dict({"bogus": 1})

    def test_theta_from_mapping(self):
        cfg = ScenarioConfig.from_dict({"theta": {"sigma2_omega": 1e-15, "sigma2_phi": 1e-8}})
        assert cfg.theta == StateSpaceParams(1e-15, 1e-8)


class TestTrial:
    def test_seeds_distinct_and_stable(self):
        seeds = [trial_seed(0, i) for i in range(50)]
        assert len(set(seeds)) == 50
        assert trial_seed(0, 3) == trial_seed(0, 3) != trial_seed(1, 3)

    def test_first_block_revealed(self):
        data = synthesize_trial(ScenarioConfig(block_length=500, blocks=3), 4, 0.0, 0.0, 5)
        assert len(data.received) == 2000
        assert np.all(data.mask.revealed[:500]) and not np.any(data.mask.revealed[500:])

    def test_common_random_numbers(self):
        # the same seed index sees the same symbols and phase at every grid point
        cfg = ScenarioConfig(block_length=500, blocks=1)
        d1 = synthesize_trial(cfg, 4, 0.0, 0.05, 9)
        d2 = synthesize_trial(cfg, 4, -10.0, 1.0, 9)
        np.testing.assert_array_equal(d1.symbols.symbols, d2.symbols.symbols)
        np.testing.assert_array_equal(d1.phase, d2.phase)

    def test_perfect_estimate(self):
        cfg = ScenarioConfig(block_length=2000, blocks=1)
        data = synthesize_trial(cfg, 4, 0.0, 1.0, 1)
        out = evaluate_trial(data, data.phase, cfg, 2000)
        m = out["metrics"]
        assert m.excess_noise_snu == 0.0
        assert not out["failed"]
        assert m.mi_bits == pytest.approx(m.mi_theory_bits, abs=0.05)
        # calibrated route on a perfect estimate scatters around zero
        assert abs(out["excess_noise_calibrated"]) < 0.2

    def test_rotation_is_removed(self):
        cfg = ScenarioConfig(block_length=2000, blocks=1)
        data = synthesize_trial(cfg, 4, 10.0, 0.0, 1)
        out = evaluate_trial(data, data.phase + np.pi / 2, cfg, 2000)
        assert out["ambiguity_rotation"] == 1
        assert out["metrics"].excess_noise_snu == pytest.approx(0.0, abs=1e-9)

    def test_tiny_blocks_do_not_raise(self):
        cfg = ScenarioConfig(block_length=10, blocks=1, theta=StateSpaceParams(1e-16, 1e-8))
        rec = run_trial(cfg, 4, 0.0, 1.0, 0)
        assert rec.metrics is not None or rec.error

    def test_error_record_on_bad_input(self):
        cfg = ScenarioConfig(block_length=100, blocks=1, n_particles=2, sps=4)
        object.__setattr__(cfg, "n_particles", 1)  # bypass validation to force a failure
        rec = run_trial(cfg, 4, 0.0, 1.0, 0)
        assert rec.metrics is None and "ValueError" in rec.error

    def test_timing_path_runs(self):
        cfg = ScenarioConfig(block_length=2000, blocks=2, seeds=1, snr_db=(10.0,), p_r=(1.0,),
                             timing=TimingConfig(True, 0.2, 0.01))
        rec = run_sweep(cfg)[0]
        assert not rec.error and not rec.failed


class TestSweep:
    def test_canonical_order(self, small_records):
        keys = [r.key for r in small_records]
        assert keys == sorted(keys) and len(keys) == 4

    def test_small_run_is_sane(self, small_records):
        for r in small_records:
            assert not r.error and not r.failed
            assert r.metrics.excess_noise_snu < 0.05

    def test_deterministic(self, small_records):
        again = run_sweep(ScenarioConfig(**SMALL, M=(2, 4)))
        assert records_to_csv(again, False) == records_to_csv(small_records, False)

    def test_parallel_matches_serial(self, small_records):
        par = run_sweep(ScenarioConfig(**SMALL, M=(2, 4)), jobs=2)
        assert records_to_csv(par, False) == records_to_csv(small_records, False)


class TestOutput:
    def test_csv_header(self, small_records):
        lines = records_to_csv(small_records).splitlines()
        assert lines[0].startswith("# pilotless_cvqkd trial records, schema v1")
        assert lines[1].split(",") == CSV_COLUMNS
        assert len(lines) == 2 + len(small_records)

    def test_csv_without_wall_time(self, small_records):
        assert "wall_time" not in records_to_csv(small_records, False).splitlines()[1]

    def test_json_round_trip(self, small_records):
        text = records_to_json(small_records)
        data = json.loads(text)
        assert data["schema"] == 1 and len(data["scenarios"]) == 2
        assert records_from_json(text) == small_records

    def test_json_error_record_round_trip(self):
        rec = TrialRecord(4, 0.0, 1.0, 0, None, error="boom")
        back = records_from_json(records_to_json([rec]))[0]
        assert back.metrics is None and back.error == "boom" and math.isnan(back.excess_noise_calibrated)

    def test_json_schema_check(self):
        with pytest.raises(ValueError):
            records_from_json('{"schema": 99, "scenarios": []}')

    def test_emit(self, small_records, tmp_path):
        paths = emit_results(small_records, tmp_path / "sub" / "run")
        assert sorted(p.suffix for p in paths) == [".csv", ".json"]
        assert all(p.exists() for p in paths)


class TestKeyRateSweep:
    def _records(self):
        recs = []
        for i, s in enumerate([-30.0, -25.0, -20.0, -15.0, -10.0]):
            xi = 10 ** ((0.3 * s - 25) / 10)
            m = MetricsReport(1.0, 1.0, xi, 1.0, 1.0, 1.0)
            recs.append(TrialRecord(4, s, 0.05, 0, m))
        return recs

    def test_fit(self):
        model, floor = fit_excess_noise(self._records(), 4, 0.05, degree=1)
        assert model.coeffs[0] == pytest.approx(0.3)
        assert floor == pytest.approx(1e-3)

    def test_fit_needs_records(self):
        with pytest.raises(ValueError):
            fit_excess_noise(self._records(), 2, 0.05)

    def test_sweep_and_csv(self):
        fits = {4: fit_excess_noise(self._records(), 4, 0.05, degree=1)}
        series = default_keyrate_series(fits)
        assert [s.name for s in series] == ["xi0", "fit-M4"]
        rows = run_keyrate_sweep(series, [0.0, 30.0])
        text = keyrate_to_csv(rows).splitlines()
        assert text[1].startswith("series,M,distance_km")
        assert len(text) == 2 + 4
        xi0 = [r for r in rows if r.series == "xi0"]
        assert xi0[0].result.rate_bits_per_symbol > xi0[1].result.rate_bits_per_symbol > 0


class TestCli:
    def test_selftest(self, capsys):
        assert cli.main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 4

    def test_simulate(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(yaml.safe_dump({"scenario": {"M": [4], "snr_db": [0.0], "p_r": [1.0],
                                                    "block_length": 500, "blocks": 1, "seeds": 1}}))
        assert cli.main(["simulate", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "r")]) == 0
        assert (tmp_path / "r.csv").exists() and (tmp_path / "r.json").exists()

    def test_simulate_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "r")]) != 0
        assert "unknown" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["simulate", "--config", str(tmp_path / "nope.yaml")])
        assert exc.value.code != 0

    def test_keyrate(self, tmp_path):
        cfg = tmp_path / "k.yaml"
        cfg.write_text(yaml.safe_dump({"distances_km": [0, 20], "link": {"snr_floor_db": -30}}))
        out = tmp_path / "k.csv"
        assert cli.main(["keyrate", "--config", str(cfg), "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 4

    def test_keyrate_with_fit(self, tmp_path):
        src = tmp_path / "sweep.json"
        src.write_text(records_to_json(TestKeyRateSweep()._records()))
        cfg = tmp_path / "k.yaml"
        cfg.write_text(yaml.safe_dump({"distances_km": {"start": 0, "stop": 10, "step": 10},
                                       "fit_M": [4], "fit_degree": 1}))
        out = tmp_path / "k.csv"
        assert cli.main(["keyrate", "--config", str(cfg), "--fit-records", str(src), "--out", str(out)]) == 0
        assert "fit-M4" in out.read_text()

    def test_optimize_theta(self, tmp_path, capsys):
        cfg = tmp_path / "o.yaml"
        cfg.write_text(yaml.safe_dump({"K": 5000, "max_iter": 10,
                                       "theta_true": {"sigma2_omega": 1e-12, "sigma2_phi": 1e-5}}))
        out = tmp_path / "trace"
        assert cli.main(["optimize-theta", "--config", str(cfg), "--out", str(out)]) == 0
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0] == "iteration,sigma2_omega,sigma2_phi,energy"
        assert "sigma2_phi" in capsys.readouterr().out

    def test_requires_command(self):
        with pytest.raises(SystemExit):
            cli.main([])
