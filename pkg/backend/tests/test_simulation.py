import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from simulation.config import ExperimentConfig, load_config, parse_config
from simulation.metrics import NMSE_FLOOR_DB, ResultTable, ber, bit_errors, nmse, nmse_ratio, sample_rows
from simulation.pilots import zc_pilot
from utils.errors import ConfigError, DomainError, InputShapeError, ParameterError
from utils.result_writer import SNR_DEFINITION, read_csv, write_csv, write_json, write_sweep_svg

CONFIG_DIR = Path(__file__).parent.parent / "configs"


class TestZadoffChuPilot:
    @pytest.mark.parametrize("n,root", [(64, 1), (64, 3), (63, 1), (16, 5)])
    def test_unit_modulus_and_ideal_autocorrelation(self, n, root):
        pilot = zc_pilot(n, root)
        np.testing.assert_allclose(np.abs(pilot), 1.0)
        for lag in range(1, n):
            assert abs(np.vdot(pilot, np.roll(pilot, lag))) < 1e-9

    @pytest.mark.parametrize("n,root", [(64, 0), (64, 64), (64, 2), (63, 21)])
    def test_bad_roots_rejected(self, n, root):
        with pytest.raises(ParameterError):
            zc_pilot(n, root)


class TestExperimentConfig:
    def test_shipped_table1_config(self):
        cfg = load_config(CONFIG_DIR / "table1.json")
        afdm = cfg.afdm_config()
        assert afdm.n_subcarriers == 64
        assert afdm.c1 == pytest.approx(3 / 128)
        assert afdm.cpp_len == 2
        assert cfg.channel.max_doppler == pytest.approx(0.1543, rel=1e-3)
        assert cfg.estimator.doppler_oversampling == 4
        assert cfg.power_budget == 64.0
        assert cfg.omp_sparsity == 3

    def test_quick_config_loads(self):
        assert load_config(CONFIG_DIR / "quick.json").afdm_config().n_subcarriers == 32

    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.snr_db == [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]
        assert cfg.frame_length == 8
        assert cfg.estimator.sbl.n_max == 200

    def test_parallelism_from_environment(self, monkeypatch):
        monkeypatch.setenv("AFDM_PARALLELISM", "3")
        assert ExperimentConfig().parallelism == 3

    def test_malformed_json_reports_location(self):
        with pytest.raises(ConfigError) as excinfo:
            parse_config('{\n  "trials": 5,\n}', path="bad.json")
        assert excinfo.value.line == 3
        assert str(excinfo.value).startswith("bad.json:3:")

    def test_schema_error_reports_location(self):
        with pytest.raises(ConfigError) as excinfo:
            parse_config('{\n  "seed": 1,\n  "trials": 0\n}', path="bad.json")
        assert (excinfo.value.line, excinfo.value.column) == (3, 3)
        assert "trials" in excinfo.value.message

    def test_nested_schema_error(self):
        with pytest.raises(ConfigError) as excinfo:
            parse_config('{"estimator": {"sbl": {"eta": 0.5}}}')
        assert "estimator.sbl" in excinfo.value.message

    def test_empty_sweep_rejected(self):
        with pytest.raises(ConfigError):
            parse_config('{"snr_db": []}')

    def test_invalid_geometry_rejected(self):
        with pytest.raises(ConfigError):
            parse_config('{"afdm": {"n_subcarriers": 63}}')

    def test_distinct_taps_beyond_grid_rejected(self):
        text = '{"channel": {"n_paths": 4, "max_delay": 2, "fractional": false, "distinct_taps": true}}'
        with pytest.raises(ConfigError) as excinfo:
            parse_config(text)
        assert "distinct" in excinfo.value.message
        parse_config(text.replace('"n_paths": 4', '"n_paths": 3'))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            load_config(tmp_path / "absent.json")
        assert "config file not found" in str(excinfo.value)


class TestMetrics:
    def test_nmse(self, rng):
        h = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        assert nmse(2 * h, h) == pytest.approx(0.0)
        assert nmse(1.1 * h, h) == pytest.approx(-20.0)
        assert nmse(h, h) == NMSE_FLOOR_DB

    def test_nmse_domain(self):
        with pytest.raises(DomainError):
            nmse_ratio(np.ones(3), np.zeros(3))
        with pytest.raises(InputShapeError):
            nmse_ratio(np.ones(3), np.ones(4))

    def test_gray_coded_ber(self):
        assert ber(np.array([0, 1, 2]), np.array([0, 1, 2]), 4) == 0.0
        assert ber(np.array([1]), np.array([0]), 4) == 0.5
        assert ber(np.array([2]), np.array([0]), 4) == 1.0
        assert bit_errors(np.array([3, 3]), np.array([0, 0]), 4) == 2
        with pytest.raises(InputShapeError):
            bit_errors(np.array([0]), np.array([0, 1]), 4)


def _samples(rows):
    return pd.DataFrame(rows, columns=["snr_db", "label", "metric", "value"])


class TestResultTable:
    def test_db_metrics_average_the_ratio(self):
        samples = _samples([*sample_rows(0.0, "sbl", {"nmse_db": 0.1}), *sample_rows(0.0, "sbl", {"nmse_db": 0.3})])
        table = ResultTable.from_samples(samples, trials=2, excluded={})
        assert table.value(0.0, "sbl", "nmse_db") == pytest.approx(10 * np.log10(0.2))
        assert table.value(0.0, "sbl", "nmse_db", "stderr") == pytest.approx(10 / np.log(10) * 0.1 / 0.2)
        assert table.value(0.0, "sbl", "nmse_db", "trials") == 2

    def test_linear_metrics(self):
        samples = _samples([*sample_rows(5.0, "mmse", {"ber": 0.1}), *sample_rows(5.0, "mmse", {"ber": 0.3})])
        table = ResultTable.from_samples(samples, trials=2, excluded={})
        assert table.value(5.0, "mmse", "ber") == pytest.approx(0.2)
        assert table.value(5.0, "mmse", "ber", "stderr") == pytest.approx(0.1)

    def test_missing_result(self):
        table = ResultTable.from_samples(_samples(list(sample_rows(0.0, "sbl", {"ber": 0.0}))), 1, {})
        with pytest.raises(KeyError):
            table.value(10.0, "sbl", "ber")

    def test_excluded_fraction_flags_sweep(self, caplog):
        samples = _samples(list(sample_rows(0.0, "sbl", {"ber": 0.0})))
        with caplog.at_level(logging.WARNING, logger="simulation.metrics"):
            table = ResultTable.from_samples(samples, trials=100, excluded={(0.0, "sbl"): 1})
        assert table.flagged
        assert table.value(0.0, "sbl", "ber", "excluded") == 1
        assert any("Excluded-trial fraction" in record.message for record in caplog.records)
        assert not ResultTable.from_samples(samples, trials=100, excluded={}).flagged

    def test_wide_layout(self):
        rows = [*sample_rows(0.0, "sbl", {"nmse_db": 0.1, "ber": 0.2}),
                *sample_rows(0.0, "omp", {"nmse_db": 0.5, "ber": 0.3}),
                *sample_rows(10.0, "sbl", {"nmse_db": 0.01, "ber": 0.01})]
        wide = ResultTable.from_samples(_samples(rows), 1, {}, label_name="estimator").to_wide("nmse_db")
        assert list(wide.columns) == ["snr_db", "estimator", "nmse_db_mean", "nmse_db_stderr",
                                      "trials", "excluded", "ber_mean", "ber_stderr"]
        assert list(wide["snr_db"]) == [0.0, 0.0, 10.0]
        assert list(wide["estimator"]) == ["sbl", "omp", "sbl"]


class TestResultWriter:
    def test_csv_carries_snr_definition(self, tmp_path):
        frame = pd.DataFrame({"snr_db": [0.0, 10.0], "ber_mean": [0.1, 0.01]})
        path = write_csv(frame, tmp_path / "out" / "sweep.csv")
        assert path.read_text(encoding="utf-8").splitlines()[0] == f"# {SNR_DEFINITION}"
        pd.testing.assert_frame_equal(read_csv(path), frame)

    def test_csv_without_comment(self, tmp_path):
        path = write_csv(pd.DataFrame({"a": [1]}), tmp_path / "plain.csv", comment=None)
        assert path.read_text(encoding="utf-8").splitlines()[0] == "a"

    def test_json(self, tmp_path):
        path = write_json({"b": 1, "a": [1.5]}, tmp_path / "record.json")
        assert path.read_text(encoding="utf-8").startswith('{\n  "a"')

    def test_sweep_svg(self, tmp_path):
        frame = pd.DataFrame({"snr_db": [0.0, 10.0, 0.0, 10.0], "scheme": ["slp-qp", "slp-qp", "mmse", "mmse"],
                              "ber_mean": [0.1, 0.01, 0.2, 0.05]})
        path = write_sweep_svg(frame, tmp_path / "ber.svg", "scheme", "ber_mean", "BER", log_y=True)
        assert "<svg" in path.read_text(encoding="utf-8")
