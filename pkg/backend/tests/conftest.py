import json
from pathlib import Path
import sys

import numpy as np
import pytest

# Add backend to Python path
backend_dir = Path(__file__).parent.parent
sys.path.insert(0, str(backend_dir))

from fastapi.testclient import TestClient

from afdm.core import AfdmConfig
from channel.doubly_selective import ChannelRealization, PathTap
from estimation.dictionary import build_dictionary
from main import app
from simulation.config import ExperimentConfig
from simulation.pilots import zc_pilot


@pytest.fixture
def rng():
    """Fixed-seed generator so every test sees the same draws."""
    return np.random.default_rng(1234)


@pytest.fixture
def table1_cfg():
    """N = 64 geometry derived from the 625 km/h, 4 GHz, 15 kHz channel limits."""
    return AfdmConfig.from_channel_limits(64, max_delay=2, max_doppler=0.1543)


@pytest.fixture
def integer_cfg():
    """N = 64 geometry admitting integer Dopplers in [-1, 1]."""
    return AfdmConfig.from_channel_limits(64, max_delay=2, max_doppler=1.0)


@pytest.fixture
def integer_dictionary(integer_cfg):
    """Integer-grid dictionary; its columns are mutually orthogonal for the ZC pilot."""
    return build_dictionary(zc_pilot(64), integer_cfg, max_delay=2, max_doppler=1.0, oversampling=1)


@pytest.fixture
def on_grid_channel(integer_cfg):
    taps = [
        PathTap(gain=0.6 + 0.2j, delay=0, doppler=0.0),
        PathTap(gain=-0.3 + 0.5j, delay=1, doppler=1.0),
        PathTap(gain=0.4 - 0.1j, delay=2, doppler=-1.0),
    ]
    return ChannelRealization(taps=taps, cfg=integer_cfg)


@pytest.fixture
def small_config():
    """N = 16 experiment small enough for end-to-end workflow runs."""
    return ExperimentConfig.model_validate({
        "afdm": {"n_subcarriers": 16, "psk_order": 4},
        "channel": {"n_paths": 2, "max_delay": 1, "max_speed_kmh": 300.0},
        "estimator": {
            "doppler_oversampling": 2,
            "estimators": ["sbl", "sbl-partial", "omp", "mmse", "perfect"],
            "sbl": {"n_max": 60},
        },
        "precoder": {"schemes": ["slp-qp", "slp-socp", "mmse"]},
        "snr_db": [10.0, 30.0],
        "trials": 3,
        "seed": 5,
        "parallelism": 1,
        "frame_length": 3,
        "constellation_snr_db": [30.0],
    })


@pytest.fixture
def small_config_file(tmp_path, small_config):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_config.model_dump(), indent=2), encoding="utf-8")
    return path


@pytest.fixture
def client(small_config):
    """Create a test client for the FastAPI app, serving the small experiment."""
    with TestClient(app) as test_client:
        app.state.config = small_config
        yield test_client
