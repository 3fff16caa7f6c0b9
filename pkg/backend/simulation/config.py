import json
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from afdm.core import AfdmConfig
from channel.doubly_selective import distinct_tap_capacity, max_normalized_doppler
from estimation.sbl import SblHyperConfig
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

UPLINK_ESTIMATORS = ("sbl", "sbl-flat", "sbl-partial", "omp", "mmse", "perfect")
PRECODING_SCHEMES = ("slp-qp", "slp-socp", "mmse")

EstimatorName = Literal["sbl", "sbl-flat", "sbl-partial", "omp", "mmse", "perfect"]
SchemeName = Literal["slp-qp", "slp-socp", "mmse"]
CsiSource = Literal["perfect", "estimated", "truncated"]


class AfdmSettings(BaseModel):
    n_subcarriers: int = Field(default=64, gt=0)
    psk_order: int = 4
    c1: Optional[float] = None
    c2: float = 0.0
    cpp_len: Optional[int] = Field(default=None, ge=0)


class ChannelSettings(BaseModel):
    n_paths: int = Field(default=3, ge=1)
    max_delay: int = Field(default=2, ge=0)
    max_speed_kmh: float = Field(default=625.0, gt=0)
    carrier_hz: float = Field(default=4e9, gt=0)
    subcarrier_spacing_hz: float = Field(default=15e3, gt=0)
    fractional: bool = True
    distinct_taps: bool = False
    truncation: Optional[int] = Field(default=None, ge=0)

    @property
    def max_doppler(self) -> float:
        return max_normalized_doppler(self.max_speed_kmh, self.carrier_hz, self.subcarrier_spacing_hz)

    @model_validator(mode="after")
    def _check_distinct_taps(self) -> "ChannelSettings":
        if self.distinct_taps:
            capacity = distinct_tap_capacity(self.max_delay, self.max_doppler)
            if self.n_paths > capacity:
                raise ValueError(
                    f"n_paths={self.n_paths} exceeds the {capacity} distinct (delay, integer Doppler) "
                    f"pairs available to distinct_taps"
                )
        return self


class EstimatorSettings(BaseModel):
    sbl: SblHyperConfig = Field(default_factory=SblHyperConfig)
    doppler_oversampling: int = Field(default=4, ge=1)
    pilot_root: int = Field(default=1, ge=1)
    estimators: List[EstimatorName] = Field(default_factory=lambda: ["sbl", "omp", "mmse"])
    partial_eta: float = Field(default=4.0, gt=1)
    omp_sparsity: Optional[int] = Field(default=None, ge=1)


class PrecoderSettings(BaseModel):
    power_budget: Optional[float] = Field(default=None, gt=0)
    tol: float = Field(default=1e-8, gt=0)
    max_iter: Optional[int] = Field(default=None, ge=1)
    schemes: List[SchemeName] = Field(default_factory=lambda: ["slp-qp", "mmse"])
    csi_source: CsiSource = "perfect"


def _default_parallelism() -> int:
    return int(os.getenv("AFDM_PARALLELISM", "1"))


class ExperimentConfig(BaseModel):
    afdm: AfdmSettings = Field(default_factory=AfdmSettings)
    channel: ChannelSettings = Field(default_factory=ChannelSettings)
    estimator: EstimatorSettings = Field(default_factory=EstimatorSettings)
    precoder: PrecoderSettings = Field(default_factory=PrecoderSettings)
    snr_db: List[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0])
    trials: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)
    parallelism: int = Field(default_factory=_default_parallelism, ge=1)
    frame_length: int = Field(default=8, ge=2)
    constellation_snr_db: List[float] = Field(default_factory=list)

    @field_validator("snr_db")
    @classmethod
    def _non_empty_sweep(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("snr_db must list at least one SNR point")
        return value

    @model_validator(mode="after")
    def _check_geometry(self) -> "ExperimentConfig":
        try:
            self.afdm_config()
        except ValidationError as e:
            raise ValueError(f"invalid AFDM geometry: {e.errors()[0]['msg']}") from None
        return self

    def afdm_config(self) -> AfdmConfig:
        n = self.afdm.n_subcarriers
        max_doppler = self.channel.max_doppler
        c1 = self.afdm.c1
        if c1 is None:
            c1 = AfdmConfig.from_channel_limits(
                n, self.channel.max_delay, max_doppler, c2=self.afdm.c2, psk_order=self.afdm.psk_order
            ).c1
        return AfdmConfig(
            n_subcarriers=n,
            c1=c1,
            c2=self.afdm.c2,
            cpp_len=self.afdm.cpp_len if self.afdm.cpp_len is not None else self.channel.max_delay,
            psk_order=self.afdm.psk_order,
            max_delay=self.channel.max_delay,
            max_doppler=max_doppler,
        )

    @property
    def power_budget(self) -> float:
        if self.precoder.power_budget is not None:
            return self.precoder.power_budget
        return float(self.afdm.n_subcarriers)

    @property
    def omp_sparsity(self) -> int:
        return self.estimator.omp_sparsity or self.channel.n_paths


def _locate(text: str, loc: Sequence[Union[str, int]]) -> Tuple[Optional[int], Optional[int]]:
    """Best-effort line/column of a validation error by following its key path through the raw text."""
    position = -1
    for key in loc:
        if not isinstance(key, str):
            continue
        found = text.find(f'"{key}"', position + 1)
        if found < 0:
            break
        position = found
    if position < 0:
        return None, None
    line = text.count("\n", 0, position) + 1
    column = position - (text.rfind("\n", 0, position) + 1) + 1
    return line, column


def parse_config(text: str, path: Optional[str] = None) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, path=path, line=e.lineno, column=e.colno) from e

    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"]) or "<root>"
        line, column = _locate(text, first["loc"])
        raise ConfigError(f"{location}: {first['msg']}", path=path, line=line, column=column) from e


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    path = Path(path or os.getenv("AFDM_CONFIG", "configs/table1.json"))
    if not path.is_file():
        raise ConfigError("config file not found", path=str(path))
    logger.info(f"Loading experiment config from {path}")
    return parse_config(path.read_text(encoding="utf-8"), path=str(path))
