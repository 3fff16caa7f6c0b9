import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from afdm.core import indices_to_bits
from utils.errors import DomainError, InputShapeError

logger = logging.getLogger(__name__)

NMSE_FLOOR_DB = -300.0
EXCLUDED_FRACTION_LIMIT = 0.01

# Metrics aggregated as a mean ratio and reported in dB.
DB_METRICS = {"nmse_db", "pilot_nmse_db", "measured_snr_db"}

ROW_COLUMNS = ["snr_db", "label", "metric", "mean", "stderr", "trials", "excluded"]


def nmse_ratio(h_est: np.ndarray, h_true: np.ndarray) -> float:
    h_est = np.asarray(h_est)
    h_true = np.asarray(h_true)
    if h_est.shape != h_true.shape:
        raise InputShapeError(f"shape mismatch: {h_est.shape} vs {h_true.shape}")
    reference = np.linalg.norm(h_true) ** 2
    if reference == 0:
        raise DomainError("NMSE is undefined against an all-zero reference")
    return float(np.linalg.norm(h_est - h_true) ** 2 / reference)


def ratio_to_db(ratio: float) -> float:
    if ratio <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(ratio), NMSE_FLOOR_DB)


def nmse(h_est: np.ndarray, h_true: np.ndarray) -> float:
    return ratio_to_db(nmse_ratio(h_est, h_true))


def bit_errors(decided: np.ndarray, truth: np.ndarray, q: int) -> int:
    decided = np.asarray(decided).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if decided.shape != truth.shape:
        raise InputShapeError(f"length mismatch: {decided.shape} vs {truth.shape}")
    return int(np.count_nonzero(indices_to_bits(decided, q) != indices_to_bits(truth, q)))


def ber(decided: np.ndarray, truth: np.ndarray, q: int) -> float:
    truth = np.asarray(truth).reshape(-1)
    if truth.size == 0:
        return 0.0
    bits = truth.size * (int(q).bit_length() - 1)
    return bit_errors(decided, truth, q) / bits


@dataclass
class ResultTable:
    """Aggregated sweep results in long form: one row per (snr_db, label, metric)."""

    frame: pd.DataFrame
    label_name: str = "label"
    flagged: bool = False
    constellation: Optional[pd.DataFrame] = None
    records: List[Dict[str, Any]] = field(default_factory=list)
    excluded: Dict[tuple, int] = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples: pd.DataFrame, trials: int, excluded: Dict[tuple, int],
                     label_name: str = "label") -> "ResultTable":
        """Aggregate per-trial samples with columns snr_db, label, metric, value."""
        rows = []
        for (snr_db, label, metric), group in samples.groupby(["snr_db", "label", "metric"], sort=False):
            values = group["value"].to_numpy(dtype=float)
            mean, stderr = _aggregate(metric, values)
            rows.append({
                "snr_db": float(snr_db),
                "label": label,
                "metric": metric,
                "mean": mean,
                "stderr": stderr,
                "trials": int(values.size),
                "excluded": int(excluded.get((float(snr_db), label), 0)),
            })
        frame = pd.DataFrame(rows, columns=ROW_COLUMNS)
        table = cls(frame=frame, label_name=label_name, excluded=dict(excluded))
        table.flagged = table.excluded_fraction(trials) >= EXCLUDED_FRACTION_LIMIT
        if table.flagged:
            logger.warning(
                f"Excluded-trial fraction {table.excluded_fraction(trials):.2%} is at or above "
                f"{EXCLUDED_FRACTION_LIMIT:.0%}"
            )
        return table

    def excluded_fraction(self, trials: int) -> float:
        points = set(zip(self.frame["snr_db"], self.frame["label"])) | set(self.excluded)
        if not points:
            return 0.0
        return float(sum(self.excluded.values()) / (len(points) * trials))

    def value(self, snr_db: float, label: str, metric: str, column: str = "mean") -> float:
        match = self.frame[
            (self.frame["snr_db"] == snr_db) & (self.frame["label"] == label) & (self.frame["metric"] == metric)
        ]
        if match.empty:
            raise KeyError(f"no result for snr_db={snr_db}, {self.label_name}={label}, metric={metric}")
        return float(match[column].iloc[0])

    def labels(self) -> List[str]:
        return list(dict.fromkeys(self.frame["label"]))

    def to_wide(self, lead_metric: str) -> pd.DataFrame:
        """One row per (snr_db, label) with <metric>_mean/<metric>_stderr columns, lead metric first."""
        metrics = [lead_metric] + [m for m in dict.fromkeys(self.frame["metric"]) if m != lead_metric]
        base = (
            self.frame.groupby(["snr_db", "label"], sort=False)
            .agg(trials=("trials", "max"), excluded=("excluded", "max"))
            .reset_index()
        )
        wide = base[["snr_db", "label"]].copy()
        for metric in metrics:
            part = self.frame[self.frame["metric"] == metric][["snr_db", "label", "mean", "stderr"]]
            part = part.rename(columns={"mean": f"{metric}_mean", "stderr": f"{metric}_stderr"})
            wide = wide.merge(part, on=["snr_db", "label"], how="left")
            if metric == lead_metric:
                wide = wide.merge(base, on=["snr_db", "label"], how="left")
        wide = wide.rename(columns={"label": self.label_name})
        return wide.sort_values(["snr_db"], kind="stable").reset_index(drop=True)


def _aggregate(metric: str, values: np.ndarray) -> tuple:
    if values.size == 0:
        return float("nan"), float("nan")
    stderr = float(np.std(values, ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    if metric in DB_METRICS:
        mean_ratio = float(np.mean(values))
        if mean_ratio <= 0:
            return NMSE_FLOOR_DB, 0.0
        return ratio_to_db(mean_ratio), float(10.0 / np.log(10.0) * stderr / mean_ratio)
    return float(np.mean(values)), stderr


def sample_rows(snr_db: float, label: str, metrics: Dict[str, float]) -> Iterable[Dict[str, Any]]:
    for metric, value in metrics.items():
        yield {"snr_db": float(snr_db), "label": label, "metric": metric, "value": float(value)}
