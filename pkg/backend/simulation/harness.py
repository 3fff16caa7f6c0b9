import logging
from collections import Counter
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from graph.link_workflow import DownlinkTrialGraph, UplinkTrialGraph
from simulation.config import ExperimentConfig
from simulation.metrics import ResultTable

logger = logging.getLogger(__name__)

SAMPLE_COLUMNS = ["snr_db", "label", "metric", "value"]
CONSTELLATION_COLUMNS = ["trial", "snr_db", "scheme", "re", "im", "symbol_index"]
# Per-SNR rows every uplink trial adds next to the estimators.
REFERENCE_LABELS = ("bcrlb", "link")


def _collect(outputs: Sequence[Dict[str, Any]], snr_db: Sequence[float],
             labels: Sequence[str]) -> tuple:
    samples: List[Dict[str, Any]] = []
    excluded: Counter = Counter()
    for output in outputs:
        if output.get("error_message"):
            for snr in snr_db:
                for label in labels:
                    excluded[(float(snr), label)] += 1
            continue
        samples.extend(output["samples"])
        for key in output.get("excluded", []):
            excluded[(float(key[0]), key[1])] += 1
    return pd.DataFrame(samples, columns=SAMPLE_COLUMNS), excluded


def run_uplink_sweep(cfg: ExperimentConfig, estimators: Optional[Sequence[str]] = None) -> ResultTable:
    graph = UplinkTrialGraph(cfg, estimators)
    logger.info(
        f"Uplink sweep: {cfg.trials} trials, estimators {graph.estimators}, "
        f"SNR {cfg.snr_db} dB, M={graph.estimator.dictionary.n_atoms} atoms"
    )

    outputs = graph.run_trials(list(range(cfg.trials)))
    samples, excluded = _collect(outputs, cfg.snr_db, graph.estimators + list(REFERENCE_LABELS))
    table = ResultTable.from_samples(samples, cfg.trials, excluded, label_name="estimator")

    for snr in cfg.snr_db:
        summary = ", ".join(
            f"{label}={table.value(float(snr), label, 'nmse_db'):.2f}"
            for label in graph.estimators
            if not table.frame[(table.frame["snr_db"] == float(snr)) & (table.frame["label"] == label)].empty
        )
        logger.info(f"SNR {snr} dB NMSE(dB): {summary}")
    logger.info("Uplink sweep finished")
    return table


def run_downlink_sweep(cfg: ExperimentConfig, csi_source: Optional[str] = None,
                       truncation: Optional[int] = None, diagnostics: bool = False) -> ResultTable:
    graph = DownlinkTrialGraph(cfg, csi_source=csi_source, truncation=truncation)
    logger.info(
        f"Downlink sweep: {cfg.trials} trials, schemes {graph.schemes}, CSI {graph.csi_source}"
        + (f" (k_v={graph.truncation})" if graph.csi_source == "truncated" else "")
    )

    outputs = graph.run_trials(list(range(cfg.trials)), diagnostics=diagnostics)
    samples, excluded = _collect(outputs, cfg.snr_db, graph.schemes)
    table = ResultTable.from_samples(samples, cfg.trials, excluded, label_name="scheme")
    table.constellation = pd.DataFrame(
        [point for output in outputs for point in output.get("constellation", [])],
        columns=CONSTELLATION_COLUMNS,
    )
    table.records = [record for output in outputs for record in output.get("records", [])]
    logger.info("Downlink sweep finished")
    return table
