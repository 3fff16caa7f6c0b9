import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

SNR_DEFINITION = (
    "SNR definition: unit-average-power transmit symbols; "
    "noise variance 10^(-SNR_dB/10) per time-domain sample"
)

PathLike = Union[str, Path]


def write_csv(frame: pd.DataFrame, path: PathLike, comment: Optional[str] = SNR_DEFINITION) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        if comment:
            handle.write(f"# {comment}\n")
        frame.to_csv(handle, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_json(payload: Any, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Wrote JSON record to {path}")
    return path


def write_sweep_svg(frame: pd.DataFrame, path: PathLike, label_column: str, value_column: str,
                    ylabel: str, log_y: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for label, group in frame.groupby(label_column, sort=False):
        values = group.sort_values("snr_db")
        if values[value_column].isna().all():
            continue
        ax.plot(values["snr_db"], values[value_column], marker="o", label=str(label))
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(ylabel)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Wrote plot to {path}")
    return path


def write_constellation_svg(points: pd.DataFrame, path: PathLike, title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    scatter = ax.scatter(points["re"], points["im"], c=points["symbol_index"], s=4, cmap="tab10")
    ax.axhline(0.0, color="grey", linewidth=0.5)
    ax.axvline(0.0, color="grey", linewidth=0.5)
    ax.set_xlabel("In-phase")
    ax.set_ylabel("Quadrature")
    ax.set_aspect("equal", adjustable="datalim")
    if title:
        ax.set_title(title)
    fig.colorbar(scatter, ax=ax, label="symbol index")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path


def constellation_frames(points: pd.DataFrame) -> Iterable[Dict[str, Any]]:
    """Split a constellation dump into one (scheme, snr_db) group at a time."""
    for (scheme, snr_db), group in points.groupby(["scheme", "snr_db"], sort=False):
        yield {"scheme": scheme, "snr_db": float(snr_db),
               "points": group[["re", "im", "symbol_index"]].reset_index(drop=True)}
