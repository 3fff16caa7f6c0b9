import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from afdm.core import psk_symbols
from channel.doubly_selective import effective_channel
from graph.link_workflow import UplinkTrialGraph, noise_variance, trial_rng
from precoding.slp import build_precode_problem, mmse_precode, slp_precode
from simulation.config import ExperimentConfig, load_config
from simulation.harness import run_downlink_sweep, run_uplink_sweep
from simulation.metrics import nmse
from simulation.selftest import run_selftest
from utils.errors import AfdmError, ConfigError
from utils.result_writer import (
    constellation_frames,
    write_constellation_svg,
    write_csv,
    write_json,
    write_sweep_svg,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afdm", description="AFDM channel estimation and precoding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, default=os.getenv("AFDM_CONFIG", "configs/table1.json"),
                       help="experiment config (JSON)")
        p.add_argument("--out", type=str, default=os.getenv("AFDM_OUTPUT_DIR", "results"),
                       help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--trials", type=int, default=None, help="override the number of trials")
        p.add_argument("--parallelism", type=int, default=None, help="concurrent trials")
        p.add_argument("--emit-svg", action="store_true", help="also write SVG plots")

    estimate = sub.add_parser("estimate", help="one uplink trial at one SNR")
    common(estimate)
    estimate.add_argument("--snr", type=float, default=None, help="SNR in dB (default: highest in the sweep)")
    estimate.add_argument("--trial", type=int, default=0)
    estimate.add_argument("--diagnostics", action="store_true",
                          help="write the per-iteration SBL trace and the channel record")

    precode = sub.add_parser("precode", help="precode one frame with perfect CSI")
    common(precode)
    precode.add_argument("--trial", type=int, default=0)
    precode.add_argument("--snr", type=float, default=None, help="SNR in dB for the MMSE baseline")

    sweep_up = sub.add_parser("sweep-uplink", help="Monte Carlo NMSE/BER sweep of the uplink estimators")
    common(sweep_up)

    sweep_down = sub.add_parser("sweep-downlink", help="Monte Carlo BER sweep of the downlink precoders")
    common(sweep_down)
    sweep_down.add_argument("--csi", choices=["perfect", "estimated", "truncated"], default=None)
    sweep_down.add_argument("--kv", type=int, default=None, help="truncation parameter for --csi truncated")
    sweep_down.add_argument("--diagnostics", action="store_true", help="write precoding JSON records")

    selftest = sub.add_parser("selftest", help="run the oracle-equivalence checks")
    selftest.add_argument("--seed", type=int, default=0)

    return parser


def _configure(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {key: value for key, value in (("seed", args.seed), ("trials", args.trials),
                                               ("parallelism", args.parallelism)) if value is not None}
    if overrides:
        try:
            cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **overrides})
        except ValidationError as e:
            raise ConfigError(f"invalid command-line override: {e.errors()[0]['msg']}") from e
    return cfg


def _estimate(args: argparse.Namespace, cfg: ExperimentConfig, out: Path) -> int:
    snr = args.snr if args.snr is not None else max(cfg.snr_db)
    graph = UplinkTrialGraph(cfg)
    result = graph.run_trial(args.trial, [snr])
    if result.get("error_message"):
        logger.error(result["error_message"])
        return EXIT_FAILURE

    h_true = effective_channel(result["channel"])
    for name in graph.estimators:
        if (snr, name) in result["estimates"]:
            _, h_est = result["estimates"][(snr, name)]
            print(f"{name:12s} NMSE {nmse(h_est, h_true):8.2f} dB")
        else:
            print(f"{name:12s} excluded")

    if args.diagnostics:
        if snr in result["traces"]:
            write_csv(result["traces"][snr].to_frame(), out / f"sbl_trace_trial{args.trial}.csv", comment=None)
        write_json(result["channel"].to_record(), out / f"channel_trial{args.trial}.json")
    return EXIT_OK


def _precode(args: argparse.Namespace, cfg: ExperimentConfig, out: Path) -> int:
    graph = UplinkTrialGraph(cfg)
    rng = trial_rng(cfg.seed, args.trial)
    channel = graph.estimator.sample(rng)
    afdm = graph.estimator.afdm
    symbols = psk_symbols(rng.integers(0, afdm.psk_order, afdm.n_subcarriers), afdm.psk_order)
    h_eff = effective_channel(channel)

    problem = build_precode_problem(h_eff, symbols, afdm.psk_order, cfg.power_budget)
    solution = slp_precode(h_eff, symbols, afdm.psk_order, cfg.power_budget,
                           tol=cfg.precoder.tol, max_iter=cfg.precoder.max_iter)
    print(f"SLP margin t = {solution.margin:.6f} (residual {solution.constraint_residual(problem):.2e}, "
          f"converged={solution.converged}, iterations={solution.iterations})")

    snr = args.snr if args.snr is not None else max(cfg.snr_db)
    x_mmse = mmse_precode(h_eff, symbols, cfg.power_budget, noise_variance(snr))
    print(f"MMSE waveform power {float(np.vdot(x_mmse, x_mmse).real):.6f}")

    write_json({"channel": channel.to_record(), **solution.to_record(problem)},
               out / f"precode_trial{args.trial}.json")
    return EXIT_OK


def _sweep_uplink(args: argparse.Namespace, cfg: ExperimentConfig, out: Path) -> int:
    table = run_uplink_sweep(cfg)
    wide = table.to_wide("nmse_db")
    write_csv(wide, out / "uplink_nmse.csv")
    if args.emit_svg:
        write_sweep_svg(wide, out / "uplink_nmse.svg", "estimator", "nmse_db_mean", "NMSE (dB)")
        if "ber_mean" in wide:
            write_sweep_svg(wide.dropna(subset=["ber_mean"]), out / "uplink_ber.svg", "estimator", "ber_mean",
                            "BER", log_y=True)
    return EXIT_OK


def _sweep_downlink(args: argparse.Namespace, cfg: ExperimentConfig, out: Path) -> int:
    table = run_downlink_sweep(cfg, csi_source=args.csi, truncation=args.kv, diagnostics=args.diagnostics)
    source = args.csi or cfg.precoder.csi_source
    wide = table.to_wide("ber")
    write_csv(wide, out / f"downlink_ber_{source}.csv")
    if table.constellation is not None and not table.constellation.empty:
        for group in constellation_frames(table.constellation):
            stem = f"constellation_{source}_{group['scheme']}_{group['snr_db']:g}dB"
            write_csv(group["points"], out / f"{stem}.csv", comment=None)
            if args.emit_svg:
                write_constellation_svg(group["points"], out / f"{stem}.svg",
                                        title=f"{group['scheme']} at {group['snr_db']:g} dB")
    if args.diagnostics and table.records:
        write_json({"records": table.records}, out / f"precode_records_{source}.json")
    if args.emit_svg:
        write_sweep_svg(wide, out / f"downlink_ber_{source}.svg", "scheme", "ber_mean", "BER", log_y=True)
    return EXIT_OK


COMMANDS = {
    "estimate": _estimate,
    "precode": _precode,
    "sweep-uplink": _sweep_uplink,
    "sweep-downlink": _sweep_downlink,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=os.getenv("AFDM_LOG_LEVEL", "INFO").upper(),
                        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    if args.command == "selftest":
        results = run_selftest(args.seed)
        for result in results:
            print(f"{'ok' if result.passed else 'FAIL':4s} {result.name}: {result.detail}")
        return EXIT_OK if all(result.passed for result in results) else EXIT_FAILURE

    try:
        cfg = _configure(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except ConfigError as e:
        logger.error(f"Configuration error: {str(e)}")
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except AfdmError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {str(e)}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
