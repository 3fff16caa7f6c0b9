import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from langgraph.graph import END, StateGraph
from typing_extensions import TypedDict

from afdm.core import AfdmConfig, daft, psk_demodulate, psk_symbols, remove_cpp
from channel.doubly_selective import (
    ChannelRealization,
    complex_awgn,
    effective_channel,
    propagate_symbol,
    sample_channel,
    truncated_channel,
)
from estimation.baselines import bcrlb, mmse_equalize, mmse_estimate, omp_estimate
from estimation.dictionary import (
    Dictionary,
    build_dictionary,
    genie_prior_covariance,
    reconstruct_channel,
    true_coefficients,
)
from estimation.sbl import SblTrace, sbl_estimate
from precoding.slp import PrecodeSolution, build_precode_problem, mmse_precode, slp_precode, socp_precode
from simulation.config import ExperimentConfig
from simulation.metrics import ber, nmse_ratio, sample_rows
from simulation.pilots import zc_pilot
from utils.errors import EstimatorDivergedError, InfeasibleProblemError

logger = logging.getLogger(__name__)


CSI_SOURCES = ("perfect", "estimated", "truncated")


def noise_variance(snr_db: float) -> float:
    """Per time-sample noise variance for unit-power transmit symbols."""
    return 10.0 ** (-snr_db / 10.0)


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))


class UplinkTrialState(TypedDict):
    trial: int
    snr_db: List[float]
    rng: Any
    channel: Optional[ChannelRealization]
    pilot_obs: Dict[float, np.ndarray]
    data_obs: Dict[float, np.ndarray]
    data_indices: Optional[np.ndarray]
    link_power: Dict[float, Tuple[float, float]]
    estimates: Dict[Tuple[float, str], Tuple[Optional[np.ndarray], np.ndarray]]
    traces: Dict[float, SblTrace]
    samples: List[Dict[str, Any]]
    excluded: List[Tuple[float, str]]
    error_message: Optional[str]


class DownlinkTrialState(TypedDict):
    trial: int
    snr_db: List[float]
    csi_source: str
    truncation: Optional[int]
    rng: Any
    channel: Optional[ChannelRealization]
    csi: Dict[float, np.ndarray]
    frame_indices: Optional[np.ndarray]
    waveforms: Dict[Tuple[str, float, int], np.ndarray]
    decisions: Dict[Tuple[str, float, int], np.ndarray]
    constellation: List[Dict[str, Any]]
    records: List[Dict[str, Any]]
    diagnostics: bool
    samples: List[Dict[str, Any]]
    excluded: List[Tuple[float, str]]
    error_message: Optional[str]


class UplinkEstimator:
    """Shared sounding setup: AFDM geometry, ZC pilot and the concatenated dictionary."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.afdm: AfdmConfig = cfg.afdm_config()
        self.pilot = zc_pilot(self.afdm.n_subcarriers, cfg.estimator.pilot_root)
        self.dictionary: Dictionary = build_dictionary(
            self.pilot,
            self.afdm,
            cfg.channel.max_delay,
            cfg.channel.max_doppler,
            cfg.estimator.doppler_oversampling,
        )

    def sample(self, rng: np.random.Generator) -> ChannelRealization:
        ch = self.cfg.channel
        return sample_channel(rng, self.afdm, ch.n_paths, ch.max_delay, ch.max_doppler,
                              fractional=ch.fractional, distinct_taps=ch.distinct_taps)

    def estimate(self, name: str, y: np.ndarray, noise_var: float,
                 channel: ChannelRealization) -> Tuple[Optional[np.ndarray], Optional[SblTrace]]:
        """Coefficient estimate for one estimator; perfect CSI has no coefficient vector."""
        hyper = self.cfg.estimator.sbl
        if name == "sbl":
            return sbl_estimate(y, self.dictionary, hyper.model_copy(update={"eta": None}), beta0=noise_var)
        if name == "sbl-flat":
            flat = hyper.model_copy(update={"eta": None, "laplace_prior": False})
            return sbl_estimate(y, self.dictionary, flat, beta0=noise_var)
        if name == "sbl-partial":
            partial = hyper.model_copy(update={"eta": self.cfg.estimator.partial_eta})
            return sbl_estimate(y, self.dictionary, partial, n_paths=self.cfg.channel.n_paths,
                                beta0=noise_var)
        if name == "omp":
            return omp_estimate(y, self.dictionary, self.cfg.omp_sparsity), None
        if name == "mmse":
            r_h = genie_prior_covariance(channel, self.dictionary)
            r_w = noise_var * np.eye(self.dictionary.n_observations)
            return mmse_estimate(y, self.dictionary, r_h, r_w), None
        if name == "perfect":
            return None, None
        raise ValueError(f"unknown estimator '{name}'")

    def channel_estimate(self, coeffs: Optional[np.ndarray], channel: ChannelRealization) -> np.ndarray:
        if coeffs is None:
            return effective_channel(channel)
        return reconstruct_channel(coeffs, self.dictionary)


class UplinkTrialGraph:
    def __init__(self, cfg: ExperimentConfig, estimators: Optional[Sequence[str]] = None):
        self.cfg = cfg
        self.estimator = UplinkEstimator(cfg)
        self.estimators = list(estimators or cfg.estimator.estimators)
        self.workflow = self._build_workflow()

    def _build_workflow(self):
        workflow = StateGraph(UplinkTrialState)

        workflow.add_node("sample_channel", self._sample_channel)
        workflow.add_node("sound_channel", self._sound_channel)
        workflow.add_node("estimate", self._estimate)
        workflow.add_node("score_uplink", self._score)
        workflow.add_node("handle_error", self._handle_error)
        workflow.add_node("finalize", self._finalize)

        workflow.set_entry_point("sample_channel")
        for step, following in (("sample_channel", "sound_channel"),
                                ("sound_channel", "estimate"),
                                ("estimate", "score_uplink"),
                                ("score_uplink", "finalize")):
            workflow.add_conditional_edges(
                step, self._next_or_error, {"next": following, "error": "handle_error"}
            )

        workflow.add_edge("handle_error", END)
        workflow.add_edge("finalize", END)
        return workflow.compile()

    def _next_or_error(self, state: UplinkTrialState) -> str:
        return "error" if state.get("error_message") else "next"

    def _sample_channel(self, state: UplinkTrialState) -> Dict[str, Any]:
        try:
            return {**state, "channel": self.estimator.sample(state["rng"])}
        except Exception as e:
            logger.error(f"Channel sampling failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"Channel sampling failed: {str(e)}"}

    def _sound_channel(self, state: UplinkTrialState) -> Dict[str, Any]:
        try:
            rng = state["rng"]
            channel = state["channel"]
            afdm = self.estimator.afdm
            q = afdm.psk_order
            data_indices = rng.integers(0, q, size=(self.cfg.frame_length - 1, afdm.n_subcarriers))

            pilot_obs, data_obs, link_power = {}, {}, {}
            for snr in state["snr_db"]:
                noise_var = noise_variance(snr)
                sounding = propagate_symbol(self.estimator.pilot, channel, noise_var, rng)
                pilot_obs[snr] = sounding.y
                signal, noise = [sounding.signal_power], [sounding.noise_power]
                rows = []
                for frame in data_indices:
                    received = propagate_symbol(psk_symbols(frame, q), channel, noise_var, rng)
                    rows.append(received.y)
                    signal.append(received.signal_power)
                    noise.append(received.noise_power)
                data_obs[snr] = np.array(rows)
                link_power[snr] = (float(np.mean(signal)), float(np.mean(noise)))

            return {**state, "pilot_obs": pilot_obs, "data_obs": data_obs,
                    "data_indices": data_indices, "link_power": link_power}
        except Exception as e:
            logger.error(f"Channel sounding failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"Channel sounding failed: {str(e)}"}

    def _estimate(self, state: UplinkTrialState) -> Dict[str, Any]:
        try:
            estimates, traces, excluded = {}, {}, list(state.get("excluded", []))
            for snr in state["snr_db"]:
                noise_var = noise_variance(snr)
                for name in self.estimators:
                    try:
                        coeffs, trace = self.estimator.estimate(name, state["pilot_obs"][snr], noise_var,
                                                                state["channel"])
                    except EstimatorDivergedError as e:
                        logger.error(f"{name} diverged in trial {state['trial']} at {snr} dB: {str(e)}")
                        excluded.append((float(snr), name))
                        continue
                    if name == "sbl" and trace is not None:
                        traces[snr] = trace
                    estimates[(snr, name)] = (coeffs, self.estimator.channel_estimate(coeffs, state["channel"]))
            return {**state, "estimates": estimates, "traces": traces, "excluded": excluded}
        except Exception as e:
            logger.error(f"Estimation failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"Estimation failed: {str(e)}"}

    def _score(self, state: UplinkTrialState) -> Dict[str, Any]:
        try:
            channel = state["channel"]
            dictionary = self.estimator.dictionary
            h_true = effective_channel(channel)
            h_bar = true_coefficients(channel, dictionary)
            r_h = genie_prior_covariance(channel, dictionary)
            prior_energy = float(np.trace(dictionary.phi @ r_h @ dictionary.phi.conj().T).real)
            q = self.estimator.afdm.psk_order

            samples = []
            for snr in state["snr_db"]:
                noise_var = noise_variance(snr)
                for name in self.estimators:
                    if (snr, name) not in state["estimates"]:
                        continue
                    coeffs, h_est = state["estimates"][(snr, name)]
                    equalized = [mmse_equalize(y, h_est, noise_var) for y in state["data_obs"][snr]]
                    decided = psk_demodulate(np.concatenate(equalized), q)
                    metrics = {
                        "nmse_db": nmse_ratio(h_est, h_true),
                        "ber": ber(decided, state["data_indices"].reshape(-1), q),
                    }
                    if coeffs is not None:
                        error = dictionary.phi @ (coeffs - h_bar)
                        metrics["pilot_nmse_db"] = float(np.vdot(error, error).real) / prior_energy
                    samples.extend(sample_rows(snr, name, metrics))

                r_w = noise_var * np.eye(dictionary.n_observations)
                samples.extend(sample_rows(snr, "bcrlb", {
                    "pilot_nmse_db": bcrlb(dictionary, r_h, r_w) / prior_energy,
                }))
                signal, noise = state["link_power"][snr]
                if noise > 0:
                    samples.extend(sample_rows(snr, "link", {"measured_snr_db": signal / noise}))

            return {**state, "samples": samples}
        except Exception as e:
            logger.error(f"Scoring failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"Scoring failed: {str(e)}"}

    def _handle_error(self, state: UplinkTrialState) -> Dict[str, Any]:
        logger.error(f"Excluding trial {state['trial']}: {state.get('error_message', 'Unknown error')}")
        return {**state, "samples": []}

    def _finalize(self, state: UplinkTrialState) -> Dict[str, Any]:
        logger.debug(f"Trial {state['trial']} finished with {len(state['samples'])} samples")
        return state

    def initial_state(self, trial: int, snr_db: Optional[Sequence[float]] = None) -> UplinkTrialState:
        return UplinkTrialState(
            trial=trial,
            snr_db=[float(s) for s in (snr_db if snr_db is not None else self.cfg.snr_db)],
            rng=trial_rng(self.cfg.seed, trial),
            channel=None,
            pilot_obs={},
            data_obs={},
            data_indices=None,
            link_power={},
            estimates={},
            traces={},
            samples=[],
            excluded=[],
            error_message=None,
        )

    def run_trials(self, trials: Sequence[int], snr_db: Optional[Sequence[float]] = None) -> List[UplinkTrialState]:
        states = [self.initial_state(trial, snr_db) for trial in trials]
        return self.workflow.batch(states, config={"max_concurrency": self.cfg.parallelism})

    def run_trial(self, trial: int, snr_db: Optional[Sequence[float]] = None) -> UplinkTrialState:
        return self.workflow.invoke(self.initial_state(trial, snr_db))


class DownlinkTrialGraph:
    def __init__(self, cfg: ExperimentConfig, csi_source: Optional[str] = None,
                 truncation: Optional[int] = None, schemes: Optional[Sequence[str]] = None):
        self.cfg = cfg
        self.csi_source = csi_source or cfg.precoder.csi_source
        if self.csi_source not in CSI_SOURCES:
            raise ValueError(f"unknown CSI source '{self.csi_source}', expected one of {CSI_SOURCES}")
        self.truncation = truncation if truncation is not None else cfg.channel.truncation
        if self.csi_source == "truncated" and self.truncation is None:
            raise ValueError("truncated CSI needs a truncation parameter k_v")
        self.schemes = list(schemes or cfg.precoder.schemes)
        self.uplink = UplinkEstimator(cfg)
        self.workflow = self._build_workflow()

    def _build_workflow(self):
        workflow = StateGraph(DownlinkTrialState)

        workflow.add_node("sample_channel", self._sample_channel)
        workflow.add_node("perfect_csi", self._perfect_csi)
        workflow.add_node("estimated_csi", self._estimated_csi)
        workflow.add_node("truncated_csi", self._truncated_csi)
        workflow.add_node("precode", self._precode)
        workflow.add_node("propagate", self._propagate)
        workflow.add_node("score_downlink", self._score)
        workflow.add_node("handle_error", self._handle_error)
        workflow.add_node("finalize", self._finalize)

        workflow.set_entry_point("sample_channel")
        workflow.add_conditional_edges(
            "sample_channel",
            self._acquire_csi,
            {
                "perfect": "perfect_csi",
                "estimated": "estimated_csi",
                "truncated": "truncated_csi",
                "error": "handle_error",
            }
        )
        for source in ("perfect_csi", "estimated_csi", "truncated_csi"):
            workflow.add_conditional_edges(source, self._next_or_error, {"next": "precode", "error": "handle_error"})
        for step, following in (("precode", "propagate"),
                                ("propagate", "score_downlink"),
                                ("score_downlink", "finalize")):
            workflow.add_conditional_edges(step, self._next_or_error, {"next": following, "error": "handle_error"})

        workflow.add_edge("handle_error", END)
        workflow.add_edge("finalize", END)
        return workflow.compile()

    def _next_or_error(self, state: DownlinkTrialState) -> str:
        return "error" if state.get("error_message") else "next"

    def _acquire_csi(self, state: DownlinkTrialState) -> str:
        if state.get("error_message"):
            return "error"
        return state["csi_source"]

    def _sample_channel(self, state: DownlinkTrialState) -> Dict[str, Any]:
        try:
            rng = state["rng"]
            channel = self.uplink.sample(rng)
            afdm = self.uplink.afdm
            frames = rng.integers(0, afdm.psk_order, size=(self.cfg.frame_length, afdm.n_subcarriers))
            return {**state, "channel": channel, "frame_indices": frames}
        except Exception as e:
            logger.error(f"Channel sampling failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"Channel sampling failed: {str(e)}"}

    def _perfect_csi(self, state: DownlinkTrialState) -> Dict[str, Any]:
        try:
            h_eff = effective_channel(state["channel"])
            return {**state, "csi": {snr: h_eff for snr in state["snr_db"]}}
        except Exception as e:
            logger.error(f"Perfect CSI failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"Perfect CSI failed: {str(e)}"}

    def _truncated_csi(self, state: DownlinkTrialState) -> Dict[str, Any]:
        try:
            h_trunc = truncated_channel(state["channel"], state["truncation"])
            return {**state, "csi": {snr: h_trunc for snr in state["snr_db"]}}
        except Exception as e:
            logger.error(f"Truncated CSI failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"Truncated CSI failed: {str(e)}"}

    def _estimated_csi(self, state: DownlinkTrialState) -> Dict[str, Any]:
        """Uplink SBL sounding per SNR; reciprocity gives the downlink channel."""
        try:
            csi = {}
            for snr in state["snr_db"]:
                noise_var = noise_variance(snr)
                sounding = propagate_symbol(self.uplink.pilot, state["channel"], noise_var, state["rng"])
                coeffs, _ = self.uplink.estimate("sbl", sounding.y, noise_var, state["channel"])
                csi[snr] = self.uplink.channel_estimate(coeffs, state["channel"])
            return {**state, "csi": csi}
        except Exception as e:
            logger.error(f"Estimated CSI failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"Estimated CSI failed: {str(e)}"}

    def _slp(self, scheme: str, h: np.ndarray, symbols: np.ndarray) -> PrecodeSolution:
        q = self.uplink.afdm.psk_order
        if scheme == "slp-socp":
            return socp_precode(h, symbols, q, self.cfg.power_budget)
        return slp_precode(h, symbols, q, self.cfg.power_budget,
                           tol=self.cfg.precoder.tol, max_iter=self.cfg.precoder.max_iter)

    def _precode(self, state: DownlinkTrialState) -> Dict[str, Any]:
        try:
            q = self.uplink.afdm.psk_order
            waveforms, records, excluded = {}, [], list(state.get("excluded", []))
            for f, indices in enumerate(state["frame_indices"]):
                symbols = psk_symbols(indices, q)
                # SLP depends on CSI only, so one solve serves every SNR sharing that CSI
                solved: Dict[Tuple[str, int], Optional[np.ndarray]] = {}
                for snr in state["snr_db"]:
                    h = state["csi"][snr]
                    for scheme in self.schemes:
                        if scheme == "mmse":
                            x = mmse_precode(h, symbols, self.cfg.power_budget, noise_variance(snr))
                        else:
                            key = (scheme, id(h))
                            if key not in solved:
                                try:
                                    solution = self._slp(scheme, h, symbols)
                                    solved[key] = solution.x
                                    if state["diagnostics"] and f == 0:
                                        problem = build_precode_problem(h, symbols, q, self.cfg.power_budget)
                                        records.append({"scheme": scheme, "snr_db": snr,
                                                        **solution.to_record(problem)})
                                except InfeasibleProblemError as e:
                                    logger.error(f"{scheme} infeasible in trial {state['trial']}: {str(e)}")
                                    solved[key] = None
                            x = solved[key]
                            if x is None:
                                excluded.append((float(snr), scheme))
                                continue
                        waveforms[(scheme, snr, f)] = x
            return {**state, "waveforms": waveforms, "records": records, "excluded": excluded}
        except Exception as e:
            logger.error(f"Precoding failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"Precoding failed: {str(e)}"}

    def _propagate(self, state: DownlinkTrialState) -> Dict[str, Any]:
        """True channel plus one time-domain noise draw per (SNR, frame) shared by all schemes."""
        try:
            afdm = self.uplink.afdm
            channel = state["channel"]
            rng = state["rng"]
            constellation_points = set(float(s) for s in self.cfg.constellation_snr_db)
            decisions, constellation = {}, []
            for snr in state["snr_db"]:
                for f, indices in enumerate(state["frame_indices"]):
                    noise = complex_awgn(rng, afdm.n_subcarriers + afdm.cpp_len, noise_variance(snr))
                    noise_af = daft(remove_cpp(noise, afdm), afdm)
                    for scheme in self.schemes:
                        if (scheme, snr, f) not in state["waveforms"]:
                            continue
                        y = propagate_symbol(state["waveforms"][(scheme, snr, f)], channel, 0.0).y + noise_af
                        decisions[(scheme, snr, f)] = psk_demodulate(y, afdm.psk_order)
                        if float(snr) in constellation_points:
                            constellation.extend(
                                {"trial": state["trial"], "snr_db": float(snr), "scheme": scheme,
                                 "re": float(point.real), "im": float(point.imag), "symbol_index": int(k)}
                                for point, k in zip(y, indices)
                            )
            return {**state, "decisions": decisions, "constellation": constellation}
        except Exception as e:
            logger.error(f"Propagation failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"Propagation failed: {str(e)}"}

    def _score(self, state: DownlinkTrialState) -> Dict[str, Any]:
        try:
            q = self.uplink.afdm.psk_order
            samples = []
            for snr in state["snr_db"]:
                for scheme in self.schemes:
                    frames = [f for f in range(len(state["frame_indices"])) if (scheme, snr, f) in state["decisions"]]
                    if not frames:
                        continue
                    decided = np.concatenate([state["decisions"][(scheme, snr, f)] for f in frames])
                    truth = np.concatenate([state["frame_indices"][f] for f in frames])
                    samples.extend(sample_rows(snr, scheme, {"ber": ber(decided, truth, q)}))
            return {**state, "samples": samples}
        except Exception as e:
            logger.error(f"BER scoring failed in trial {state['trial']}: {str(e)}")
            return {**state, "error_message": f"BER scoring failed: {str(e)}"}

    def _handle_error(self, state: DownlinkTrialState) -> Dict[str, Any]:
        logger.error(f"Excluding trial {state['trial']}: {state.get('error_message', 'Unknown error')}")
        return {**state, "samples": [], "constellation": []}

    def _finalize(self, state: DownlinkTrialState) -> Dict[str, Any]:
        logger.debug(f"Trial {state['trial']} finished with {len(state['samples'])} samples")
        return state

    def initial_state(self, trial: int, snr_db: Optional[Sequence[float]] = None,
                      diagnostics: bool = False) -> DownlinkTrialState:
        return DownlinkTrialState(
            trial=trial,
            snr_db=[float(s) for s in (snr_db if snr_db is not None else self.cfg.snr_db)],
            csi_source=self.csi_source,
            truncation=self.truncation,
            rng=trial_rng(self.cfg.seed, trial),
            channel=None,
            csi={},
            frame_indices=None,
            waveforms={},
            decisions={},
            constellation=[],
            records=[],
            diagnostics=diagnostics,
            samples=[],
            excluded=[],
            error_message=None,
        )

    def run_trials(self, trials: Sequence[int], diagnostics: bool = False) -> List[DownlinkTrialState]:
        states = [self.initial_state(trial, diagnostics=diagnostics and trial == trials[0]) for trial in trials]
        return self.workflow.batch(states, config={"max_concurrency": self.cfg.parallelism})
