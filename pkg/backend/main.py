from contextlib import asynccontextmanager
from datetime import datetime
import json
import logging
import os
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from fastapi.concurrency import run_in_threadpool
import numpy as np
from pydantic import BaseModel, Field
import uvicorn

from afdm.core import psk_symbols
from channel.doubly_selective import ChannelRealization, effective_channel
from graph.link_workflow import UplinkTrialGraph
from precoding.slp import build_precode_problem, slp_precode
from simulation.config import ExperimentConfig, load_config
from simulation.harness import run_downlink_sweep, run_uplink_sweep
from simulation.metrics import nmse
from utils.errors import AfdmError, ConfigError

load_dotenv()
logging.basicConfig(level=os.getenv("AFDM_LOG_LEVEL", "INFO").upper())
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("Starting AFDM link toolkit service")
    try:
        app.state.config = load_config(os.getenv("AFDM_CONFIG", "configs/table1.json"))
    except ConfigError as e:
        logger.warning(f"Falling back to built-in defaults: {str(e)}")
        app.state.config = ExperimentConfig()
    yield
    logger.info("Shutting down AFDM link toolkit service")


app = FastAPI(
    title="AFDM Link Toolkit",
    description="SBL channel estimation and symbol-level precoding for AFDM links",
    version="1.0.0",
    lifespan=lifespan
)


class EstimateRequest(BaseModel):
    snr_db: float = 20.0
    trial: int = Field(default=0, ge=0)
    estimators: Optional[List[str]] = None


class EstimateResponse(BaseModel):
    snr_db: float
    nmse_db: Dict[str, float]
    excluded: List[str]
    channel: Dict[str, Any]
    sbl_trace: List[Dict[str, float]]


class PrecodeRequest(BaseModel):
    channel: Dict[str, Any]
    symbol_indices: List[int]
    power_budget: Optional[float] = Field(default=None, gt=0)


class PrecodeResponse(BaseModel):
    x_re: List[float]
    x_im: List[float]
    margin: float
    delta: List[float]
    constraint_residual: float
    converged: bool


class SweepRequest(BaseModel):
    trials: Optional[int] = Field(default=None, ge=1)
    seed: Optional[int] = Field(default=None, ge=0)
    snr_db: Optional[List[float]] = None


class DownlinkSweepRequest(SweepRequest):
    csi_source: Optional[str] = None
    truncation: Optional[int] = Field(default=None, ge=0)


class SweepResponse(BaseModel):
    rows: List[Dict[str, Any]]
    flagged: bool


def _with_overrides(request: SweepRequest) -> ExperimentConfig:
    overrides = {k: v for k, v in request.model_dump().items()
                 if k in ("trials", "seed", "snr_db") and v is not None}
    cfg: ExperimentConfig = app.state.config
    return ExperimentConfig.model_validate({**cfg.model_dump(), **overrides}) if overrides else cfg


def _rows(frame) -> List[Dict[str, Any]]:
    return json.loads(frame.to_json(orient="records"))


@app.get("/")
async def root():
    return {"message": "AFDM link toolkit is running"}


@app.get("/health")
async def health_check():
    return {
        "status": "healthy",
        "timestamp": datetime.utcnow().isoformat(),
        "config_loaded": getattr(app.state, "config", None) is not None
    }


@app.get("/config")
async def get_config():
    cfg: ExperimentConfig = app.state.config
    return {"config": cfg.model_dump(), "afdm": cfg.afdm_config().model_dump()}


@app.post("/estimate", response_model=EstimateResponse)
async def estimate(request: EstimateRequest):
    try:
        graph = UplinkTrialGraph(app.state.config, request.estimators)
        result = await run_in_threadpool(graph.run_trial, request.trial, [request.snr_db])
        if result.get("error_message"):
            raise AfdmError(result["error_message"])

        snr = float(request.snr_db)
        h_true = effective_channel(result["channel"])
        scores = {name: nmse(result["estimates"][(snr, name)][1], h_true)
                  for name in graph.estimators if (snr, name) in result["estimates"]}
        trace = result["traces"].get(snr)
        return EstimateResponse(
            snr_db=snr,
            nmse_db=scores,
            excluded=[name for name in graph.estimators if name not in scores],
            channel=result["channel"].to_record(),
            sbl_trace=trace.to_frame().to_dict(orient="records") if trace is not None else []
        )

    except (AfdmError, ValueError) as e:
        logger.error(f"Estimation request rejected: {str(e)}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Estimation failed: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/precode", response_model=PrecodeResponse)
async def precode(request: PrecodeRequest):
    try:
        cfg: ExperimentConfig = app.state.config
        afdm = cfg.afdm_config()
        channel = ChannelRealization.from_record(request.channel, afdm)
        h_eff = effective_channel(channel)
        indices = np.asarray(request.symbol_indices, dtype=np.int64)
        if indices.shape != (afdm.n_subcarriers,) or np.any((indices < 0) | (indices >= afdm.psk_order)):
            raise AfdmError(f"need {afdm.n_subcarriers} symbol indices in [0, {afdm.psk_order})")

        symbols = psk_symbols(indices, afdm.psk_order)
        power = request.power_budget or cfg.power_budget
        problem = build_precode_problem(h_eff, symbols, afdm.psk_order, power)
        solution = await run_in_threadpool(slp_precode, h_eff, symbols, afdm.psk_order, power,
                                           cfg.precoder.tol, cfg.precoder.max_iter)
        return PrecodeResponse(
            x_re=solution.x.real.tolist(),
            x_im=solution.x.imag.tolist(),
            margin=solution.margin,
            delta=solution.delta.tolist(),
            constraint_residual=solution.constraint_residual(problem),
            converged=solution.converged
        )

    except (AfdmError, KeyError, ValueError) as e:
        logger.error(f"Precoding request rejected: {str(e)}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Precoding failed: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/sweep/uplink", response_model=SweepResponse)
async def sweep_uplink(request: SweepRequest):
    try:
        cfg = _with_overrides(request)
        table = await run_in_threadpool(run_uplink_sweep, cfg)
        return SweepResponse(rows=_rows(table.to_wide("nmse_db")), flagged=table.flagged)

    except (AfdmError, ValueError) as e:
        logger.error(f"Uplink sweep rejected: {str(e)}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Uplink sweep failed: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/sweep/downlink", response_model=SweepResponse)
async def sweep_downlink(request: DownlinkSweepRequest):
    try:
        cfg = _with_overrides(request)
        table = await run_in_threadpool(run_downlink_sweep, cfg, request.csi_source, request.truncation)
        return SweepResponse(rows=_rows(table.to_wide("ber")), flagged=table.flagged)

    except (AfdmError, ValueError) as e:
        logger.error(f"Downlink sweep rejected: {str(e)}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Downlink sweep failed: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))


if __name__ == "__main__":
    uvicorn.run(
        "main:app",
        host="0.0.0.0",
        port=int(os.getenv("PORT", "8000")),
        reload=False,
        log_level="info"
    )
