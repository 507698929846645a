"""HTTP service exposing dataset generation, training, evaluation, gradient
checking and parameter accounting.

Every endpoint is synchronous: the response arrives when the work (and all
file writes) is done. Request bodies reuse the package's pydantic config
models, so schema violations come back as standard 422 validation errors with
field paths; domain failures (bad geometry, corrupt datasets, oversized
gradcheck configs, ...) map to structured 400/409 responses.
"""

from __future__ import annotations

from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from . import __version__
from .configs import GeneratorConfig, MetricOptions, RunConfig
from .errors import DatasetError, SctFusionError
from .gradcheck import GradCheckReport
from .metrics import MetricsReport
from .runner import (
    run_eval,
    run_gen_data,
    run_gradcheck,
    run_params,
    run_train,
)


class GenDataRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: GeneratorConfig
    out_dir: str


class GenDataResponse(BaseModel):
    dataset_dir: str
    manifest_crc32c: str
    num_samples: int
    modalities: list[str]
    files: dict[str, str]


class TrainRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: RunConfig
    out_dir: Optional[str] = None
    seed: Optional[int] = None
    mode: Optional[str] = None


class EpochRow(BaseModel):
    epoch: int
    train_loss: float
    ap_micro: float
    ap_macro: float
    f2_macro: float


class TrainResponse(BaseModel):
    out_dir: str
    checkpoint_path: str
    history_path: str
    metrics_path: str
    mode: str
    seed: int
    best_epoch: int
    best_ap_macro: float
    history: list[EpochRow]
    report: MetricsReport


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    dataset_dir: str
    eval_count: Optional[int] = None
    metrics: MetricOptions = MetricOptions()
    out_dir: Optional[str] = None


class EvalResponse(BaseModel):
    checkpoint_path: str
    dataset_dir: str
    metrics_path: Optional[str]
    report: MetricsReport


class GradcheckRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: RunConfig
    seed: Optional[int] = None
    mode: Optional[str] = None


class ParamsRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: RunConfig
    out_dir: Optional[str] = None
    seed: Optional[int] = None
    mode: Optional[str] = None


class SweepRowModel(BaseModel):
    embed_dim: int
    params: int
    ap_macro: float


class ParamsResponse(BaseModel):
    total: int
    by_module: dict[str, int]
    mode: str
    sweep: Optional[list[SweepRowModel]] = None
    sweep_csv_path: Optional[str] = None


app = FastAPI(title="sctfusion", version=__version__)


@app.exception_handler(SctFusionError)
async def _domain_error(request: Request, exc: SctFusionError) -> JSONResponse:
    status = 409 if isinstance(exc, DatasetError) else 400
    return JSONResponse(
        status_code=status,
        content={"detail": {"error": type(exc).__name__, "message": str(exc)}},
    )


@app.exception_handler(ValueError)
async def _value_error(request: Request, exc: ValueError) -> JSONResponse:
    return JSONResponse(
        status_code=400,
        content={"detail": {"error": type(exc).__name__, "message": str(exc)}},
    )


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/gen-data", response_model=GenDataResponse)
def gen_data(request: GenDataRequest) -> GenDataResponse:
    outcome = run_gen_data(request.config, request.out_dir)
    return GenDataResponse(
        dataset_dir=outcome.dataset_dir,
        manifest_crc32c=outcome.manifest_crc32c,
        num_samples=outcome.num_samples,
        modalities=outcome.modalities,
        files=outcome.files,
    )


@app.post("/train", response_model=TrainResponse)
def train_endpoint(request: TrainRequest) -> TrainResponse:
    outcome = run_train(
        request.config, out_dir=request.out_dir, seed=request.seed, mode=request.mode
    )
    return TrainResponse(
        out_dir=outcome.out_dir,
        checkpoint_path=outcome.checkpoint_path,
        history_path=outcome.history_path,
        metrics_path=outcome.metrics_path,
        mode=outcome.mode,
        seed=outcome.seed,
        best_epoch=outcome.best_epoch,
        best_ap_macro=outcome.best_ap_macro,
        history=[
            EpochRow(
                epoch=r.epoch,
                train_loss=r.train_loss,
                ap_micro=r.ap_micro,
                ap_macro=r.ap_macro,
                f2_macro=r.f2_macro,
            )
            for r in outcome.history
        ],
        report=outcome.report,
    )


@app.post("/eval", response_model=EvalResponse)
def eval_endpoint(request: EvalRequest) -> EvalResponse:
    outcome = run_eval(
        request.checkpoint,
        request.dataset_dir,
        eval_count=request.eval_count,
        metric_options=request.metrics,
        out_dir=request.out_dir,
    )
    return EvalResponse(
        checkpoint_path=outcome.checkpoint_path,
        dataset_dir=outcome.dataset_dir,
        metrics_path=outcome.metrics_path,
        report=outcome.report,
    )


@app.post("/gradcheck", response_model=GradCheckReport)
def gradcheck_endpoint(request: GradcheckRequest) -> GradCheckReport:
    return run_gradcheck(request.config, seed=request.seed, mode=request.mode)


@app.post("/params", response_model=ParamsResponse)
def params_endpoint(request: ParamsRequest) -> ParamsResponse:
    outcome = run_params(
        request.config, out_dir=request.out_dir, seed=request.seed, mode=request.mode
    )
    return ParamsResponse(
        total=outcome.total,
        by_module=outcome.by_module,
        mode=outcome.mode,
        sweep=(
            [
                SweepRowModel(embed_dim=r.embed_dim, params=r.params, ap_macro=r.ap_macro)
                for r in outcome.sweep
            ]
            if outcome.sweep is not None
            else None
        ),
        sweep_csv_path=outcome.sweep_csv_path,
    )
