"""HTTP front end over the run orchestration.

Runs execute synchronously inside the request (desk scale); failures map to
stable error codes: 2 config, 3 dataset, 4 numeric abort, matching the
command-line exit codes.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import ConfigError, RunConfig, load_config
from ..data import DatasetError
from ..runner import (
    run_ablate,
    run_eval,
    run_gen_synthetic,
    run_sweep_lambda,
    run_train,
)
from ..trainer import TrainAbort
from .schemas import (
    AblateRequest,
    AblateResponse,
    AblateRow,
    ConfigPatch,
    EvalRequest,
    EvalResponse,
    HealthResponse,
    SweepRequest,
    SweepResponse,
    SweepRow,
    SyntheticRequest,
    SyntheticResponse,
    TrainRequest,
    TrainResponse,
)

__all__ = ["create_app", "resolve_config"]

_ERROR_CODES = {ConfigError: 2, DatasetError: 3, TrainAbort: 4}
_HTTP_STATUS = {2: 422, 3: 404, 4: 500}


def resolve_config(patch: ConfigPatch) -> RunConfig:
    return load_config(path=patch.config_path, preset=patch.preset,
                       overrides=patch.overrides())


def _guarded(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, DatasetError, TrainAbort) as exc:
        code = _ERROR_CODES[type(exc)]
        raise HTTPException(status_code=_HTTP_STATUS[code],
                            detail={"error": str(exc), "code": code})


def create_app() -> FastAPI:
    app = FastAPI(title="protograph", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/train", response_model=TrainResponse)
    def train_endpoint(req: TrainRequest) -> TrainResponse:
        cfg = _guarded(resolve_config, req.config)
        result = _guarded(run_train, cfg)
        return TrainResponse(**result)

    @app.post("/eval", response_model=EvalResponse)
    def eval_endpoint(req: EvalRequest) -> EvalResponse:
        cfg = _guarded(resolve_config, req.config)
        result = _guarded(run_eval, cfg, req.checkpoint, req.mode)
        return EvalResponse(**result)

    @app.post("/ablate", response_model=AblateResponse)
    def ablate_endpoint(req: AblateRequest) -> AblateResponse:
        cfg = _guarded(resolve_config, req.config)
        result = _guarded(run_ablate, cfg, req.variant)
        return AblateResponse(rows=[AblateRow(**r) for r in result["rows"]],
                              files=result["files"])

    @app.post("/sweep-lambda", response_model=SweepResponse)
    def sweep_endpoint(req: SweepRequest) -> SweepResponse:
        cfg = _guarded(resolve_config, req.config)
        result = _guarded(run_sweep_lambda, cfg, req.lambdas)
        return SweepResponse(rows=[SweepRow(**r) for r in result["rows"]],
                             files=result["files"])

    @app.post("/synthetic", response_model=SyntheticResponse)
    def synthetic_endpoint(req: SyntheticRequest) -> SyntheticResponse:
        cfg = _guarded(resolve_config, req.config)
        result = _guarded(run_gen_synthetic, cfg, req.kind)
        return SyntheticResponse(**result)

    return app


app = create_app()
