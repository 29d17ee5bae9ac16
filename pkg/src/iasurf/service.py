"""FastAPI service wrapping the pipeline.

Endpoints accept a RunConfig and return a RunReport; the CLI is a thin
client of this app (in-process by default). Files are written on the service
side under the config's output directory.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .errors import InputError, NumericalError, ToleranceError
from .pipeline import run, verify_files
from .schemas import RunConfig, RunReport, VerifyReport, VerifyRequest


def create_app() -> FastAPI:
    app = FastAPI(
        title="iasurf",
        description="Isothermally asymptotic surface laboratory",
        version=__version__,
    )

    @app.exception_handler(InputError)
    async def _input_error(request: Request, exc: InputError):
        return JSONResponse(
            status_code=400,
            content={"detail": str(exc), "kind": "input", "exit_code": 2},
        )

    @app.exception_handler(NumericalError)
    async def _numerical_error(request: Request, exc: NumericalError):
        return JSONResponse(
            status_code=500,
            content={"detail": str(exc), "kind": "numerical", "exit_code": 3},
        )

    @app.exception_handler(ToleranceError)
    async def _tolerance_error(request: Request, exc: ToleranceError):
        return JSONResponse(
            status_code=500,
            content={"detail": str(exc), "kind": "tolerance", "exit_code": 1},
        )

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.get("/config/schema")
    def config_schema():
        return RunConfig.model_json_schema()

    def _with_stages(config: RunConfig, **overrides) -> RunConfig:
        data = config.model_dump()
        data["pipeline"].update(overrides)
        return RunConfig.model_validate(data)

    @app.post("/run", response_model=RunReport)
    def run_full(config: RunConfig):
        return run(config)

    @app.post("/generate", response_model=RunReport)
    def generate(config: RunConfig):
        return run(
            _with_stages(
                config,
                backlund=False, dual=False, reparam=None,
                reconstruct=False, lelieuvre=False,
            )
        )

    @app.post("/transform", response_model=RunReport)
    def transform(config: RunConfig):
        return run(_with_stages(config, reconstruct=False, lelieuvre=False))

    @app.post("/reconstruct", response_model=RunReport)
    def reconstruct(config: RunConfig):
        return run(_with_stages(config, reconstruct=True))

    @app.post("/verify", response_model=VerifyReport)
    def verify(req: VerifyRequest):
        return verify_files(req.paths, req.equation, req.tolerance)

    return app


app = create_app()
