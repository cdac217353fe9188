"""FastAPI service over the attention-flow engine.

All requests reference server-local paths; the heavy lifting happens in
`naflow.pipeline`. Engine errors surface as a 400 response carrying the
exception class name in `error_kind` so clients can map them to exit codes.
"""
from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import pipeline
from .errors import NaflowError

app = FastAPI(title="naflow", description="Neuron-abandoning attention flow engine")


class RunRequest(BaseModel):
    model_dir: str
    image: str
    target_class: int | None = None


class RunResponse(BaseModel):
    kind: str
    predicted_class: int | None = None
    score: float | None = None
    scores: list[float] | None = None
    feature: list[float] | None = None


class FlowRequest(BaseModel):
    model_dir: str
    image: str
    out_dir: str
    target_class: int | None = None
    support_path: str | None = None
    columns: int = Field(default=4, ge=1)


class FlowResponse(BaseModel):
    layers: int
    seed: str
    files: list[str]
    out_dir: str


class VerifyRequest(BaseModel):
    model_dir: str
    seed: int = 42


class CheckReport(BaseModel):
    name: str
    passed: bool
    residual: float
    detail: str = ""


class VerifyResponse(BaseModel):
    passed: bool
    checks: list[CheckReport]


class CountRequest(BaseModel):
    model_dir: str
    image: str
    layer: int


class CountResponse(BaseModel):
    layer: int
    kind: str
    total: int
    decision: int
    abandoned: int
    distinct: int


@app.exception_handler(NaflowError)
async def naflow_error_handler(_request: Request, exc: NaflowError) -> JSONResponse:
    return JSONResponse(
        status_code=400,
        content={"error_kind": type(exc).__name__, "message": str(exc)},
    )


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/run", response_model=RunResponse)
def run(req: RunRequest) -> RunResponse:
    return RunResponse(**pipeline.run_predict(req.model_dir, req.image, req.target_class))


@app.post("/flow", response_model=FlowResponse)
def flow(req: FlowRequest) -> FlowResponse:
    return FlowResponse(
        **pipeline.run_flow(
            req.model_dir,
            req.image,
            req.out_dir,
            target=req.target_class,
            support_path=req.support_path,
            columns=req.columns,
        )
    )


@app.post("/verify", response_model=VerifyResponse)
def verify(req: VerifyRequest) -> VerifyResponse:
    return VerifyResponse(**pipeline.run_verify(req.model_dir, req.seed))


@app.post("/count", response_model=CountResponse)
def count(req: CountRequest) -> CountResponse:
    return CountResponse(**pipeline.run_count(req.model_dir, req.image, req.layer))
