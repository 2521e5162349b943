"""HTTP prediction service: a victim checkpoint behind a budget-enforcing API.

This is the deployed-oracle stand-in: clients get class probabilities and
nothing else (no logits, gradients, or parameters). The sample-counted
budget is decremented atomically so concurrent clients can never overspend
it, and rejected requests consume nothing.

Endpoints:
    GET  /v1/health   -> { status, model_name, num_classes, input_shape }
    POST /v1/predict  -> { probs, queries_used, budget_remaining }
                         400 malformed/shape, 413 batch too large,
                         429 budget exhausted { queries_used }
    GET  /v1/stats    -> { queries_used, budget_remaining }
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .errors import BudgetExhaustedError
from .models import Model, load_checkpoint, predict_proba


@dataclass(frozen=True)
class ServiceConfig:
    checkpoint: str
    host: str = "127.0.0.1"
    port: int = 8100
    budget: int | None = None
    max_batch: int = 256
    log_path: str | None = None

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget, when set, must be >= 1")


class PredictRequest(BaseModel):
    inputs: list[list[float]]
    shape: tuple[int, int, int]


class PredictResponse(BaseModel):
    probs: list[list[float]]
    queries_used: int
    budget_remaining: int | None


class HealthResponse(BaseModel):
    status: str
    model_name: str
    num_classes: int
    input_shape: tuple[int, int, int]


class StatsResponse(BaseModel):
    queries_used: int
    budget_remaining: int | None


class BudgetLedger:
    """Sample-counted budget with atomic check-then-charge."""

    def __init__(self, budget: int | None):
        self.budget = budget
        self.used = 0
        self._lock = threading.Lock()

    def charge(self, n: int) -> tuple[int, int | None]:
        with self._lock:
            if self.budget is not None and self.used + n > self.budget:
                raise BudgetExhaustedError(
                    f"budget exhausted: {self.used} of {self.budget} samples served",
                    queries_used=self.used,
                )
            self.used += n
            remaining = None if self.budget is None else self.budget - self.used
            return self.used, remaining

    def snapshot(self) -> tuple[int, int | None]:
        with self._lock:
            remaining = None if self.budget is None else self.budget - self.used
            return self.used, remaining


class QueryLog:
    """Append-only JSONL of served prediction batches."""

    def __init__(self, path: str | None):
        self.path = path
        self._lock = threading.Lock()

    def record(self, batch_size: int, cumulative: int, client: str) -> None:
        if self.path is None:
            return
        line = json.dumps({
            "timestamp": time.time(),
            "batch_size": batch_size,
            "cumulative": cumulative,
            "client": client,
        })
        with self._lock:
            with open(self.path, "a") as f:
                f.write(line + "\n")


def _nine_digits(p: float) -> float:
    # 9 significant decimal digits: enough to reconstruct the float32 exactly.
    return float(f"{p:.8e}")


def create_app(model: Model, *, budget: int | None = None, max_batch: int = 256,
               log_path: str | None = None) -> FastAPI:
    app = FastAPI(title="prediction oracle", docs_url=None, redoc_url=None)
    ledger = BudgetLedger(budget)
    qlog = QueryLog(log_path)
    expected_shape = tuple(model.spec.input_shape)
    row_len = int(np.prod(expected_shape))

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "malformed request"})

    @app.get("/v1/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok",
            model_name=model.spec.name,
            num_classes=model.spec.num_classes,
            input_shape=expected_shape,
        )

    @app.get("/v1/stats", response_model=StatsResponse)
    def stats() -> StatsResponse:
        used, remaining = ledger.snapshot()
        return StatsResponse(queries_used=used, budget_remaining=remaining)

    @app.post("/v1/predict")
    def predict(body: PredictRequest, request: Request):
        if tuple(body.shape) != expected_shape:
            return JSONResponse(status_code=400, content={
                "error": f"shape {list(body.shape)} does not match model input "
                         f"{list(expected_shape)}"})
        n = len(body.inputs)
        if n == 0:
            return JSONResponse(status_code=400, content={"error": "empty batch"})
        if n > max_batch:
            return JSONResponse(status_code=413, content={
                "error": "batch-too-large", "max_batch": max_batch})
        if any(len(row) != row_len for row in body.inputs):
            return JSONResponse(status_code=400, content={
                "error": f"each input must hold {row_len} values"})
        batch = np.asarray(body.inputs, dtype=np.float32).reshape((n,) + expected_shape)
        if not np.all(np.isfinite(batch)):
            return JSONResponse(status_code=400, content={"error": "non-finite input values"})
        try:
            used, remaining = ledger.charge(n)
        except BudgetExhaustedError as e:
            return JSONResponse(status_code=429, content={
                "error": "budget-exhausted", "queries_used": e.queries_used})
        probs = predict_proba(model, batch)
        client = request.headers.get("x-client-id") or (
            request.client.host if request.client else "unknown")
        qlog.record(n, used, client)
        return PredictResponse(
            probs=[[_nine_digits(p) for p in row] for row in probs.tolist()],
            queries_used=used,
            budget_remaining=remaining,
        )

    return app


def serve(config: ServiceConfig) -> None:
    """Load the checkpoint and block serving requests."""
    import uvicorn

    model = load_checkpoint(config.checkpoint)
    app = create_app(model, budget=config.budget, max_batch=config.max_batch,
                     log_path=config.log_path)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
