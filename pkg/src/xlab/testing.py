"""Helpers for running the prediction service inside the current process.

Used by the experiment runner's http oracle mode and by integration tests:
binds an ephemeral loopback port, serves until the context exits.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager

import uvicorn

from .errors import ExperimentError
from .models import Model
from .service import create_app


@contextmanager
def spawned_service(model: Model, *, budget: int | None = None, max_batch: int = 256,
                    log_path: str | None = None, startup_timeout: float = 10.0):
    """Serve `model` over loopback HTTP; yields the base URL."""
    app = create_app(model, budget=budget, max_batch=max_batch, log_path=log_path)
    config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + startup_timeout
    while not server.started:
        if time.monotonic() > deadline or not thread.is_alive():
            raise ExperimentError("prediction service failed to start")
        time.sleep(0.01)
    try:
        port = server.servers[0].sockets[0].getsockname()[1]
        yield f"http://127.0.0.1:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout=5.0)
