"""HTTP client implementing the Oracle interface against a remote service.

The client is the adversary's only channel to a deployed victim: it sends
flattened input batches and gets probability rows back. Budget refusals map
to BudgetExhaustedError so extraction code treats local and remote oracles
identically.
"""

from __future__ import annotations

import numpy as np

from .errors import BudgetExhaustedError, OracleTransportError

try:
    import httpx
except ImportError:  # pragma: no cover
    httpx = None


class RemoteOracle:
    """Oracle backed by the /v1 prediction API."""

    def __init__(self, base_url: str, client_id: str | None = None, timeout: float = 60.0):
        if httpx is None:
            raise OracleTransportError("httpx is required for remote oracles")
        self.base_url = base_url.rstrip("/")
        self.name = self.base_url
        headers = {"x-client-id": client_id} if client_id else {}
        self._http = httpx.Client(base_url=self.base_url, timeout=timeout, headers=headers)
        self._shape: tuple[int, int, int] | None = None

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def health(self) -> dict:
        try:
            resp = self._http.get("/v1/health")
        except httpx.HTTPError as e:
            raise OracleTransportError(f"health request failed: {e}") from e
        if resp.status_code != 200:
            raise OracleTransportError(f"health returned {resp.status_code}")
        info = resp.json()
        self._shape = tuple(info["input_shape"])
        return info

    def stats(self) -> dict:
        try:
            resp = self._http.get("/v1/stats")
        except httpx.HTTPError as e:
            raise OracleTransportError(f"stats request failed: {e}") from e
        if resp.status_code != 200:
            raise OracleTransportError(f"stats returned {resp.status_code}")
        return resp.json()

    def query(self, inputs: np.ndarray) -> np.ndarray:
        batch = np.asarray(inputs, dtype=np.float32)
        if batch.ndim != 4:
            raise OracleTransportError(f"expected NxCxHxW batch, got shape {batch.shape}")
        shape = batch.shape[1:]
        payload = {
            "inputs": batch.reshape(len(batch), -1).tolist(),
            "shape": list(shape),
        }
        try:
            resp = self._http.post("/v1/predict", json=payload)
        except httpx.HTTPError as e:
            raise OracleTransportError(f"predict request failed: {e}") from e
        if resp.status_code == 429:
            body = _safe_json(resp)
            raise BudgetExhaustedError(
                "oracle budget exhausted",
                queries_used=body.get("queries_used"),
            )
        if resp.status_code != 200:
            raise OracleTransportError(
                f"predict returned {resp.status_code}: {resp.text[:200]}"
            )
        body = _safe_json(resp)
        if "probs" not in body:
            raise OracleTransportError("malformed response: missing 'probs'")
        probs = np.asarray(body["probs"], dtype=np.float32)
        if probs.ndim != 2 or len(probs) != len(batch):
            raise OracleTransportError(
                f"malformed response: expected {len(batch)} probability rows, "
                f"got array of shape {probs.shape}"
            )
        return probs


def _safe_json(resp) -> dict:
    try:
        return resp.json()
    except ValueError as e:
        raise OracleTransportError(f"malformed response body: {e}") from e
