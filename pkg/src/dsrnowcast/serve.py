"""HTTP forecast service.

One writer (ingest) rolls a three-frame input buffer, recomputes the three
horizon forecasts and publishes them by swapping a single immutable
:class:`ForecastStore` reference; readers only ever dereference that
reference once per request, so a response never mixes two generations.

Endpoints::

    GET  /v1/point?lat=&lon=&h=   JSON point forecast (nearest pixel)
    GET  /v1/grid/{h}             one-frame DSRG body
    GET  /v1/health               JSON status
    POST /v1/ingest               DSRG body with one or more new frames
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

import numpy as np

from .gridio import (HOUR, GridFormatError, GridFrame, GridSequence, decode_sequence,
                     encode_sequence, latlon_to_pixel)
from .network import N_STEPS, _as_horizon_map, predict_window, save_model

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"NWCS"
DSRG_CONTENT_TYPE = "application/octet-stream"


class ServiceError(Exception):
    status = HTTPStatus.BAD_REQUEST
    code = "bad_request"


class WarmingUp(ServiceError):
    status = HTTPStatus.SERVICE_UNAVAILABLE
    code = "warming_up"


class StaleFrame(ServiceError):
    status = HTTPStatus.CONFLICT
    code = "stale_timestamp"


class OutOfExtent(ServiceError):
    status = HTTPStatus.NOT_FOUND
    code = "out_of_extent"


class NotFound(ServiceError):
    status = HTTPStatus.NOT_FOUND
    code = "not_found"


@dataclass(frozen=True)
class ForecastStore:
    """Immutable snapshot: recent inputs and the forecasts made from them."""

    inputs: tuple = ()
    predictions: tuple = ()
    generated_at: float | None = None
    model_ids: tuple = ()

    @property
    def ready(self) -> bool:
        return len(self.predictions) == N_STEPS

    @property
    def latest(self) -> int | None:
        return self.inputs[-1].timestamp if self.inputs else None


def model_id(model) -> str:
    # the checkpoint ends with its own CRC-32, so a CRC over it would be constant
    digest = hashlib.sha256(_model_bytes(model)).hexdigest()[:12]
    return f"h{model.config.horizon}-{model.config.cell_type}-{digest}"


def _model_bytes(model) -> bytes:
    buf = io.BytesIO()
    save_model(model, buf)
    return buf.getvalue()


class ForecastService:
    """Holds the horizon models and the current :class:`ForecastStore`.

    ``snapshot_path``, when given, receives the store after every publish
    and is reloaded at construction if it exists.
    """

    def __init__(self, models, extent=None, snapshot_path=None, clock=time.time):
        self.models = _as_horizon_map(models)
        self.shape = self.models[1].config.shape
        self.extent = extent
        self.snapshot_path = snapshot_path
        self.clock = clock
        self.model_ids = tuple(model_id(self.models[h]) for h in (1, 2, 3))
        self._write_lock = threading.Lock()
        self._store = ForecastStore(model_ids=self.model_ids)
        if snapshot_path and os.path.exists(snapshot_path):
            self._store = self._load_snapshot(snapshot_path)

    @property
    def store(self) -> ForecastStore:
        return self._store

    # -- writer --------------------------------------------------------

    def ingest_frame(self, frame: GridFrame) -> dict:
        """Append ``frame`` and republish; returns a status dict.

        A frame that does not follow the newest stored one by exactly one
        hour restarts the history, so forecasts are only made from three
        consecutive hours.
        """
        if frame.shape != self.shape:
            raise ServiceError(f"frame shape {frame.shape[0]}x{frame.shape[1]} does not match "
                               f"service grid {self.shape[0]}x{self.shape[1]}")
        if self.extent is not None and tuple(frame.extent) != tuple(self.extent):
            raise ServiceError(f"frame extent {frame.extent} does not match service extent {self.extent}")
        with self._write_lock:
            cur = self._store
            if cur.latest is not None and frame.timestamp <= cur.latest:
                raise StaleFrame(f"timestamp {frame.timestamp} is not newer than stored {cur.latest}")
            if cur.latest is not None and frame.timestamp - cur.latest == HOUR:
                inputs = (cur.inputs + (frame,))[-N_STEPS:]
            else:
                inputs = (frame,)
            if len(inputs) < N_STEPS:
                # forecasts must match the stored inputs, so none until refilled
                self._store = ForecastStore(inputs, (), None, self.model_ids)
                return {"status": "warming up", "frames": len(inputs), "needed": N_STEPS}
            preds = tuple(predict_window(self.models, inputs))
            store = ForecastStore(inputs, preds, float(self.clock()), self.model_ids)
            self._store = store
            if self.snapshot_path:
                self._save_snapshot(store, self.snapshot_path)
        return {"status": "published", "generated_at": store.generated_at, "input_time": frame.timestamp}

    def ingest_bytes(self, body: bytes) -> dict:
        try:
            seq = decode_sequence(body)
        except GridFormatError as exc:
            raise ServiceError(f"invalid DSRG body: {exc}") from None
        result = {}
        for frame in seq.frames:
            result = self.ingest_frame(frame)
        return result

    # -- readers -------------------------------------------------------

    def _ready_store(self, horizon) -> tuple:
        try:
            h = int(horizon)
        except (TypeError, ValueError):
            raise ServiceError(f"horizon must be 1, 2 or 3, got {horizon!r}") from None
        if h not in (1, 2, 3):
            raise ServiceError(f"horizon must be 1, 2 or 3, got {h}")
        store = self._store
        if not store.ready:
            raise WarmingUp(f"warming up: {len(store.inputs)} of {N_STEPS} input frames received")
        return store, h

    def point(self, lat: float, lon: float, horizon) -> dict:
        store, h = self._ready_store(horizon)
        frame = store.predictions[h - 1]
        try:
            row, col = latlon_to_pixel(lat, lon, frame.shape, frame.extent)
        except ValueError:
            raise OutOfExtent(f"({lat}, {lon}) is outside the grid extent {frame.extent}") from None
        v = float(frame.values[row, col])
        return {
            "dsr_wm2": v if np.isfinite(v) else None,
            "valid_time": frame.timestamp,
            "generated_at": store.generated_at,
            "horizon": h,
            "row": row,
            "col": col,
        }

    def grid(self, horizon) -> bytes:
        store, h = self._ready_store(horizon)
        return encode_sequence(GridSequence((store.predictions[h - 1],)))

    def health(self) -> dict:
        store = self._store
        return {
            "status": "ok" if store.ready else "warming up",
            "frames": len(store.inputs),
            "latest_input": store.latest,
            "generated_at": store.generated_at,
            "models": list(store.model_ids),
            "grid": list(self.shape),
        }

    # -- snapshot ------------------------------------------------------
    # "NWCS" | u32 json length | json | DSRG inputs | DSRG predictions

    def _save_snapshot(self, store: ForecastStore, path):
        ins = encode_sequence(GridSequence(store.inputs))
        outs = encode_sequence(GridSequence(store.predictions))
        head = json.dumps({"generated_at": store.generated_at, "model_ids": list(store.model_ids),
                           "inputs_len": len(ins), "predictions_len": len(outs)}).encode()
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC + struct.pack("<I", len(head)) + head + ins + outs)
        os.replace(tmp, path)

    def _load_snapshot(self, path) -> ForecastStore:
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != SNAPSHOT_MAGIC:
            raise ServiceError(f"{path}: not a forecast snapshot (bad magic)")
        (hlen,) = struct.unpack_from("<I", data, 4)
        head = json.loads(data[8:8 + hlen])
        off = 8 + hlen
        ins = decode_sequence(data[off:off + head["inputs_len"]])
        off += head["inputs_len"]
        outs = decode_sequence(data[off:off + head["predictions_len"]])
        if ins[0].shape != self.shape:
            raise ServiceError(f"{path}: snapshot grid {ins[0].shape} does not match models {self.shape}")
        if tuple(head["model_ids"]) != self.model_ids:
            log.warning("snapshot was produced by different models; recomputing forecasts")
            return ForecastStore(ins.frames, tuple(predict_window(self.models, ins.frames)),
                                 float(self.clock()), self.model_ids)
        return ForecastStore(ins.frames, outs.frames, head["generated_at"], self.model_ids)


# ---------------------------------------------------------------------------
# HTTP


class _Handler(BaseHTTPRequestHandler):
    service: ForecastService = None
    protocol_version = "HTTP/1.1"
    max_body = 1 << 30

    def log_message(self, fmt, *args):
        log.info("%s %s", self.address_string(), fmt % args)

    def _send(self, status, body: bytes, ctype: str):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status, obj):
        self._send(status, json.dumps(obj).encode(), "application/json")

    def _error(self, exc: ServiceError):
        self._json(exc.status, {"error": exc.code, "detail": str(exc)})

    def do_GET(self):
        url = urlsplit(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if parts == ["v1", "health"]:
                return self._json(HTTPStatus.OK, self.service.health())
            if parts == ["v1", "point"]:
                q = parse_qs(url.query)
                try:
                    lat, lon = float(q["lat"][0]), float(q["lon"][0])
                except (KeyError, ValueError):
                    raise ServiceError("point needs numeric lat and lon query parameters") from None
                return self._json(HTTPStatus.OK, self.service.point(lat, lon, q.get("h", ["1"])[0]))
            if len(parts) == 3 and parts[:2] == ["v1", "grid"]:
                return self._send(HTTPStatus.OK, self.service.grid(parts[2]), DSRG_CONTENT_TYPE)
            raise NotFound(f"no route for GET {url.path}")
        except ServiceError as exc:
            self._error(exc)

    def do_POST(self):
        try:
            if urlsplit(self.path).path.rstrip("/") != "/v1/ingest":
                raise NotFound(f"no route for POST {self.path}")
            n = int(self.headers.get("Content-Length", 0))
            if n <= 0 or n > self.max_body:
                raise ServiceError("ingest needs a DSRG body with a Content-Length")
            body = self.rfile.read(n)
            result = self.service.ingest_bytes(body)
            self._json(HTTPStatus.ACCEPTED if result.get("status") == "warming up" else HTTPStatus.OK, result)
        except ServiceError as exc:
            self._error(exc)


def make_server(service: ForecastService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    """Bound (not yet serving) threaded HTTP server for ``service``."""
    handler = type("Handler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server
