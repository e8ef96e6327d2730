"""Latency measurement over a socket, plus a mock device server.

Frames are single-line JSON objects terminated by ``\\n``.

Request::

    {"type": "measure", "repeats": R,
     "layers": [{"id", "kind", "in", "out", "kernel", "stride", "spatial",
                 "mode", "b_a", "b_w"}, ...]}

Responses::

    {"type": "result", "latency_ms": x, "std_ms": y}
    {"type": "error", "message": m}

``latency_ms`` is the median over the ``R`` repetitions.
"""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import statistics
import threading
import time

import numpy as np

from ..compress.policy import DiscretePolicy, validate_policy
from ..model.graph import ModelGraph
from .device import DeviceProfile, latency_from_specs, layer_specs

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
FAULT_MODES = (None, "disconnect", "malformed", "stall")


class MeasurementError(RuntimeError):
    """A latency measurement failed; the episode may be retried."""


class MeasurementConnectionError(MeasurementError):
    pass


class MeasurementProtocolError(MeasurementError):
    pass


class MeasurementTimeoutError(MeasurementError):
    pass


def encode(obj: dict) -> bytes:
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode()


class RemoteLatencyClient:
    """Client for one measurement endpoint; requests on a connection are serialized."""

    def __init__(self, host: str, port: int, timeout: float = 10.0, repeats: int = 10):
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        self.host, self.port, self.timeout, self.repeats = host, port, timeout, repeats
        self._sock: socket.socket | None = None
        self._reader = None
        self._lock = threading.Lock()

    def _connect(self) -> None:
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except socket.timeout as exc:
            raise MeasurementTimeoutError(f"connecting to {self.host}:{self.port} timed out") from exc
        except OSError as exc:
            raise MeasurementConnectionError(f"cannot reach {self.host}:{self.port}: {exc}") from exc
        self._reader = self._sock.makefile("rb")

    def close(self) -> None:
        if self._reader is not None:
            self._reader.close()
        if self._sock is not None:
            self._sock.close()
        self._sock = self._reader = None

    def __enter__(self) -> RemoteLatencyClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def request(self, frame: dict) -> dict:
        with self._lock:
            if self._sock is None:
                self._connect()
            try:
                self._sock.sendall(encode(frame))
                line = self._reader.readline(MAX_FRAME)
            except socket.timeout as exc:
                self.close()
                raise MeasurementTimeoutError("measurement timed out") from exc
            except OSError as exc:
                self.close()
                raise MeasurementConnectionError(f"connection lost: {exc}") from exc
            if not line:
                self.close()
                raise MeasurementConnectionError("server closed the connection")
        try:
            reply = json.loads(line)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MeasurementProtocolError(f"malformed frame {line[:80]!r}") from exc
        if not isinstance(reply, dict) or "type" not in reply:
            raise MeasurementProtocolError(f"frame without type: {line[:80]!r}")
        return reply

    def measure_specs(self, specs: list[dict], repeats: int | None = None) -> float:
        reply = self.request({"type": "measure", "layers": specs, "repeats": repeats or self.repeats})
        if reply["type"] == "error":
            raise MeasurementProtocolError(f"server error: {reply.get('message')}")
        if reply["type"] != "result":
            raise MeasurementProtocolError(f"unexpected frame type {reply['type']!r}")
        try:
            value = float(reply["latency_ms"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MeasurementProtocolError("result frame without a latency") from exc
        if not np.isfinite(value) or value <= 0:
            raise MeasurementProtocolError(f"implausible latency {value}")
        return value


def remote_latency(
    graph: ModelGraph,
    policy: DiscretePolicy,
    client: RemoteLatencyClient,
    repeats: int | None = None,
) -> float:
    validate_policy(graph, policy)
    return client.measure_specs(layer_specs(graph, policy), repeats)


# ---------------------------------------------------------------------------
# mock server


def handle_frame(line: bytes, profile: DeviceProfile, jitter: float, rng: np.random.Generator) -> dict:
    try:
        req = json.loads(line)
    except (UnicodeDecodeError, json.JSONDecodeError):
        return {"type": "error", "message": "malformed frame"}
    if not isinstance(req, dict) or req.get("type") != "measure":
        return {"type": "error", "message": "expected a measure request"}
    try:
        repeats = int(req.get("repeats", 1))
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        base = latency_from_specs(req["layers"], profile)
    except (KeyError, TypeError, ValueError) as exc:
        return {"type": "error", "message": f"bad request: {exc}"}
    if jitter > 0:
        samples = list(base * (1.0 + jitter * np.abs(rng.standard_normal(repeats))))
    else:
        samples = [base] * repeats
    std = statistics.pstdev(samples) if repeats > 1 else 0.0
    return {"type": "result", "latency_ms": statistics.median(samples), "std_ms": std}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        srv: MockMeasurementServer = self.server.owner  # type: ignore[attr-defined]
        while True:
            try:
                line = self.rfile.readline(MAX_FRAME)
            except OSError:
                return
            if not line:
                return
            if not line.strip():
                continue
            fault = srv.fault
            if fault == "disconnect":
                return
            if fault == "malformed":
                self.wfile.write(b"{not json\n")
                continue
            if fault == "stall":
                srv.release.wait(srv.stall_seconds)
                return
            with srv.rng_lock:
                reply = handle_frame(line, srv.profile, srv.jitter, srv.rng)
            try:
                self.wfile.write(encode(reply))
            except OSError:
                return


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class MockMeasurementServer:
    """Serves the measurement protocol from a :class:`DeviceProfile`.

    ``fault`` injects failures for testing: ``disconnect`` drops the
    connection on a request, ``malformed`` answers with a broken frame and
    ``stall`` never answers.
    """

    def __init__(
        self,
        profile: DeviceProfile | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        fault: str | None = None,
        jitter: float = 0.0,
        seed: int = 0,
        stall_seconds: float = 30.0,
    ):
        if fault not in FAULT_MODES:
            raise ValueError(f"unknown fault mode {fault!r}")
        self.profile = profile or DeviceProfile()
        self.fault = fault
        self.jitter = jitter
        self.rng = np.random.default_rng(seed)
        self.rng_lock = threading.Lock()
        self.stall_seconds = stall_seconds
        self.release = threading.Event()
        self._server = _TCPServer((host, port), _Handler)
        self._server.owner = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> MockMeasurementServer:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        log.info("mock measurement server on %s:%d", *self.address)
        self._server.serve_forever()

    def stop(self) -> None:
        self.release.set()
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> MockMeasurementServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def wait_for_port(host: str, port: int, timeout: float = 5.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            socket.create_connection((host, port), timeout=0.5).close()
            return
        except OSError:
            if time.monotonic() > deadline:
                raise MeasurementConnectionError(f"{host}:{port} did not come up")
            time.sleep(0.05)
