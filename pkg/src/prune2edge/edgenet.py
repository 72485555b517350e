"""Master/worker inference over TCP.

Frames are single-line JSON objects terminated by ``\\n``.  A session starts
with a ``hello`` exchange (protocol version, dataset fingerprint, hosted
models).  The master then sends ``predict`` frames carrying sample indices
into the shared dataset split.  The worker answers with a ``result`` frame
(one node-level vote per sample) followed by a ``metrics`` frame with
per-model timings.  Every rejected frame gets an ``error`` frame back; the
connection stays usable unless the frame was oversized.

Only indices and class ids cross the wire; every node holds a full copy of
the dataset.
"""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nncore, store, voter
from .errors import (BadIndexError, ConfigError, NodeTimeoutError, ProtocolError,
                     Prune2EdgeError, ShardMismatchError)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 1 << 20
DEFAULT_TIMEOUT = 30.0
CLIENT_TYPES = ("hello", "predict", "bye")
SERVER_TYPES = ("hello", "result", "metrics", "error", "bye")


# -- framing -------------------------------------------------------------------

def encode_frame(frame: dict) -> bytes:
    return json.dumps(frame, separators=(",", ":"), allow_nan=False).encode() + b"\n"


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_request_id(v) -> bool:
    return isinstance(v, str) or _is_int(v)


def _require(cond, message):
    if not cond:
        raise ProtocolError(message)


def decode_frame(line: bytes, allowed=CLIENT_TYPES + SERVER_TYPES) -> dict:
    """Parse and schema-check one frame; raises :class:`ProtocolError`."""
    try:
        frame = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise ProtocolError(f"undecodable frame: {exc}") from None
    _require(isinstance(frame, dict), "frame is not a JSON object")
    kind = frame.get("type")
    _require(isinstance(kind, str) and kind in allowed, f"unexpected frame type {kind!r}")

    if kind == "hello":
        _require(_is_int(frame.get("protocol_version")), "hello needs an integer protocol_version")
        if "model_ids" in frame:
            _require(isinstance(frame["model_ids"], list), "model_ids must be a list")
        for key in ("dataset_fingerprint", "split"):
            if key in frame:
                _require(isinstance(frame[key], str), f"{key} must be a string")
        if "node_id" in frame:
            _require(_is_request_id(frame["node_id"]), "node_id must be a string or integer")
        for key, low in (("n_samples", 0), ("n_classes", 1)):
            if key in frame:
                _require(_is_int(frame[key]) and frame[key] >= low, f"{key} must be an integer >= {low}")
    elif kind == "predict":
        _require(_is_request_id(frame.get("request_id")), "predict needs a request_id")
        idx = frame.get("sample_indices")
        _require(isinstance(idx, list) and all(_is_int(i) for i in idx),
                 "sample_indices must be a list of integers")
    elif kind == "result":
        _require(_is_request_id(frame.get("request_id")), "result needs a request_id")
        preds = frame.get("predicted_classes")
        _require(isinstance(preds, list) and all(_is_int(p) and p >= 0 for p in preds),
                 "predicted_classes must be a list of non-negative integers")
        lat = frame.get("node_latency_ms")
        _require(isinstance(lat, (int, float)) and not isinstance(lat, bool) and lat >= 0,
                 "node_latency_ms must be a non-negative number")
    elif kind == "metrics":
        _require(_is_request_id(frame.get("request_id")), "metrics needs a request_id")
        _require(isinstance(frame.get("per_model_ms"), dict), "per_model_ms must be an object")
    elif kind == "error":
        _require(isinstance(frame.get("code"), str), "error needs a code")
        _require(isinstance(frame.get("message", ""), str), "error message must be a string")
    return frame


def error_frame(code: str, message: str, request_id=None) -> dict:
    frame = {"type": "error", "code": code, "message": message}
    if request_id is not None:
        frame["request_id"] = request_id
    return frame


# -- worker --------------------------------------------------------------------

@dataclass
class NodeConfig:
    node_id: str
    models: list[str]
    dataset: str
    listen: str = "127.0.0.1:0"
    split: str = "test"
    max_batch: int = 100_000
    model_ids: list | None = None

    @classmethod
    def from_file(cls, path) -> "NodeConfig":
        path = Path(path)
        doc = store.read_json(path)
        try:
            cfg = cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.parent
        cfg.models = [str(base / m) for m in cfg.models]
        cfg.dataset = str(base / cfg.dataset)
        return cfg

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "models": self.models, "dataset": self.dataset,
                "listen": self.listen, "split": self.split, "max_batch": self.max_batch,
                "model_ids": self.model_ids}


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"address must be host:port, got {text!r}")
    return host, int(port)


class _WorkerHandler(socketserver.StreamRequestHandler):
    server: "WorkerServer"

    def setup(self):
        super().setup()
        # result and metrics go out as two small writes; don't let Nagle hold the second
        self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, frame: dict) -> None:
        self.wfile.write(encode_frame(frame))
        self.wfile.flush()

    def handle(self):
        greeted = False
        while True:
            try:
                line = self.rfile.readline(MAX_FRAME_BYTES + 1)
            except (OSError, ValueError):
                return
            if not line:
                return
            if len(line) > MAX_FRAME_BYTES:
                self._safe_send(error_frame("E_PROTOCOL", "frame too large"))
                return
            if not line.strip():
                continue
            request_id = None
            try:
                frame = decode_frame(line, allowed=CLIENT_TYPES)
                request_id = frame.get("request_id")
                kind = frame["type"]
                if kind == "bye":
                    self._safe_send({"type": "bye"})
                    return
                if kind == "hello":
                    if frame["protocol_version"] != PROTOCOL_VERSION:
                        raise ProtocolError(f"unsupported protocol_version {frame['protocol_version']}")
                    self.send(self.server.hello_frame())
                    greeted = True
                    continue
                if not greeted:
                    raise ProtocolError("predict before hello")
                result, metrics = self.server.predict(request_id, frame["sample_indices"])
                self.send(result)
                self.send(metrics)
            except Prune2EdgeError as exc:
                if not self._safe_send(error_frame(exc.code, str(exc), request_id)):
                    return
            except (OSError, ValueError):
                return
            except Exception as exc:  # keep serving other frames no matter what
                log.exception("worker failure")
                if not self._safe_send(error_frame("E_INTERNAL", repr(exc), request_id)):
                    return

    def _safe_send(self, frame) -> bool:
        try:
            self.send(frame)
            return True
        except (OSError, ValueError):
            return False


class WorkerServer(socketserver.ThreadingTCPServer):
    """Hosts a set of models and votes over them per sample."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, config: NodeConfig):
        if not config.models:
            raise ConfigError("a worker needs at least one model")
        self.config = config
        self.models = [store.load_model(p) for p in config.models]
        if len({m.n_classes for m in self.models}) != 1:
            raise ConfigError("hosted models disagree on class count")
        dataset = store.load_dataset(config.dataset)
        self.fingerprint = dataset.fingerprint()
        self.features, self.labels = dataset.split(config.split)
        self.model_ids = config.model_ids or [Path(p).stem for p in config.models]
        super().__init__(parse_address(config.listen), _WorkerHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def hello_frame(self) -> dict:
        return {"type": "hello", "protocol_version": PROTOCOL_VERSION, "node_id": self.config.node_id,
                "model_ids": self.model_ids, "dataset_fingerprint": self.fingerprint,
                "split": self.config.split, "n_samples": int(len(self.labels)),
                "n_classes": self.models[0].n_classes}

    def predict(self, request_id, indices: list[int]):
        if len(indices) > self.config.max_batch:
            raise ProtocolError(f"batch of {len(indices)} exceeds max_batch {self.config.max_batch}")
        n = len(self.labels)
        bad = [i for i in indices if not 0 <= i < n]
        if bad:
            raise BadIndexError(f"sample index {bad[0]} outside [0, {n})")
        start = time.perf_counter()
        x = self.features[np.asarray(indices, dtype=np.int64)]
        outputs, per_model = [], {}
        for mid, model in zip(self.model_ids, self.models):
            t0 = time.perf_counter()
            outputs.append(nncore.forward(model, x) if len(x) else np.zeros((0, model.n_classes)))
            per_model[str(mid)] = (time.perf_counter() - t0) * 1e3
        preds = voter.vote_batch(outputs) if len(x) else np.zeros(0, dtype=np.int64)
        latency = (time.perf_counter() - start) * 1e3
        result = {"type": "result", "request_id": request_id,
                  "predicted_classes": [int(p) for p in preds], "node_latency_ms": latency}
        metrics = {"type": "metrics", "request_id": request_id, "per_model_ms": per_model}
        return result, metrics


def serve_worker(config: NodeConfig) -> WorkerServer:
    """Bind a worker; call ``serve_forever()`` on the result to run it."""
    return WorkerServer(config)


def start_worker(config: NodeConfig) -> WorkerServer:
    """Bind a worker and serve it from a daemon thread."""
    server = serve_worker(config)
    threading.Thread(target=server.serve_forever, daemon=True, name=f"worker-{config.node_id}").start()
    return server


# -- master --------------------------------------------------------------------

class NodeClient:
    def __init__(self, address: str, timeout: float = DEFAULT_TIMEOUT):
        self.address = address
        self.timeout = timeout
        try:
            self.sock = socket.create_connection(parse_address(address), timeout=timeout)
        except socket.timeout as exc:
            raise NodeTimeoutError(f"{address}: connect timed out") from exc
        except OSError as exc:
            raise NodeTimeoutError(f"{address}: unreachable ({exc})") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.file = self.sock.makefile("rwb")
        self.info: dict = {}

    def send(self, frame: dict) -> None:
        try:
            self.file.write(encode_frame(frame))
            self.file.flush()
        except socket.timeout as exc:
            raise NodeTimeoutError(f"{self.address}: send timed out") from exc
        except OSError as exc:
            raise ProtocolError(f"{self.address}: connection lost ({exc})") from exc

    def receive(self) -> dict:
        try:
            line = self.file.readline(MAX_FRAME_BYTES + 1)
        except socket.timeout as exc:
            raise NodeTimeoutError(f"{self.address}: no reply within {self.timeout}s") from exc
        except OSError as exc:
            raise ProtocolError(f"{self.address}: connection lost ({exc})") from exc
        if not line:
            raise ProtocolError(f"{self.address}: connection closed")
        if len(line) > MAX_FRAME_BYTES or not line.endswith(b"\n"):
            raise ProtocolError(f"{self.address}: oversized or unterminated frame")
        try:
            frame = decode_frame(line, allowed=SERVER_TYPES)
        except ProtocolError as exc:
            raise ProtocolError(f"{self.address}: {exc}") from None
        if frame["type"] == "error":
            raise ProtocolError(f"{self.address}: node error {frame['code']}: {frame.get('message', '')}")
        return frame

    def hello(self) -> dict:
        self.send({"type": "hello", "protocol_version": PROTOCOL_VERSION})
        frame = self.receive()
        if frame["type"] != "hello":
            raise ProtocolError(f"{self.address}: expected hello, got {frame['type']}")
        if frame["protocol_version"] != PROTOCOL_VERSION:
            raise ProtocolError(f"{self.address}: protocol_version {frame['protocol_version']}")
        for key in ("dataset_fingerprint", "n_samples", "n_classes", "node_id", "split"):
            if key not in frame:
                raise ProtocolError(f"{self.address}: hello missing {key}")
        self.info = frame
        return frame

    def predict(self, request_id, indices) -> tuple[dict, dict, float]:
        start = time.perf_counter()
        self.send({"type": "predict", "request_id": request_id, "sample_indices": list(indices)})
        result = self.receive()
        if result["type"] != "result" or result["request_id"] != request_id:
            raise ProtocolError(f"{self.address}: expected result for {request_id!r}")
        if len(result["predicted_classes"]) != len(indices):
            raise ProtocolError(f"{self.address}: wrong number of predictions")
        if any(p >= self.info["n_classes"] for p in result["predicted_classes"]):
            raise ProtocolError(f"{self.address}: predicted class outside [0, {self.info['n_classes']})")
        roundtrip = (time.perf_counter() - start) * 1e3
        metrics = self.receive()
        if metrics["type"] != "metrics" or metrics["request_id"] != request_id:
            raise ProtocolError(f"{self.address}: expected metrics for {request_id!r}")
        return result, metrics, roundtrip

    def close(self) -> None:
        try:
            self.send({"type": "bye"})
        except Exception:
            pass
        for closer in (self.file.close, self.sock.close):
            try:
                closer()
            except OSError:
                pass


@dataclass
class MasterReport:
    n_samples: int
    predictions: list[int]
    node_predictions: dict[str, list[int]]
    node_latency_ms: dict[str, float]
    node_roundtrip_ms: dict[str, float]
    per_model_ms: dict[str, dict[str, float]]
    end_to_end_ms: float
    accuracy: float | None = None
    node_accuracy: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_master(node_addresses, n_samples: int, *, dataset: store.Dataset | None = None,
               split: str = "test", timeout: float = DEFAULT_TIMEOUT) -> MasterReport:
    """Ask every node for samples ``[0, n_samples)`` and combine node votes per sample.

    With ``dataset`` the master checks shard fingerprints against its own
    copy and scores the final predictions against the split labels.
    """
    if not node_addresses:
        raise ConfigError("no worker nodes given")
    if n_samples < 0:
        raise ConfigError("n_samples must be >= 0")
    clients = []
    try:
        for addr in node_addresses:
            clients.append(NodeClient(addr, timeout))
            clients[-1].hello()
        prints = {c.info["dataset_fingerprint"] for c in clients}
        if dataset is not None:
            prints.add(dataset.fingerprint())
        if len(prints) != 1 or len({c.info.get("split") for c in clients}) != 1:
            raise ShardMismatchError("nodes do not share the same dataset shard")
        if dataset is not None and clients[0].info.get("split") != split:
            raise ShardMismatchError(f"nodes serve split {clients[0].info.get('split')!r}, master expects {split!r}")
        n_available = min(int(c.info["n_samples"]) for c in clients)
        if n_samples > n_available:
            raise ConfigError(f"requested {n_samples} samples but nodes hold {n_available}")

        indices = list(range(n_samples))
        start = time.perf_counter()
        with ThreadPoolExecutor(len(clients)) as pool:
            futures = [pool.submit(c.predict, f"req-{i}", indices) for i, c in enumerate(clients)]
            replies = [f.result() for f in futures]
        end_to_end = (time.perf_counter() - start) * 1e3
    finally:
        for c in clients:
            c.close()

    n_classes = max(c.info["n_classes"] for c in clients)
    node_preds = [np.asarray(r[0]["predicted_classes"], dtype=np.int64) for r in replies]
    if n_samples:
        final = voter.vote_batch([nncore.one_hot(p, n_classes) for p in node_preds])
    else:
        final = np.zeros(0, dtype=np.int64)
    names = [str(c.info["node_id"]) for c in clients]
    report = MasterReport(
        n_samples=n_samples,
        predictions=[int(p) for p in final],
        node_predictions={n: [int(p) for p in preds] for n, preds in zip(names, node_preds)},
        node_latency_ms={n: float(r[0]["node_latency_ms"]) for n, r in zip(names, replies)},
        node_roundtrip_ms={n: r[2] for n, r in zip(names, replies)},
        per_model_ms={n: r[1]["per_model_ms"] for n, r in zip(names, replies)},
        end_to_end_ms=end_to_end,
    )
    if dataset is not None and n_samples:
        _, labels = dataset.split(split)
        truth = labels[:n_samples]
        report.accuracy = float(np.mean(final == truth))
        report.node_accuracy = {n: float(np.mean(p == truth)) for n, p in zip(names, node_preds)}
    return report
