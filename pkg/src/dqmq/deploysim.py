"""In-process simulation of edge/server model updates under input-quality drift.

The edge watches a rolling mean of batch sharpness scores.  When it drifts
more than ``tau`` (relative) from the calibrated value it asks for a new
bit assignment: skeleton deployments send a request over the wire and swap
in the server's quantized checkpoint; partial deployments run their own
policy and quantizer; full deployments decide per batch and never ask.

Messages are length-prefixed JSON (4-byte big-endian length, UTF-8 body with
sorted keys) carrying an explicit protocol version.  Checkpoints travel
base64-encoded together with their SHA-256.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import from_bytes, to_bytes
from .dataquality import LEVELS, RAW, Dataset, apply_level, batch_quality, nearest_level
from .errors import ConfigError, ProtocolError
from .model import Model, check_actions, forward, quantized_weights
from .policy import Decider, Policy
from .rng import Rng

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MODES = ("full", "partial", "skeleton")
_LEN = struct.Struct(">I")


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------


def encode_message(msg: dict) -> bytes:
    body = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(body)) + body


def decode_message(blob: bytes, expect: Optional[str] = None) -> dict:
    if len(blob) < _LEN.size:
        raise ProtocolError("message shorter than its length prefix")
    (n,) = _LEN.unpack_from(blob)
    if len(blob) != _LEN.size + n:
        raise ProtocolError(f"length prefix says {n} bytes, got {len(blob) - _LEN.size}")
    try:
        msg = json.loads(blob[_LEN.size:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed message body: {e}") from e
    if not isinstance(msg, dict) or msg.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version {msg.get('version') if isinstance(msg, dict) else None!r} "
                            f"!= {PROTOCOL_VERSION}")
    if expect is not None and msg.get("type") != expect:
        raise ProtocolError(f"expected a {expect} message, got {msg.get('type')!r}")
    return msg


def model_request(device_id: str, score: float, level: int, seq: int) -> dict:
    return {"type": "request", "version": PROTOCOL_VERSION, "device_id": device_id,
            "quality_score": float(score), "level_estimate": int(level), "seq": int(seq)}


class Wire:
    """Lossless FIFO channel of serialized messages, one queue per direction."""

    def __init__(self):
        self.to_server = deque()
        self.to_edge = deque()
        self.bytes_sent = 0

    def send(self, queue: deque, blob: bytes) -> None:
        self.bytes_sent += len(blob)
        queue.append(blob)


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------


class Server:
    """Holds the trained masters and policy plus raw reference samples."""

    def __init__(self, model: Model, policy: Policy, reference: Dataset, batch_size: int = 128):
        self.model, self.policy = model, policy
        raw = reference.at_level(RAW) if np.any(reference.levels == RAW) else reference
        self.reference = raw.head(batch_size)
        self.level_scores = {lvl: batch_quality(apply_level(self.reference.images, lvl)) for lvl in LEVELS}

    def decide(self, level: int) -> list:
        x = apply_level(self.reference.images, level)
        with T.no_grad():
            d = Decider(self.policy, "mode")
            forward(self.model, x, d)
        pools = [self.policy.pool_for(i) for i in range(len(self.model.quantizable))]
        return check_actions(self.model, d.action_list(), pools)

    def package(self, actions) -> bytes:
        qw = quantized_weights(self.model, actions)
        m = self.model.copy()
        for name, arr in qw.items():
            m.weights[name].data = arr
        return to_bytes(m, actions, metadata={"quantized": True})

    def serve_request(self, blob: bytes) -> bytes:
        req = decode_message(blob, "request")
        level = req.get("level_estimate")
        if level not in LEVELS:
            fallback = nearest_level(float(req["quality_score"]), self.level_scores)
            logger.warning("unknown quality level %r; using nearest level %d", level, fallback)
            level = fallback
        actions = self.decide(level)
        payload = self.package(actions)
        resp = {"type": "response", "version": PROTOCOL_VERSION, "seq": req["seq"],
                "device_id": req["device_id"], "actions": actions,
                "checkpoint": base64.b64encode(payload).decode("ascii"),
                "checkpoint_sha256": hashlib.sha256(payload).hexdigest(),
                "provenance": {"level": int(level), "decision": "policy-argmax",
                               "batch": len(self.reference)}}
        return encode_message(resp)


# ---------------------------------------------------------------------------
# edge
# ---------------------------------------------------------------------------


@dataclass
class EdgeState:
    mode: str
    model: Model                       # weights the edge runs (quantized values when received)
    actions: list
    tau: float = 0.3
    window: int = 8
    calibrated: float = 0.0
    scores: deque = field(default_factory=deque)
    policy: Optional[Policy] = None    # partial and full deployments only
    masters: Optional[Model] = None    # partial and full deployments requantize from these
    level_scores: dict = field(default_factory=dict)
    device_id: str = "edge-0"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown deploy mode {self.mode!r}")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        self.scores = deque(self.scores, maxlen=self.window)

    def calibrate(self, score: float) -> None:
        self.calibrated = float(score)
        self.scores.clear()


def detect_shift(edge: EdgeState, images) -> Optional[float]:
    """Add the batch score to the window; returns the window mean when it drifts past tau."""
    s = batch_quality(images)
    edge.scores.append(s)
    mean = float(np.mean(edge.scores))
    if edge.calibrated <= 0 or not np.isfinite(edge.tau):
        return None
    if abs(mean - edge.calibrated) / edge.calibrated > edge.tau:
        return mean
    return None


def apply_response(edge: EdgeState, blob: bytes, seq: int) -> list:
    resp = decode_message(blob, "response")
    if resp["seq"] != seq:
        raise ProtocolError(f"response for request {resp['seq']}, expected {seq}")
    payload = base64.b64decode(resp["checkpoint"])
    if hashlib.sha256(payload).hexdigest() != resp["checkpoint_sha256"]:
        raise ProtocolError("checkpoint digest mismatch")
    model, _, manifest = from_bytes(payload)
    if manifest["bits"] != resp["actions"]:
        raise ProtocolError("checkpoint bits disagree with response actions")
    edge.model = model
    edge.actions = list(resp["actions"])
    return edge.actions


def local_requantize(edge: EdgeState, images) -> list:
    """Partial/full deployments: run the local policy and quantize the local masters."""
    with T.no_grad():
        d = Decider(edge.policy, "mode")
        forward(edge.masters, images, d)
    actions = d.action_list()
    qw = quantized_weights(edge.masters, actions)
    m = edge.masters.copy()
    for name, arr in qw.items():
        m.weights[name].data = arr
    edge.model, edge.actions = m, actions
    return actions


def _accuracy(model: Model, actions, xs, ys) -> float:
    correct = 0
    with T.no_grad():
        for x, y in zip(xs, ys):
            logits = forward(model, x, lambda i, s, h: actions[i])
            correct += int(np.sum(logits.data.argmax(axis=1) == y))
    return 100.0 * correct / max(1, sum(len(y) for y in ys))


def _stream(data: Dataset, level: int, n_batches: int, batch_size: int, rng: Rng):
    raw = data.at_level(RAW) if np.any(data.levels == RAW) else data
    xs, ys = [], []
    for _ in range(n_batches):
        idx = np.sort(rng.permutation(len(raw))[:batch_size])
        xs.append(apply_level(raw.images[idx], level).astype(np.float32))
        ys.append(raw.labels[idx])
    return xs, ys


def simulate_session(mode: str, schedule: Sequence[dict], seed: int, server: Server, stream_data: Dataset,
                     batch_size: int = 64, tau: float = 0.3, window: int = 8) -> list:
    """Drive an edge device through ``schedule`` (``[{"level": l, "batches": n}, ...]``).

    Returns the event log as a list of dicts.  Each segment ends with a
    ``segment`` event holding the accuracy actually served and, when the
    segment saw a swap, the accuracy of the pre-swap and post-swap models
    over the whole segment.
    """
    if not schedule:
        raise ConfigError("schedule must not be empty")
    if mode not in MODES:
        raise ConfigError(f"unknown deploy mode {mode!r}")
    rng = Rng(seed, stream=0xED)
    wire = Wire()
    log = []
    seq = 0

    def event(t, kind, **kw):
        log.append({"t": t, "event": kind, **kw})

    # initial deployment: the server's decision for the first segment's level
    first_level = int(schedule[0]["level"])
    if mode == "skeleton":
        edge = EdgeState(mode, server.model, [], tau, window, level_scores=dict(server.level_scores))
        wire.send(wire.to_server, encode_message(model_request(edge.device_id, server.level_scores[first_level],
                                                               first_level, seq)))
        wire.send(wire.to_edge, server.serve_request(wire.to_server.popleft()))
        apply_response(edge, wire.to_edge.popleft(), seq)
        seq += 1
    else:
        edge = EdgeState(mode, server.model, [], tau, window, policy=server.policy.copy(),
                         masters=server.model.copy(), level_scores=dict(server.level_scores))
        cal_x = apply_level(server.reference.images, first_level).astype(np.float32)
        local_requantize(edge, cal_x)
    edge.calibrate(server.level_scores[first_level])
    event(0, "deploy", mode=mode, actions=list(edge.actions), calibrated=edge.calibrated)

    t = 0
    for k, seg in enumerate(schedule):
        level, n = int(seg["level"]), int(seg["batches"])
        xs, ys = _stream(stream_data, level, n, batch_size, rng)
        pre_model, pre_actions = edge.model, list(edge.actions)
        served = []
        swapped = False
        for x, y in zip(xs, ys):
            if mode == "full":
                before = list(edge.actions)
                local_requantize(edge, x)
                if edge.actions != before:
                    # full deployments decide per batch; a change is not a model swap
                    event(t, "decision", actions=list(edge.actions))
            else:
                mean = detect_shift(edge, x)
                if mean is not None:
                    # the window still mixes old batches; the newest one describes the current quality
                    current = edge.scores[-1]
                    est = nearest_level(current, edge.level_scores)
                    event(t, "trigger", window_mean=mean, calibrated=edge.calibrated, score=current,
                          level_estimate=est)
                    if mode == "skeleton":
                        req = encode_message(model_request(edge.device_id, current, est, seq))
                        wire.send(wire.to_server, req)
                        event(t, "request", seq=seq, level_estimate=est, bytes=len(req))
                        wire.send(wire.to_edge, server.serve_request(wire.to_server.popleft()))
                        resp = wire.to_edge.popleft()
                        apply_response(edge, resp, seq)
                        event(t, "response", seq=seq, actions=list(edge.actions), bytes=len(resp))
                        seq += 1
                    else:
                        local_requantize(edge, x)
                    swapped = True
                    event(t, "swap", source="server" if mode == "skeleton" else "local",
                          actions=list(edge.actions))
                    edge.calibrate(current)
            with T.no_grad():
                logits = forward(edge.model, x, lambda i, s, h: edge.actions[i])
            served.append(int(np.sum(logits.data.argmax(axis=1) == y)))
            t += 1
        seg_event = {"segment": k, "level": level, "batches": n,
                     "served_accuracy": 100.0 * sum(served) / (n * batch_size), "swapped": swapped}
        if swapped:
            seg_event["pre_swap_accuracy"] = _accuracy(pre_model, pre_actions, xs, ys)
            seg_event["post_swap_accuracy"] = _accuracy(edge.model, edge.actions, xs, ys)
        event(t, "segment", **seg_event)
    return log


def count_swaps(log: Sequence[dict]) -> int:
    return sum(1 for e in log if e["event"] == "swap")


def write_log(log: Sequence[dict], path) -> None:
    with open(path, "w") as f:
        for e in log:
            f.write(json.dumps(e, sort_keys=True) + "\n")
