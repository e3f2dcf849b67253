"""Fog node: packet framing, authentication, freshness, risk gating, forwarding.

Frames are single-line JSON objects in a fixed canonical byte layout; the
MAC is computed over exactly those bytes minus the ``hmac`` field, so any
re-serialization ambiguity is excluded by construction.  Every gate failure
is a decision with a reason, never an exception: the caller keeps counts and
conservation (stored + parked + rejected == produced) stays checkable.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
import json
import math
import re
import socket
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, NeurotwinError, NumericError
from . import tensorio

N_FEATURES = 11
HMAC_HEX_LEN = 64
KEY_LEN = 32

FRAME_KEYS = ("device_id", "timestamp_utc_ms", "seq", "features", "hmac")

#: gate reasons; ``action`` is derived from the reason
REASON_FORWARDED = "authenticated_forwarded"
REASON_BELOW = "below_threshold"
REASON_BAD_HMAC = "bad_hmac"
REASON_STALE = "stale_timestamp"
REASON_BAD_SCHEMA = "bad_schema"
REASON_UNKNOWN_DEVICE = "unknown_device"
REASON_DUPLICATE = "duplicate"
REASON_STORE_UNAVAILABLE = "store_unavailable"

ACTION_FORWARD = "forward"
ACTION_PARK = "park"
ACTION_REJECT = "reject"

_DEVICE_ID_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")
_HMAC_RE = re.compile(r"^[0-9a-f]{64}$")


class FrameError(NeurotwinError, ValueError):
    """A byte sequence is not a canonical, well-formed frame."""


class StoreUnavailableError(NeurotwinError):
    """The cloud store refused a write (simulated outage)."""


@dataclass(frozen=True)
class Packet:
    """One signed feature-vector carrier.

    ``hmac_hex`` is empty until :func:`sign_packet` fills it in.
    """

    device_id: str
    timestamp_utc_ms: int
    seq: int
    features: Tuple[float, ...]
    hmac_hex: str = ""

    def __post_init__(self):
        if not _DEVICE_ID_RE.match(self.device_id):
            raise InvalidInputError(f"bad device_id {self.device_id!r}")
        if self.seq < 0:
            raise InvalidInputError("seq must be nonnegative")
        object.__setattr__(self, "features",
                           tuple(float(v) for v in self.features))
        if len(self.features) != N_FEATURES:
            raise InvalidInputError(
                f"feature vector must have {N_FEATURES} entries, got {len(self.features)}")
        if not all(math.isfinite(v) for v in self.features):
            raise InvalidInputError("features must be finite")
        if self.hmac_hex and not _HMAC_RE.match(self.hmac_hex):
            raise InvalidInputError("hmac_hex must be 64 lowercase hex chars")


def _fmt_number(x: float) -> str:
    return format(float(x), ".17g")


def signing_bytes(packet: Packet) -> bytes:
    """Canonical frame bytes minus the hmac field (the MAC input)."""
    feats = ",".join(_fmt_number(v) for v in packet.features)
    return (
        f'{{"device_id":"{packet.device_id}",'
        f'"timestamp_utc_ms":{packet.timestamp_utc_ms},'
        f'"seq":{packet.seq},'
        f'"features":[{feats}]}}'
    ).encode("ascii")


def encode_frame(packet: Packet) -> bytes:
    """Single canonical LF-terminated line for the wire."""
    if not packet.hmac_hex:
        raise InvalidInputError("cannot encode an unsigned packet")
    body = signing_bytes(packet)
    return body[:-1] + f',"hmac":"{packet.hmac_hex}"}}'.encode("ascii") + b"\n"


def decode_frame(data: bytes) -> Packet:
    """Parse one LF-terminated frame; rejects anything non-canonical.

    Raises :class:`FrameError` (the caller records it as ``bad_schema``).
    """
    if not data.endswith(b"\n") or data.count(b"\n") != 1:
        raise FrameError("frame must be exactly one LF-terminated line")
    try:
        obj = json.loads(data.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"frame is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or tuple(obj.keys()) != FRAME_KEYS:
        raise FrameError("frame fields missing or out of order")
    if not isinstance(obj["device_id"], str):
        raise FrameError("device_id must be a string")
    if not isinstance(obj["timestamp_utc_ms"], int) or isinstance(obj["timestamp_utc_ms"], bool):
        raise FrameError("timestamp_utc_ms must be an integer")
    if not isinstance(obj["seq"], int) or isinstance(obj["seq"], bool):
        raise FrameError("seq must be an integer")
    feats = obj["features"]
    if (not isinstance(feats, list)
            or len(feats) != N_FEATURES
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                       for v in feats)
            or not all(math.isfinite(float(v)) for v in feats)):
        raise FrameError(
            f"features must be {N_FEATURES} finite numbers")
    if not isinstance(obj["hmac"], str) or not _HMAC_RE.match(obj["hmac"]):
        raise FrameError("hmac must be 64 lowercase hex chars")
    try:
        packet = Packet(
            device_id=obj["device_id"],
            timestamp_utc_ms=obj["timestamp_utc_ms"],
            seq=obj["seq"],
            features=tuple(float(v) for v in feats),
            hmac_hex=obj["hmac"],
        )
    except InvalidInputError as exc:
        raise FrameError(str(exc)) from exc
    if encode_frame(packet) != data:
        raise FrameError("frame bytes are not canonical")
    return packet


# ---------------------------------------------------------------------------
# Authentication
# ---------------------------------------------------------------------------

def hmac_sha256_hex(key: bytes, data: bytes) -> str:
    """Lowercase-hex HMAC-SHA256 (the MAC primitive under every signature)."""
    return hmac_mod.new(key, data, hashlib.sha256).hexdigest()


def sign_packet(packet: Packet, key: bytes) -> Packet:
    if len(key) != KEY_LEN:
        raise InvalidInputError(f"device key must be {KEY_LEN} bytes")
    return replace(packet, hmac_hex=hmac_sha256_hex(key, signing_bytes(packet)))


def verify_packet(packet: Packet, registry: Dict[str, bytes]) -> Optional[str]:
    """None when authentic; otherwise the rejection reason.

    Comparison is constant time (``hmac.compare_digest``).
    """
    key = registry.get(packet.device_id)
    if key is None:
        return REASON_UNKNOWN_DEVICE
    expected = hmac_sha256_hex(key, signing_bytes(packet))
    if not hmac_mod.compare_digest(expected, packet.hmac_hex):
        return REASON_BAD_HMAC
    return None


def validate_timestamp(packet: Packet, now_utc_ms: int, window_ms: int) -> bool:
    """Fresh iff |now - timestamp| <= window (symmetric on both sides)."""
    if window_ms <= 0:
        raise InvalidInputError("window_ms must be positive")
    return abs(now_utc_ms - packet.timestamp_utc_ms) <= window_ms


def load_registry(path: str) -> Dict[str, bytes]:
    registry: Dict[str, bytes] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                device_id, hex_key = line.split("\t")
                key = bytes.fromhex(hex_key)
            except ValueError as exc:
                raise InvalidInputError(
                    f"{path}:{lineno}: bad registry line") from exc
            if len(key) != KEY_LEN:
                raise InvalidInputError(
                    f"{path}:{lineno}: key must be {KEY_LEN} bytes")
            registry[device_id] = key
    return registry


def save_registry(path: str, registry: Dict[str, bytes]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for device_id, key in registry.items():
            fh.write(f"{device_id}\t{key.hex()}\n")


def make_registry(device_ids: Sequence[str], seed: int) -> Dict[str, bytes]:
    """Deterministic per-device 32-byte keys for simulations."""
    rng = np.random.default_rng(seed)
    return {d: bytes(rng.integers(0, 256, KEY_LEN, dtype=np.uint8).tobytes())
            for d in device_ids}


# ---------------------------------------------------------------------------
# Risk scoring
# ---------------------------------------------------------------------------

RISK_CLASSES = ("low", "high")


@dataclass
class RiskModel:
    """Two-class softmax layer over the 11 raw features (low=0, high=1)."""

    weights: np.ndarray  # (2, 11)
    bias: np.ndarray     # (2,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.shape != (2, N_FEATURES) or self.bias.shape != (2,):
            raise InvalidInputError(
                f"risk model shapes must be (2, {N_FEATURES}) and (2,)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise InvalidInputError("risk model entries must be finite")

    def save(self, path: str) -> None:
        tensorio.save_tensors(path, {"weights": self.weights, "bias": self.bias},
                              meta={"kind": "risk-model", "classes": list(RISK_CLASSES)})

    @classmethod
    def load(cls, path: str) -> "RiskModel":
        tensors, meta = tensorio.load_tensors(path)
        if meta.get("kind") != "risk-model":
            raise InvalidInputError(f"{path} is not a risk-model artifact")
        return cls(tensors["weights"], tensors["bias"])


def risk_score(features: Sequence[float], model: RiskModel) -> np.ndarray:
    """softmax(W x + b); components sum to 1 to within 1e-12."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (N_FEATURES,):
        raise InvalidInputError(f"expected {N_FEATURES} features")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("features must be finite")
    logits = model.weights @ x + model.bias
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits", location="risk_score")
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / np.sum(e)


# ---------------------------------------------------------------------------
# Gate
# ---------------------------------------------------------------------------

@dataclass
class GateConfig:
    threshold: float = 0.75
    freshness_ms: int = 5000


@dataclass
class GateDecision:
    risk_high_prob: float
    action: str
    reason: str

    def __post_init__(self):
        if (self.action == ACTION_FORWARD) != (self.reason == REASON_FORWARDED):
            raise InvalidInputError("action=forward iff reason=authenticated_forwarded")


def gate(packet: Packet, registry: Dict[str, bytes], model: RiskModel,
         now_utc_ms: int, config: GateConfig | None = None) -> GateDecision:
    """Fixed pipeline: verify -> timestamp -> schema -> risk.

    The first failing stage short-circuits with its reason; anything that
    fails authentication, freshness or schema is rejected (not parked).
    """
    config = config or GateConfig()
    auth_failure = verify_packet(packet, registry)
    if auth_failure is not None:
        return GateDecision(0.0, ACTION_REJECT, auth_failure)
    if not validate_timestamp(packet, now_utc_ms, config.freshness_ms):
        return GateDecision(0.0, ACTION_REJECT, REASON_STALE)
    if (len(packet.features) != N_FEATURES
            or not all(math.isfinite(v) for v in packet.features)):
        return GateDecision(0.0, ACTION_REJECT, REASON_BAD_SCHEMA)
    probs = risk_score(packet.features, model)
    high = float(probs[1])
    if high >= config.threshold:
        return GateDecision(high, ACTION_FORWARD, REASON_FORWARDED)
    return GateDecision(high, ACTION_PARK, REASON_BELOW)


# ---------------------------------------------------------------------------
# Cloud store + exactly-once forwarding
# ---------------------------------------------------------------------------

@dataclass
class DeliveryReceipt:
    stored: bool
    reason: str   # authenticated_forwarded | duplicate | store_unavailable
    attempts: int


class CloudStore:
    """In-process record store keyed by (device_id, seq); duplicates are no-ops.

    ``outages_remaining`` makes the next N writes fail, to exercise the
    bounded-retry contract.
    """

    def __init__(self, log_path: str | None = None):
        self._records: Dict[Tuple[str, int], dict] = {}
        self._order: List[Tuple[str, int]] = []
        self._log_path = log_path
        self.outages_remaining = 0

    def put(self, packet: Packet, risk_high_prob: float) -> bool:
        """True if stored now, False if the key was already present."""
        if self.outages_remaining > 0:
            self.outages_remaining -= 1
            raise StoreUnavailableError("cloud store unavailable")
        key = (packet.device_id, packet.seq)
        if key in self._records:
            return False
        record = {
            "device_id": packet.device_id,
            "timestamp_utc_ms": packet.timestamp_utc_ms,
            "seq": packet.seq,
            "features": list(packet.features),
            "risk_high_prob": risk_high_prob,
        }
        self._records[key] = record
        self._order.append(key)
        if self._log_path:
            with open(self._log_path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(record) + "\n")
        return True

    def __contains__(self, key: Tuple[str, int]) -> bool:
        return key in self._records

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> List[dict]:
        return [self._records[k] for k in self._order]


def forward_exactly_once(decision: GateDecision, packet: Packet,
                         store: CloudStore, max_retries: int = 3) -> DeliveryReceipt:
    """Deliver a forward-decision packet; retries bounded, duplicates acknowledged."""
    if decision.action != ACTION_FORWARD:
        raise InvalidInputError("forward_exactly_once requires a forward decision")
    attempts = 0
    while True:
        attempts += 1
        try:
            stored = store.put(packet, decision.risk_high_prob)
        except StoreUnavailableError:
            if attempts > max_retries:
                return DeliveryReceipt(False, REASON_STORE_UNAVAILABLE, attempts)
            continue
        if stored:
            return DeliveryReceipt(True, REASON_FORWARDED, attempts)
        return DeliveryReceipt(False, REASON_DUPLICATE, attempts)


# ---------------------------------------------------------------------------
# Node: stream processing with conservation counters
# ---------------------------------------------------------------------------

@dataclass
class ProcessedFrame:
    decision: GateDecision
    packet: Optional[Packet] = None
    receipt: Optional[DeliveryReceipt] = None


class FogNode:
    """Single fog node wiring registry, model, gate config and stores."""

    def __init__(self, registry: Dict[str, bytes], model: RiskModel,
                 config: GateConfig | None = None,
                 cloud_log_path: str | None = None):
        self.registry = registry
        self.model = model
        self.config = config or GateConfig()
        self.cloud = CloudStore(cloud_log_path)
        self.parked: List[Tuple[Packet, str]] = []
        self.rejects: Counter = Counter()
        self.produced = 0

    def process_frame(self, frame: bytes, now_utc_ms: int | None = None) -> ProcessedFrame:
        """Decode + gate + (maybe) forward one wire frame.

        ``now_utc_ms=None`` trusts the frame's own timestamp (offline replay
        mode); pass an explicit clock for freshness enforcement.
        """
        self.produced += 1
        try:
            packet = decode_frame(frame)
        except FrameError:
            self.rejects[REASON_BAD_SCHEMA] += 1
            return ProcessedFrame(GateDecision(0.0, ACTION_REJECT, REASON_BAD_SCHEMA))
        now = packet.timestamp_utc_ms if now_utc_ms is None else now_utc_ms
        decision = gate(packet, self.registry, self.model, now, self.config)
        if decision.action == ACTION_REJECT:
            self.rejects[decision.reason] += 1
            return ProcessedFrame(decision, packet)
        if decision.action == ACTION_PARK:
            self.parked.append((packet, decision.reason))
            return ProcessedFrame(decision, packet)
        receipt = forward_exactly_once(decision, packet, self.cloud)
        if receipt.reason == REASON_DUPLICATE:
            self.rejects[REASON_DUPLICATE] += 1
        elif receipt.reason == REASON_STORE_UNAVAILABLE:
            self.parked.append((packet, REASON_STORE_UNAVAILABLE))
        return ProcessedFrame(decision, packet, receipt)

    def process_stream(self, frames: Iterable[bytes],
                       now_utc_ms: int | None = None) -> List[ProcessedFrame]:
        return [self.process_frame(f, now_utc_ms) for f in frames]

    @property
    def rejected_count(self) -> int:
        return sum(self.rejects.values())

    def conservation_holds(self) -> bool:
        return self.produced == len(self.cloud) + len(self.parked) + self.rejected_count

    def summary(self) -> Dict[str, int]:
        out = {
            "produced": self.produced,
            "stored": len(self.cloud),
            "parked": len(self.parked),
            "rejected": self.rejected_count,
        }
        for reason in sorted(self.rejects):
            out[f"rejected_{reason}"] = self.rejects[reason]
        return out


# ---------------------------------------------------------------------------
# Loopback TCP transport (optional; frames are LF-delimited either way)
# ---------------------------------------------------------------------------

def serve_loopback(node: FogNode, host: str, port: int,
                   now_utc_ms: int | None = None,
                   ready_event=None) -> List[ProcessedFrame]:
    """Accept one connection, gate every LF-delimited frame, answer per line.

    Each reply line is ``action,reason,risk_high_prob``.  Returns when the
    peer closes its side.
    """
    results: List[ProcessedFrame] = []
    with socket.create_server((host, port)) as server:
        if ready_event is not None:
            ready_event.set()
        conn, _ = server.accept()
        with conn, conn.makefile("rb") as rd, conn.makefile("wb") as wr:
            for line in rd:
                processed = node.process_frame(line, now_utc_ms)
                d = processed.decision
                wr.write(f"{d.action},{d.reason},{_fmt_number(d.risk_high_prob)}\n"
                         .encode("ascii"))
                wr.flush()
                results.append(processed)
    return results


def send_frames_loopback(host: str, port: int,
                         frames: Sequence[bytes]) -> List[str]:
    """Send frames to a loopback gate and collect its reply lines."""
    replies = []
    with socket.create_connection((host, port)) as conn:
        with conn.makefile("rb") as rd, conn.makefile("wb") as wr:
            for frame in frames:
                wr.write(frame)
                wr.flush()
                reply = rd.readline()
                replies.append(reply.decode("ascii").rstrip("\n"))
            conn.shutdown(socket.SHUT_WR)
    return replies
