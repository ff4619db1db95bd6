"""Canonical message payloads and the length-prefixed frame protocol.

Every networked component in the harness speaks the same framing:

    ┌──────────┬──────────┬──────────────────┐
    │ len (4B) │ kind(1B) │   JSON body      │
    │ u32 BE   │ u8       │                  │
    └──────────┴──────────┴──────────────────┘

`len` counts the kind byte plus the body, not the length prefix itself.

Benchmark payloads are canonical JSON objects with a fixed key order and
fixed-width zero-padded numeric fields, so that the serialized byte count
depends only on the configured target size, never on the magnitude of
user ids, sequence numbers or timestamps.
"""

from __future__ import annotations

import hashlib
import json
import struct
import uuid
from dataclasses import dataclass

# Frame kind tags (closed set).
PRODUCE = 0x01
PRODUCE_ACK = 0x02
FETCH = 0x03
FETCH_RESP = 0x04
COMMIT_OFFSET = 0x05
DB_PUT = 0x06
DB_PUT_ACK = 0x07
DB_SUBSCRIBE = 0x08
DB_EVENT = 0x09
DB_RESET = 0x0A  # doubles as the generic reset request for the broker
ERROR = 0x0B

KNOWN_KINDS = frozenset(
    {
        PRODUCE,
        PRODUCE_ACK,
        FETCH,
        FETCH_RESP,
        COMMIT_OFFSET,
        DB_PUT,
        DB_PUT_ACK,
        DB_SUBSCRIBE,
        DB_EVENT,
        DB_RESET,
        ERROR,
    }
)

LENGTH_PREFIX_SIZE = 4
MAX_BODY_BYTES = 1 << 24

MAX_USER_ID = 999_999
MAX_SEQ = 999_999
MAX_SENT_NS = 10**19 - 1


class WireError(Exception):
    """Base class for framing and payload errors."""


class FrameError(WireError):
    """Frame body too large or otherwise unencodable."""


class IncompleteFrame(WireError):
    """Input ends before a complete frame."""


class ProtocolError(WireError):
    """Unknown kind tag or malformed body."""


class PayloadSizeError(WireError):
    """Requested payload size is below the fixed encoding overhead."""

    def __init__(self, target_bytes: int, minimum: int):
        self.target_bytes = target_bytes
        self.minimum = minimum
        super().__init__(
            f"target_bytes={target_bytes} is below the minimum canonical "
            f"payload size of {minimum} bytes"
        )


@dataclass(frozen=True)
class Envelope:
    """One benchmark message.

    `payload` is the canonical serialized form and is the single source of
    truth: the id/user/seq/sent_ns fields are embedded in it, so the
    payload bytes are what travels on the wire and what gets stored.
    """

    msg_id: str
    user_id: int
    seq: int
    topic: str
    sent_ns: int
    payload: bytes

    @classmethod
    def from_payload(cls, payload: bytes, topic: str = "") -> "Envelope":
        try:
            obj = json.loads(payload)
        except (ValueError, UnicodeDecodeError) as exc:
            raise ProtocolError(f"payload is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict) or set(obj) != {"id", "user", "seq", "sent_ns", "pad"}:
            raise ProtocolError("payload must contain exactly id,user,seq,sent_ns,pad")
        try:
            return cls(
                msg_id=str(obj["id"]),
                user_id=int(obj["user"]),
                seq=int(obj["seq"]),
                topic=topic,
                sent_ns=int(obj["sent_ns"]),
                payload=payload,
            )
        except ValueError as exc:
            raise ProtocolError(f"non-numeric payload field: {exc}") from exc


def validate_topic(topic: str) -> None:
    raw = topic.encode("utf-8")
    if not 1 <= len(raw) <= 128:
        raise ProtocolError(f"topic must be 1-128 UTF-8 bytes, got {len(raw)}")


def _render_payload(msg_id: str, user_id: int, seq: int, sent_ns: int, pad: str) -> bytes:
    return (
        f'{{"id":"{msg_id}","user":"{user_id:06d}","seq":"{seq:06d}",'
        f'"sent_ns":"{sent_ns:019d}","pad":"{pad}"}}'
    ).encode("ascii")


# Fixed cost of the canonical encoding with an empty pad.
PAYLOAD_OVERHEAD = len(_render_payload("0" * 32, 0, 0, 0, ""))


def derive_msg_id(salt: int | str, user_id: int, seq: int) -> str:
    """Deterministic 32-hex-char message id for reproducible runs."""
    return hashlib.md5(f"{salt}:{user_id:06d}:{seq:06d}".encode()).hexdigest()


def build_payload(
    user_id: int,
    seq: int,
    sent_ns: int,
    target_bytes: int,
    msg_id: str | None = None,
    topic: str = "",
) -> Envelope:
    """Build an envelope whose serialized payload is exactly `target_bytes`."""
    if not 0 <= user_id <= MAX_USER_ID:
        raise ValueError(f"user_id must be in [0, {MAX_USER_ID}], got {user_id}")
    if not 0 <= seq <= MAX_SEQ:
        raise ValueError(f"seq must be in [0, {MAX_SEQ}], got {seq}")
    if not 0 <= sent_ns <= MAX_SENT_NS:
        raise ValueError(f"sent_ns out of range: {sent_ns}")
    if target_bytes < PAYLOAD_OVERHEAD:
        raise PayloadSizeError(target_bytes, PAYLOAD_OVERHEAD)
    if msg_id is None:
        msg_id = uuid.uuid4().hex
    if len(msg_id) != 32 or any(c not in "0123456789abcdef" for c in msg_id):
        raise ValueError(f"msg_id must be 32 lowercase hex chars, got {msg_id!r}")
    pad = "x" * (target_bytes - PAYLOAD_OVERHEAD)
    payload = _render_payload(msg_id, user_id, seq, sent_ns, pad)
    assert len(payload) == target_bytes
    return Envelope(
        msg_id=msg_id,
        user_id=user_id,
        seq=seq,
        topic=topic,
        sent_ns=sent_ns,
        payload=payload,
    )


def encode_frame(kind: int, body: bytes) -> bytes:
    if kind not in KNOWN_KINDS:
        raise ProtocolError(f"unknown frame kind 0x{kind:02X}")
    if len(body) > MAX_BODY_BYTES:
        raise FrameError(f"frame body of {len(body)} bytes exceeds {MAX_BODY_BYTES}")
    return struct.pack(">I", 1 + len(body)) + bytes([kind]) + body


def decode_frame(data: bytes) -> tuple[int, bytes, bytes]:
    """Decode the first frame in `data`; returns (kind, body, remainder)."""
    if len(data) < LENGTH_PREFIX_SIZE:
        raise IncompleteFrame(f"need 4 length bytes, have {len(data)}")
    (length,) = struct.unpack(">I", data[:LENGTH_PREFIX_SIZE])
    if length < 1:
        raise ProtocolError("frame length must cover the kind byte")
    end = LENGTH_PREFIX_SIZE + length
    if len(data) < end:
        raise IncompleteFrame(f"frame claims {length} bytes, only {len(data) - 4} present")
    kind = data[LENGTH_PREFIX_SIZE]
    if kind not in KNOWN_KINDS:
        raise ProtocolError(f"unknown frame kind 0x{kind:02X}")
    return kind, data[LENGTH_PREFIX_SIZE + 1 : end], data[end:]


def encode_json_frame(kind: int, obj: dict) -> bytes:
    return encode_frame(kind, json.dumps(obj, separators=(",", ":")).encode("utf-8"))


def decode_json_body(body: bytes) -> dict:
    try:
        obj = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"frame body is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame body must be a JSON object")
    return obj


class FrameConn:
    """Framed connection over an asyncio stream pair, with byte counters.

    Reads and writes are not internally locked: a connection is owned by
    one reader task and writes are issued from the event-loop thread only,
    which preserves write order (the property the harness's determinism
    rests on).
    """

    def __init__(self, reader, writer):
        self.reader = reader
        self.writer = writer
        self.bytes_in = 0
        self.bytes_out = 0

    async def read_frame(self) -> tuple[int, bytes]:
        header = await self.reader.readexactly(LENGTH_PREFIX_SIZE)
        (length,) = struct.unpack(">I", header)
        if length < 1 or length > 1 + MAX_BODY_BYTES:
            raise ProtocolError(f"bad frame length {length}")
        rest = await self.reader.readexactly(length)
        self.bytes_in += LENGTH_PREFIX_SIZE + length
        kind = rest[0]
        if kind not in KNOWN_KINDS:
            raise ProtocolError(f"unknown frame kind 0x{kind:02X}")
        return kind, rest[1:]

    async def read_json_frame(self) -> tuple[int, dict]:
        kind, body = await self.read_frame()
        return kind, decode_json_body(body)

    def write_frame(self, kind: int, body: bytes) -> None:
        data = encode_frame(kind, body)
        self.bytes_out += len(data)
        self.writer.write(data)

    def write_json_frame(self, kind: int, obj: dict) -> None:
        self.write_frame(kind, json.dumps(obj, separators=(",", ":")).encode("utf-8"))

    async def drain(self) -> None:
        await self.writer.drain()

    def close(self) -> None:
        try:
            self.writer.close()
        except Exception:
            pass

    async def wait_closed(self) -> None:
        try:
            await self.writer.wait_closed()
        except Exception:
            pass
