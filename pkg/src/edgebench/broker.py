"""Single-node publish-subscribe commit-log broker.

Topics are append-only logs with contiguous 0-based offsets. One file per
topic on disk; each record is a frame-encoded JSON document carrying the
store timestamp and the base64 envelope, so the on-disk format reuses the
wire codec. The in-memory index is rebuilt by scanning the files on
startup, tolerating a truncated final record (a crash mid-write before
the acknowledgment).

Protocol (all frames FIFO per connection):
    PRODUCE       {"topic": str, "envelope": b64}        -> PRODUCE_ACK {"offset": int}
    FETCH         {"topic", "from", "max", "wait_ms"}    -> FETCH_RESP {"records": [...]}
                  unknown topic after the wait -> "unknown_topic": true in the response
    COMMIT_OFFSET {"group", "topic", "offset": int|null} -> COMMIT_OFFSET {"committed": int}
                  a null offset queries without committing
    DB_RESET      {}                                     -> DB_RESET {}
    errors        -> ERROR {"code", "detail"}

Connections are handled sequentially frame-by-frame, which is what makes
per-connection arrival order the total order of a topic when producers
funnel through one connection.
"""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import time
import urllib.parse
from pathlib import Path

from . import wire
from .service import NetCounters

log = logging.getLogger(__name__)

CURSOR_FILE = "cursors.log"


class BrokerError(Exception):
    def __init__(self, code: str, detail: str):
        self.code = code
        self.detail = detail
        super().__init__(f"[{code}] {detail}")


def _topic_filename(topic: str) -> str:
    return urllib.parse.quote(topic, safe="") + ".log"


class TopicLog:
    """Append-only record log for one topic, mirrored to a file."""

    def __init__(self, topic: str, path: Path, flush_every: int = 1):
        self.topic = topic
        self.path = path
        self.flush_every = max(1, flush_every)
        self.records: list[tuple[int, int, bytes]] = []  # (offset, stored_ns, envelope)
        self._fh = None
        self._load()
        self._fh = open(self.path, "ab")

    @property
    def next_offset(self) -> int:
        return len(self.records)

    def _load(self) -> None:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        pos = 0
        while pos < len(data):
            try:
                kind, body, rest = wire.decode_frame(data[pos:])
            except wire.IncompleteFrame:
                # Crash mid-append: the tail record was never acknowledged.
                log.warning("truncating partial record at byte %d of %s", pos, self.path)
                with open(self.path, "r+b") as fh:
                    fh.truncate(pos)
                break
            doc = wire.decode_json_body(body)
            env = base64.b64decode(doc["envelope"])
            self.records.append((len(self.records), int(doc["stored_ns"]), env))
            pos = len(data) - len(rest)

    def append(self, envelope: bytes) -> int:
        offset = self.next_offset
        stored_ns = time.monotonic_ns()
        record = wire.encode_json_frame(
            wire.PRODUCE,
            {"stored_ns": stored_ns, "envelope": base64.b64encode(envelope).decode("ascii")},
        )
        self._fh.write(record)
        if (offset + 1) % self.flush_every == 0:
            self._fh.flush()
        self.records.append((offset, stored_ns, envelope))
        return offset

    def read(self, from_offset: int, max_records: int) -> list[tuple[int, bytes]]:
        chunk = self.records[from_offset : from_offset + max_records]
        return [(off, env) for off, _, env in chunk]

    def close(self) -> None:
        if self._fh:
            self._fh.flush()
            self._fh.close()
            self._fh = None


class BrokerState:
    """Topics plus durable consumer-group cursors."""

    def __init__(self, data_dir: str | Path, flush_every: int = 1):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.flush_every = flush_every
        self.topics: dict[str, TopicLog] = {}
        self.cursors: dict[tuple[str, str], int] = {}
        self._cursor_fh = None
        self._load()

    def _load(self) -> None:
        for path in sorted(self.data_dir.glob("*.log")):
            if path.name == CURSOR_FILE:
                continue
            topic = urllib.parse.unquote(path.stem)
            self.topics[topic] = TopicLog(topic, path, self.flush_every)
        cursor_path = self.data_dir / CURSOR_FILE
        if cursor_path.exists():
            for line in cursor_path.read_text().splitlines():
                if not line.strip():
                    continue
                doc = json.loads(line)
                key = (doc["group"], doc["topic"])
                self.cursors[key] = max(self.cursors.get(key, 0), int(doc["offset"]))
        self._cursor_fh = open(cursor_path, "a")

    def get_or_create(self, topic: str) -> TopicLog:
        tl = self.topics.get(topic)
        if tl is None:
            tl = TopicLog(topic, self.data_dir / _topic_filename(topic), self.flush_every)
            self.topics[topic] = tl
        return tl

    def produce(self, topic: str, envelope: bytes) -> int:
        wire.validate_topic(topic)
        wire.Envelope.from_payload(envelope, topic)  # malformed envelope -> ProtocolError
        return self.get_or_create(topic).append(envelope)

    def commit(self, group: str, topic: str, offset: int) -> int:
        hw = self.topics[topic].next_offset if topic in self.topics else 0
        if not 0 <= offset <= hw:
            raise BrokerError("out_of_range", f"offset {offset} beyond next_offset {hw}")
        key = (group, topic)
        current = self.cursors.get(key, 0)
        if offset > current:  # stale commits are ignored
            self.cursors[key] = offset
            self._cursor_fh.write(
                json.dumps({"group": group, "topic": topic, "offset": offset}) + "\n"
            )
            self._cursor_fh.flush()
        return self.cursors.get(key, 0)

    def committed(self, group: str, topic: str) -> int:
        return self.cursors.get((group, topic), 0)

    def reset(self) -> None:
        for tl in self.topics.values():
            tl.close()
            tl.path.unlink(missing_ok=True)
        self.topics.clear()
        self.cursors.clear()
        self._cursor_fh.close()
        (self.data_dir / CURSOR_FILE).unlink(missing_ok=True)
        self._cursor_fh = open(self.data_dir / CURSOR_FILE, "a")

    def close(self) -> None:
        for tl in self.topics.values():
            tl.close()
        if self._cursor_fh:
            self._cursor_fh.close()


class BrokerServer:
    def __init__(
        self,
        state: BrokerState,
        host: str = "127.0.0.1",
        port: int = 7071,
        fault_dup_every: int = 0,
    ):
        self.state = state
        self.host = host
        self.port = port
        self.fault_dup_every = fault_dup_every
        self._fetch_dup_counter = 0
        self.counters = NetCounters()
        self._server: asyncio.AbstractServer | None = None
        self._appended = asyncio.Condition()

    async def start(self) -> int:
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("broker listening on %s:%d", self.host, self.port)
        return self.port

    async def stop(self) -> None:
        if self._server:
            self._server.close()
            await self._server.wait_closed()
        self.state.close()

    async def _notify_append(self) -> None:
        async with self._appended:
            self._appended.notify_all()

    async def _handle(self, reader, writer) -> None:
        conn = wire.FrameConn(reader, writer)
        self.counters.track(conn)
        try:
            while True:
                try:
                    kind, body = await conn.read_frame()
                except (asyncio.IncompleteReadError, ConnectionError):
                    return
                try:
                    await self._dispatch(conn, kind, body)
                except BrokerError as exc:
                    conn.write_json_frame(wire.ERROR, {"code": exc.code, "detail": exc.detail})
                except wire.ProtocolError as exc:
                    conn.write_json_frame(wire.ERROR, {"code": "protocol", "detail": str(exc)})
                await conn.drain()
        except (wire.WireError, ConnectionError, asyncio.IncompleteReadError) as exc:
            log.debug("connection dropped: %s", exc)
        finally:
            self.counters.untrack(conn)
            conn.close()

    async def _dispatch(self, conn: wire.FrameConn, kind: int, body: bytes) -> None:
        if kind == wire.PRODUCE:
            doc = wire.decode_json_body(body)
            offset = self.state.produce(doc["topic"], base64.b64decode(doc["envelope"]))
            # Flush happened inside append (flush_every=1); ack after it.
            conn.write_json_frame(wire.PRODUCE_ACK, {"offset": offset})
            await self._notify_append()
        elif kind == wire.FETCH:
            await self._fetch(conn, wire.decode_json_body(body))
        elif kind == wire.COMMIT_OFFSET:
            doc = wire.decode_json_body(body)
            if doc.get("offset") is None:
                committed = self.state.committed(doc["group"], doc["topic"])
            else:
                committed = self.state.commit(doc["group"], doc["topic"], int(doc["offset"]))
            conn.write_json_frame(wire.COMMIT_OFFSET, {"committed": committed})
        elif kind == wire.DB_RESET:
            self.state.reset()
            conn.write_json_frame(wire.DB_RESET, {})
        else:
            raise wire.ProtocolError(f"unexpected frame kind 0x{kind:02X} at broker")

    async def _fetch(self, conn: wire.FrameConn, doc: dict) -> None:
        topic = doc["topic"]
        from_offset = int(doc["from"])
        max_records = int(doc.get("max", 1))
        wait_ms = int(doc.get("wait_ms", 0))
        if from_offset < 0 or max_records < 1:
            raise BrokerError("bad_request", "from must be >= 0 and max >= 1")

        deadline = asyncio.get_running_loop().time() + wait_ms / 1000.0
        while True:
            tl = self.state.topics.get(topic)
            if tl is not None:
                if from_offset > tl.next_offset:
                    raise BrokerError(
                        "out_of_range",
                        f"from {from_offset} beyond next_offset {tl.next_offset}",
                    )
                records = tl.read(from_offset, max_records)
                if records:
                    conn.write_json_frame(wire.FETCH_RESP, self._resp(records))
                    return
            remaining = deadline - asyncio.get_running_loop().time()
            if remaining <= 0:
                resp = self._resp([])
                if tl is None:
                    resp["unknown_topic"] = True
                conn.write_json_frame(wire.FETCH_RESP, resp)
                return
            async with self._appended:
                try:
                    await asyncio.wait_for(self._appended.wait(), timeout=remaining)
                except asyncio.TimeoutError:
                    pass

    def _resp(self, records: list[tuple[int, bytes]]) -> dict:
        out = []
        for off, env in records:
            out.append({"offset": off, "envelope": base64.b64encode(env).decode("ascii")})
            if self.fault_dup_every > 0:
                self._fetch_dup_counter += 1
                if self._fetch_dup_counter % self.fault_dup_every == 0:
                    out.append(out[-1])  # duplicate-injection fault mode
        return {"records": out}


class BrokerClient:
    """Asyncio client; requests are pipelined, responses matched FIFO."""

    def __init__(self):
        self.conn: wire.FrameConn | None = None
        self._pending: asyncio.Queue | None = None
        self._reader_task = None
        self._dead: str | None = None

    async def connect(self, host: str, port: int) -> None:
        reader, writer = await asyncio.open_connection(host, port)
        self.conn = wire.FrameConn(reader, writer)
        self._pending = asyncio.Queue()
        self._reader_task = asyncio.create_task(self._read_loop())

    async def _read_loop(self) -> None:
        try:
            while True:
                kind, body = await self.conn.read_frame()
                fut = self._pending.get_nowait()
                if not fut.done():
                    fut.set_result((kind, wire.decode_json_body(body)))
        except (asyncio.IncompleteReadError, ConnectionError, wire.WireError) as exc:
            self._dead = str(exc)
            while not self._pending.empty():
                fut = self._pending.get_nowait()
                if not fut.done():
                    fut.set_exception(ConnectionError(f"broker connection lost: {exc}"))
        except asyncio.CancelledError:
            pass

    def _request_nowait(self, kind: int, obj: dict) -> asyncio.Future:
        if self._dead is not None:
            raise ConnectionError(f"broker connection lost: {self._dead}")
        fut = asyncio.get_running_loop().create_future()
        self._pending.put_nowait(fut)
        self.conn.write_json_frame(kind, obj)
        return fut

    @staticmethod
    def _unwrap(kind: int, doc: dict, expect: int) -> dict:
        if kind == wire.ERROR:
            raise BrokerError(doc.get("code", "unknown"), doc.get("detail", ""))
        if kind != expect:
            raise wire.ProtocolError(f"expected kind 0x{expect:02X}, got 0x{kind:02X}")
        return doc

    def produce_nowait(self, topic: str, envelope: bytes) -> asyncio.Future:
        return self._request_nowait(
            wire.PRODUCE,
            {"topic": topic, "envelope": base64.b64encode(envelope).decode("ascii")},
        )

    async def produce(self, topic: str, envelope: bytes) -> int:
        kind, doc = await self.produce_nowait(topic, envelope)
        return int(self._unwrap(kind, doc, wire.PRODUCE_ACK)["offset"])

    async def fetch(
        self, topic: str, from_offset: int, max_records: int = 100, wait_ms: int = 0
    ) -> tuple[list[tuple[int, bytes]], bool]:
        """Returns (records, topic_known)."""
        kind, doc = await self._request_nowait(
            wire.FETCH,
            {"topic": topic, "from": from_offset, "max": max_records, "wait_ms": wait_ms},
        )
        doc = self._unwrap(kind, doc, wire.FETCH_RESP)
        records = [
            (int(r["offset"]), base64.b64decode(r["envelope"])) for r in doc["records"]
        ]
        return records, not doc.get("unknown_topic", False)

    async def commit(self, group: str, topic: str, offset: int) -> int:
        kind, doc = await self._request_nowait(
            wire.COMMIT_OFFSET, {"group": group, "topic": topic, "offset": offset}
        )
        return int(self._unwrap(kind, doc, wire.COMMIT_OFFSET)["committed"])

    async def committed(self, group: str, topic: str) -> int:
        kind, doc = await self._request_nowait(
            wire.COMMIT_OFFSET, {"group": group, "topic": topic, "offset": None}
        )
        return int(self._unwrap(kind, doc, wire.COMMIT_OFFSET)["committed"])

    async def reset(self) -> None:
        kind, doc = await self._request_nowait(wire.DB_RESET, {})
        self._unwrap(kind, doc, wire.DB_RESET)

    async def close(self) -> None:
        if self._reader_task:
            self._reader_task.cancel()
        if self.conn:
            self.conn.close()
            await self.conn.wait_closed()
