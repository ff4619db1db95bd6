"""Realtime-database emulator: JSON tree, push notifications, WAN model.

The emulator stands in for a remote realtime database. State changes are
applied in arrival order (which makes version assignment reproducible
when writers funnel through ordered connections), while the *timing* of
acknowledgments and push notifications is computed by a virtual-time
queueing pipeline:

    arrival -> [+ one-way WAN delay] -> FIFO admission to a pool of
    `workers` servers (service = base + per_kb * size, plus a flat
    surcharge for writes outside the bulk-sync channel) -> completion
    -> ack after another WAN delay; one independently delayed
    notification per matching subscriber.

Admission is bounded: more than `workers + queue_capacity` writes in the
(virtual) system get an overload error instead of a version.

Protocol:
    DB_PUT       {"path", "value", "msg_id", ["chan":"sync"]}
                 -> DB_PUT_ACK {"version": int} | {"error": "overload"}
    DB_SUBSCRIBE {"client", "prefix"} -> DB_EVENT stream, starting with a
                 {"kind":"snapshot"} event, then one {"kind":"write"} per
                 accepted write under the prefix, in version order
    DB_RESET     {} -> DB_RESET {}   (tree cleared, version counter kept)

SIGUSR1 triggers a connection outage (all connections aborted, accepts
refused for `outage_s`) for fault-injection tests; emulator state
survives, mirroring a service blip rather than data loss.
"""

from __future__ import annotations

import asyncio
import heapq
import logging
import math
import random
from dataclasses import dataclass, field

from . import wire
from .config import CloudConfig
from .service import NetCounters

log = logging.getLogger(__name__)


class PathError(Exception):
    pass


def split_path(path: str, allow_trailing_slash: bool = False) -> list[str]:
    if allow_trailing_slash:
        path = path.rstrip("/")
    if not path:
        raise PathError("empty path")
    segs = path.split("/")
    if any(not s for s in segs):
        raise PathError(f"path {path!r} has empty segments")
    return segs


class JsonTree:
    """Hierarchical path -> JSON store; last writer wins at a path."""

    def __init__(self):
        self.root: dict = {}

    def put(self, path: str, value) -> None:
        segs = split_path(path)
        node = self.root
        for seg in segs[:-1]:
            child = node.get(seg)
            if not isinstance(child, dict):
                child = {}
                node[seg] = child
            node = child
        node[segs[-1]] = value

    def get(self, path: str):
        node = self.root
        for seg in split_path(path):
            if not isinstance(node, dict) or seg not in node:
                raise KeyError(path)
            node = node[seg]
        return node

    def subtree(self, prefix_segs: list[str]):
        node = self.root
        for seg in prefix_segs:
            if not isinstance(node, dict) or seg not in node:
                return {}
            node = node[seg]
        return node

    def clear(self) -> None:
        self.root = {}


def sample_wan_delay_ms(rng: random.Random, median_ms: float, sigma: float) -> float:
    """One lognormal one-way delay draw; mean is median * exp(sigma^2 / 2)."""
    if median_ms <= 0:
        return 0.0
    if sigma == 0:
        return median_ms  # degenerate distribution: constant exp(mu)
    return rng.lognormvariate(math.log(median_ms), sigma)


class SaturationPipeline:
    """Virtual-time bookkeeping for the bounded multi-server pipeline.

    offer() must be called in arrival order; it returns the virtual
    completion time, or None when the system is at capacity. Entirely
    deterministic given the call sequence.
    """

    def __init__(
        self,
        workers: int,
        queue_capacity: int,
        service_ms_base: float,
        service_ms_per_kb: float,
        http_overhead_ms: float,
    ):
        self.workers = workers
        self.queue_capacity = queue_capacity
        self.service_ms_base = service_ms_base
        self.service_ms_per_kb = service_ms_per_kb
        self.http_overhead_ms = http_overhead_ms
        self._worker_free = [0.0] * workers
        self._in_system: list[float] = []

    def service_s(self, size_kb: float, sync_channel: bool) -> float:
        ms = self.service_ms_base + self.service_ms_per_kb * size_kb
        if not sync_channel:
            ms += self.http_overhead_ms
        return ms / 1000.0

    def occupancy(self, now: float) -> int:
        while self._in_system and self._in_system[0] <= now:
            heapq.heappop(self._in_system)
        return len(self._in_system)

    def offer(
        self, arrival_t: float, wan_req_s: float, size_kb: float, sync_channel: bool
    ) -> float | None:
        if self.occupancy(arrival_t) >= self.workers + self.queue_capacity:
            return None
        available = arrival_t + wan_req_s
        free = heapq.heappop(self._worker_free)
        start = max(available, free)
        done = start + self.service_s(size_kb, sync_channel)
        heapq.heappush(self._worker_free, done)
        heapq.heappush(self._in_system, done)
        return done


class _Pacer:
    """Per-connection writer delivering frames in order, each no earlier
    than its scheduled time (models per-message WAN delay without ever
    reordering a TCP stream)."""

    def __init__(self, conn: wire.FrameConn):
        self.conn = conn
        self.queue: asyncio.Queue = asyncio.Queue()
        self.task: asyncio.Task | None = None

    def start(self) -> None:
        self.task = asyncio.create_task(self._run())

    def enqueue(self, at: float, kind: int, obj: dict) -> None:
        self.queue.put_nowait((at, kind, obj))

    async def _run(self) -> None:
        loop = asyncio.get_running_loop()
        try:
            while True:
                at, kind, obj = await self.queue.get()
                delay = at - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)
                self.conn.write_json_frame(kind, obj)
                await self.conn.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass

    def stop(self) -> None:
        if self.task:
            self.task.cancel()


@dataclass
class Subscription:
    client_id: str
    prefix_segs: list[str]
    pacer: _Pacer
    events_sent: int = 0


@dataclass
class CloudStats:
    accepted: int = 0
    overloaded: int = 0
    duplicates: int = 0
    overload_msg_ids: list[str] = field(default_factory=list)


class CloudServer:
    def __init__(self, cfg: CloudConfig, seed: int, host: str = "127.0.0.1"):
        self.cfg = cfg
        self.host = host
        self.port = cfg.port
        self.rng = random.Random(seed)
        self.tree = JsonTree()
        self.version = 0
        self.dedup: dict[str, int] = {}
        self.subs: list[Subscription] = []
        self.pipeline = self._new_pipeline()
        self.stats = CloudStats()
        self.counters = NetCounters()
        self._server: asyncio.AbstractServer | None = None
        self._accepting = True
        self._conns: list[wire.FrameConn] = []

    def _new_pipeline(self) -> SaturationPipeline:
        return SaturationPipeline(
            self.cfg.workers,
            self.cfg.queue_capacity,
            self.cfg.service_ms_base,
            self.cfg.service_ms_per_kb,
            self.cfg.http_overhead_ms,
        )

    def _wan_s(self) -> float:
        return sample_wan_delay_ms(self.rng, self.cfg.wan_median_ms, self.cfg.wan_sigma) / 1000.0

    async def start(self) -> int:
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("cloudsim listening on %s:%d", self.host, self.port)
        return self.port

    async def stop(self) -> None:
        if self._server:
            self._server.close()
            await self._server.wait_closed()
        log.info(
            "cloudsim stats: accepted=%d overloaded=%d duplicates=%d version=%d",
            self.stats.accepted,
            self.stats.overloaded,
            self.stats.duplicates,
            self.version,
        )

    def start_outage(self) -> None:
        """Abort every connection and refuse new ones for cfg.outage_s."""
        log.warning("outage injected: dropping %d connections", len(self._conns))
        self._accepting = False
        for conn in list(self._conns):
            try:
                conn.writer.transport.abort()
            except Exception:
                pass
        asyncio.get_running_loop().call_later(self.cfg.outage_s, self._end_outage)

    def _end_outage(self) -> None:
        log.warning("outage over, accepting connections again")
        self._accepting = True

    async def _handle(self, reader, writer) -> None:
        if not self._accepting:
            writer.close()
            return
        conn = wire.FrameConn(reader, writer)
        self.counters.track(conn)
        self._conns.append(conn)
        pacer = _Pacer(conn)
        pacer.start()
        sub: Subscription | None = None
        try:
            while True:
                try:
                    kind, body = await conn.read_frame()
                except (asyncio.IncompleteReadError, ConnectionError):
                    return
                try:
                    sub = self._dispatch(conn, pacer, sub, kind, body)
                except (wire.ProtocolError, PathError) as exc:
                    pacer.enqueue(0.0, wire.ERROR, {"code": "protocol", "detail": str(exc)})
        except (wire.WireError, ConnectionError) as exc:
            log.debug("connection dropped: %s", exc)
        finally:
            if sub in self.subs:
                self.subs.remove(sub)
            pacer.stop()
            self.counters.untrack(conn)
            if conn in self._conns:
                self._conns.remove(conn)
            conn.close()

    def _dispatch(self, conn, pacer, sub, kind: int, body: bytes):
        loop = asyncio.get_running_loop()
        if kind == wire.DB_PUT:
            self._put(loop.time(), pacer, wire.decode_json_body(body), len(body))
        elif kind == wire.DB_SUBSCRIBE:
            doc = wire.decode_json_body(body)
            prefix_segs = split_path(str(doc["prefix"]), allow_trailing_slash=True)
            if sub in self.subs:
                self.subs.remove(sub)
            sub = Subscription(str(doc["client"]), prefix_segs, pacer)
            self.subs.append(sub)
            pacer.enqueue(
                0.0,
                wire.DB_EVENT,
                {
                    "kind": "snapshot",
                    "path": "/".join(prefix_segs),
                    "value": self.tree.subtree(prefix_segs),
                    "version": self.version,
                    "origin_msg_id": None,
                },
            )
        elif kind == wire.DB_RESET:
            self.reset()
            pacer.enqueue(0.0, wire.DB_RESET, {})
        else:
            raise wire.ProtocolError(f"unexpected frame kind 0x{kind:02X} at cloudsim")
        return sub

    def _put(self, now: float, pacer: _Pacer, doc: dict, body_len: int) -> None:
        path = str(doc["path"])
        msg_id = str(doc["msg_id"])
        value = doc["value"]
        if not isinstance(value, dict):
            raise wire.ProtocolError("value must be a JSON object")
        path_segs = split_path(path)  # raises PathError on malformed paths

        if msg_id in self.dedup:
            self.stats.duplicates += 1
            pacer.enqueue(0.0, wire.DB_PUT_ACK, {"version": self.dedup[msg_id]})
            return

        wan_req = self._wan_s()
        wan_ack = self._wan_s()
        sync_channel = doc.get("chan") == "sync"
        done = self.pipeline.offer(now, wan_req, body_len / 1024.0, sync_channel)
        if done is None:
            self.stats.overloaded += 1
            self.stats.overload_msg_ids.append(msg_id)
            pacer.enqueue(now + wan_req + wan_ack, wire.DB_PUT_ACK, {"error": "overload"})
            return

        self.version += 1
        version = self.version
        self.dedup[msg_id] = version
        self.tree.put(path, value)
        self.stats.accepted += 1
        pacer.enqueue(done + wan_ack, wire.DB_PUT_ACK, {"version": version})
        event = {
            "kind": "write",
            "path": path,
            "value": value,
            "version": version,
            "origin_msg_id": msg_id,
        }
        for s in self.subs:
            if path_segs[: len(s.prefix_segs)] == s.prefix_segs:
                s.pacer.enqueue(done + self._wan_s(), wire.DB_EVENT, event)
                s.events_sent += 1

    def reset(self) -> None:
        self.tree.clear()
        self.dedup.clear()
        self.subs.clear()
        self.pipeline = self._new_pipeline()
        self.stats = CloudStats()
        # self.version deliberately kept: versions are never reused


class CloudClient:
    """Asyncio client: pipelined puts (FIFO acks) plus an event stream."""

    def __init__(self):
        self.conn: wire.FrameConn | None = None
        self.events: asyncio.Queue = asyncio.Queue()
        self._pending: asyncio.Queue | None = None
        self._reader_task = None
        self._dead: str | None = None
        self.closed = asyncio.Event()

    async def connect(self, host: str, port: int) -> None:
        reader, writer = await asyncio.open_connection(host, port)
        self.conn = wire.FrameConn(reader, writer)
        self._pending = asyncio.Queue()
        self.closed = asyncio.Event()
        self._reader_task = asyncio.create_task(self._read_loop())

    async def _read_loop(self) -> None:
        try:
            while True:
                kind, body = await self.conn.read_frame()
                doc = wire.decode_json_body(body)
                if kind == wire.DB_EVENT:
                    self.events.put_nowait(doc)
                else:
                    fut = self._pending.get_nowait()
                    if not fut.done():
                        fut.set_result((kind, doc))
        except (asyncio.IncompleteReadError, ConnectionError, wire.WireError) as exc:
            self._dead = str(exc)
            while not self._pending.empty():
                fut = self._pending.get_nowait()
                if not fut.done():
                    fut.set_exception(ConnectionError(f"cloud connection lost: {exc}"))
            self.events.put_nowait(None)  # end-of-stream marker
            self.closed.set()
        except asyncio.CancelledError:
            pass

    def put_nowait(self, path: str, value: dict, msg_id: str, chan: str | None = None) -> asyncio.Future:
        if self._dead is not None:
            raise ConnectionError(f"cloud connection lost: {self._dead}")
        obj = {"path": path, "value": value, "msg_id": msg_id}
        if chan:
            obj["chan"] = chan
        fut = asyncio.get_running_loop().create_future()
        self._pending.put_nowait(fut)
        self.conn.write_json_frame(wire.DB_PUT, obj)
        return fut

    async def put(self, path: str, value: dict, msg_id: str, chan: str | None = None) -> dict:
        """Returns the ack document: {"version": int} or {"error": "overload"}."""
        kind, doc = await self.put_nowait(path, value, msg_id, chan)
        if kind == wire.ERROR:
            raise wire.ProtocolError(doc.get("detail", "protocol error"))
        return doc

    def subscribe_nowait(self, client_id: str, prefix: str) -> None:
        self.conn.write_json_frame(wire.DB_SUBSCRIBE, {"client": client_id, "prefix": prefix})

    async def subscribe(self, client_id: str, prefix: str) -> dict:
        """Subscribe and return the initial snapshot event."""
        self.subscribe_nowait(client_id, prefix)
        event = await self.events.get()
        if event is None or event.get("kind") != "snapshot":
            raise wire.ProtocolError(f"expected snapshot event, got {event!r}")
        return event

    async def reset(self) -> None:
        fut = asyncio.get_running_loop().create_future()
        self._pending.put_nowait(fut)
        self.conn.write_json_frame(wire.DB_RESET, {})
        kind, _ = await fut
        if kind != wire.DB_RESET:
            raise wire.ProtocolError(f"unexpected reset ack kind 0x{kind:02X}")

    async def close(self) -> None:
        if self._reader_task:
            self._reader_task.cancel()
        if self.conn:
            self.conn.close()
            await self.conn.wait_closed()
