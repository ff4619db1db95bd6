"""Broker-to-cloud bridge with local-first buffering.

Consumes broker topics, enqueues every record into a durable FIFO, and
only then commits the broker offset: the queue, not the cloud ack, is
what makes a record safe. A separate drain task pushes queue entries to
the cloud over a bounded concurrent window, retrying overloads with
exponential backoff; writes carry their envelope msg_id so retries are
idempotent on the cloud side.

The queue file format reuses the wire codec (one frame per entry); the
acked-prefix count lives in a sidecar file rewritten atomically, so a
crash at any point only ever causes re-sends, never loss.
"""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import random
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from . import wire
from .broker import BrokerClient, BrokerError
from .cloudsim import CloudClient
from .config import AggConfig
from .service import NetCounters

log = logging.getLogger(__name__)

GROUP = "agg"
QUEUE_FILE = "queue.log"
ACK_FILE = "queue.ack"


def identification_path(env: wire.Envelope) -> str:
    return f"runs/u{env.user_id:06d}/{env.seq:06d}"


@dataclass
class _Entry:
    topic: str
    offset: int
    envelope: bytes
    state: str = "pending"  # pending | inflight | acked
    attempt: int = 0
    eligible_at: float = 0.0


class SyncQueue:
    """Durable FIFO of records awaiting cloud sync."""

    def __init__(self, queue_dir: str | Path):
        self.dir = Path(queue_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.entries: deque[_Entry] = deque()  # un-acked head section only
        self.head_seq = 0  # global index of entries[0]
        self.enqueued_total = 0
        self.synced_total = 0
        self.high_water: dict[str, int] = {}  # topic -> max offset ever enqueued
        self._fh = None
        self._load()

    def _load(self) -> None:
        ack_path = self.dir / ACK_FILE
        acked = int(ack_path.read_text()) if ack_path.exists() else 0
        log_path = self.dir / QUEUE_FILE
        seq = 0
        if log_path.exists():
            data = log_path.read_bytes()
            pos = 0
            while pos < len(data):
                try:
                    _, body, rest = wire.decode_frame(data[pos:])
                except wire.IncompleteFrame:
                    log.warning("truncating partial queue entry at byte %d", pos)
                    with open(log_path, "r+b") as fh:
                        fh.truncate(pos)
                    break
                doc = wire.decode_json_body(body)
                topic, offset = doc["topic"], int(doc["offset"])
                self.high_water[topic] = max(self.high_water.get(topic, -1), offset)
                if seq >= acked:
                    env = base64.b64decode(doc["envelope"])
                    self.entries.append(_Entry(topic, offset, env))
                seq += 1
                pos = len(data) - len(rest)
        self.head_seq = acked
        self.enqueued_total = seq
        self.synced_total = acked
        self._fh = open(log_path, "ab")

    def append(self, topic: str, offset: int, envelope: bytes) -> None:
        record = wire.encode_json_frame(
            wire.PRODUCE,
            {
                "topic": topic,
                "offset": offset,
                "envelope": base64.b64encode(envelope).decode("ascii"),
            },
        )
        self._fh.write(record)
        self._fh.flush()
        self.entries.append(_Entry(topic, offset, envelope))
        self.high_water[topic] = max(self.high_water.get(topic, -1), offset)
        self.enqueued_total += 1

    def advance(self) -> int:
        """Pop the contiguous acked prefix; returns entries released."""
        n = 0
        while self.entries and self.entries[0].state == "acked":
            self.entries.popleft()
            self.head_seq += 1
            self.synced_total += 1
            n += 1
        return n

    def persist_ack(self) -> None:
        tmp = self.dir / (ACK_FILE + ".tmp")
        tmp.write_text(str(self.head_seq))
        tmp.replace(self.dir / ACK_FILE)

    @property
    def remaining(self) -> int:
        return len(self.entries)

    def compact_if_empty(self) -> None:
        if self.entries:
            return
        self._fh.close()
        (self.dir / QUEUE_FILE).unlink(missing_ok=True)
        (self.dir / ACK_FILE).unlink(missing_ok=True)
        self.head_seq = 0
        self._fh = open(self.dir / QUEUE_FILE, "ab")

    def close(self) -> None:
        self.persist_ack()
        if self._fh:
            self._fh.close()


class Aggregator:
    def __init__(self, cfg: AggConfig, broker_addr: tuple[str, int], cloud_addr: tuple[str, int],
                 queue_dir: str | Path, rng_seed: int = 0):
        self.cfg = cfg
        self.broker_addr = broker_addr
        self.cloud_addr = cloud_addr
        self.queue = SyncQueue(queue_dir)
        self.rng = random.Random(rng_seed)
        self.counters = NetCounters()
        self.broker: BrokerClient | None = None
        self.cloud: CloudClient | None = None
        self._cloud_ok = asyncio.Event()
        self._work = asyncio.Event()
        self._stop_consume = asyncio.Event()
        self.failed = 0
        self.overload_retries = 0
        self.reconnects = 0
        self.order_violations = 0
        self._last_seq: dict[int, int] = {}
        self._inflight = 0

    # -- connection management ------------------------------------------

    async def _connect_broker(self) -> None:
        delay = self.cfg.retry_base_ms / 1000.0
        while True:
            try:
                self.broker = BrokerClient()
                await self.broker.connect(*self.broker_addr)
                self.counters.track(self.broker.conn)
                return
            except OSError:
                await asyncio.sleep(delay)
                delay = min(delay * self.cfg.retry_factor, self.cfg.retry_cap_ms / 1000.0)

    async def _connect_cloud(self) -> None:
        delay = self.cfg.retry_base_ms / 1000.0
        while True:
            try:
                self.cloud = CloudClient()
                await self.cloud.connect(*self.cloud_addr)
                self.counters.track(self.cloud.conn)
                self._cloud_ok.set()
                return
            except OSError:
                self.reconnects += 1
                await asyncio.sleep(delay)
                delay = min(delay * self.cfg.retry_factor, self.cfg.retry_cap_ms / 1000.0)

    def _backoff_s(self, attempt: int) -> float:
        base = self.cfg.retry_base_ms * (self.cfg.retry_factor ** max(0, attempt - 1))
        base = min(base, self.cfg.retry_cap_ms)
        jitter = 1.0 + self.rng.uniform(-self.cfg.retry_jitter, self.cfg.retry_jitter)
        return base * jitter / 1000.0

    # -- consume side ----------------------------------------------------

    async def consume_loop(self) -> None:
        await self._connect_broker()
        next_offset: dict[str, int] = {}
        for topic in self.cfg.topics:
            committed = await self._with_broker_retry(self.broker.committed, GROUP, topic)
            next_offset[topic] = max(committed, self.queue.high_water.get(topic, -1) + 1)
        while not self._stop_consume.is_set():
            progressed = False
            for topic in self.cfg.topics:
                try:
                    records, _ = await self.broker.fetch(
                        topic, next_offset[topic], max_records=500, wait_ms=200
                    )
                except (ConnectionError, BrokerError) as exc:
                    log.warning("broker fetch failed (%s), reconnecting", exc)
                    await self._connect_broker()
                    continue
                if not records:
                    continue
                for offset, env_bytes in records:
                    if offset < next_offset[topic]:
                        continue  # duplicate delivery, already enqueued
                    env = wire.Envelope.from_payload(env_bytes, topic)
                    if env.seq <= self._last_seq.get(env.user_id, -1):
                        self.order_violations += 1
                        log.warning(
                            "per-user order violation: user=%d seq=%d", env.user_id, env.seq
                        )
                    else:
                        self._last_seq[env.user_id] = env.seq
                    self.queue.append(topic, offset, env_bytes)
                    next_offset[topic] = offset + 1
                await self._with_broker_retry(
                    self.broker.commit, GROUP, topic, next_offset[topic]
                )
                progressed = True
                self._work.set()
            if not progressed:
                await asyncio.sleep(0)  # yield; fetch long-polls already waited

    async def _with_broker_retry(self, fn, *args):
        while True:
            try:
                return await fn(*args)
            except (ConnectionError, BrokerError) as exc:
                if isinstance(exc, BrokerError):
                    raise
                log.warning("broker call failed (%s), reconnecting", exc)
                await self._connect_broker()

    # -- drain side ------------------------------------------------------

    def _dispatch(self, entry: _Entry, loop: asyncio.AbstractEventLoop) -> None:
        env = wire.Envelope.from_payload(entry.envelope, entry.topic)
        entry.state = "inflight"
        self._inflight += 1
        fut = self.cloud.put_nowait(
            identification_path(env), json.loads(env.payload), env.msg_id, chan="sync"
        )
        fut.add_done_callback(lambda f: self._on_ack(entry, f, loop))

    def _on_ack(self, entry: _Entry, fut: asyncio.Future, loop) -> None:
        self._inflight -= 1
        exc = fut.exception() if not fut.cancelled() else None
        if fut.cancelled() or exc is not None:
            entry.state = "pending"
            entry.eligible_at = loop.time() + self.cfg.retry_base_ms / 1000.0
            if exc is not None and not self._reconnecting():
                self._cloud_ok.clear()
                asyncio.ensure_future(self._reconnect_cloud())
        else:
            kind, doc = fut.result()
            if kind == wire.DB_PUT_ACK and "version" in doc:
                entry.state = "acked"
                self.queue.advance()
            elif doc.get("error") == "overload":
                self.overload_retries += 1
                entry.attempt += 1
                entry.state = "pending"
                entry.eligible_at = loop.time() + self._backoff_s(entry.attempt)
            else:
                # permanent rejection: count as failed, drop from the queue
                log.error("cloud rejected write permanently: %s", doc)
                entry.state = "acked"
                self.failed += 1
                self.queue.synced_total -= 1
                self.queue.advance()
        self._work.set()

    def _reconnecting(self) -> bool:
        return not self._cloud_ok.is_set()

    async def _reconnect_cloud(self) -> None:
        self.reconnects += 1
        try:
            await self.cloud.close()
        except Exception:
            pass
        await asyncio.sleep(self.cfg.retry_base_ms / 1000.0)
        await self._connect_cloud()
        self._work.set()

    async def drain_loop(self) -> None:
        await self._connect_cloud()
        loop = asyncio.get_running_loop()
        persist_counter = 0
        while True:
            self._work.clear()
            now = loop.time()
            next_eligible = None
            if self._cloud_ok.is_set():
                window = 0
                for entry in self.queue.entries:
                    if window >= self.cfg.batch_max:
                        break
                    if entry.state == "acked":
                        continue
                    window += 1
                    if entry.state == "pending":
                        if entry.eligible_at <= now:
                            self._dispatch(entry, loop)
                        elif next_eligible is None or entry.eligible_at < next_eligible:
                            next_eligible = entry.eligible_at
            released = self.queue.advance()
            if released:
                persist_counter += released
                if persist_counter >= 500:
                    self.queue.persist_ack()
                    persist_counter = 0
            timeout = max(self.cfg.flush_interval_ms, 1) / 1000.0
            if next_eligible is not None:
                timeout = min(timeout, max(next_eligible - now, 0.001))
            try:
                await asyncio.wait_for(self._work.wait(), timeout=timeout)
            except asyncio.TimeoutError:
                pass

    # -- lifecycle -------------------------------------------------------

    async def stop_and_drain(self, timeout_ms: int) -> dict:
        """Stop consuming, drain the queue up to the timeout, report counts."""
        self._stop_consume.set()
        deadline = time.monotonic() + timeout_ms / 1000.0
        while self.queue.remaining > 0 and time.monotonic() < deadline:
            await asyncio.sleep(0.05)
        self.queue.persist_ack()
        report = {
            "enqueued": self.queue.enqueued_total,
            "synced": self.queue.synced_total,
            "failed": self.failed,
            "remaining": self.queue.remaining,
            "order_violations": self.order_violations,
            "overload_retries": self.overload_retries,
            "reconnects": self.reconnects,
        }
        assert report["enqueued"] == report["synced"] + report["failed"] + report["remaining"]
        return report

    async def close(self) -> None:
        self.queue.compact_if_empty()
        self.queue.close()
        if self.broker:
            await self.broker.close()
        if self.cloud:
            await self.cloud.close()
