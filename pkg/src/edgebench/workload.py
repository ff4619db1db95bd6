"""Open-loop load generator and end-to-end latency receiver.

Simulates U concurrent users as coroutines on one event loop. Each user
draws inter-arrival gaps from a truncated normal distribution and sends
on an absolute schedule anchored at run start, so send times never drift
with processing load and never wait on receive progress.

All senders share one ordered connection per endpoint (the "funnel"):
dispatch order is the event loop's deadline order, which makes broker
offsets and cloud version assignments reproducible for fixed seeds.

The receiver is scenario-specific: an offset-0 fetch loop against the
broker (edge_only) or a push subscription on the `runs` prefix of the
cloud emulator (cloud_only, edge_cloud). Every arrival is deduplicated by
msg_id; one LatencySample row is written per unique message.

Artifacts written into the run directory:
    samples.csv       run_id,scenario,payload_bytes,users,user_id,seq,msg_id,sent_ns,recv_ns,latency_ns
    sendlog.csv       run_id,user_id,seq,sent_ns,status
    cloud_events.csv  msg_id,version,path          (cloud scenarios only)
    recv_report.json  conservation counters and receiver stats
    senders_done      marker file, written the moment the last send fires
"""

from __future__ import annotations

import asyncio
import csv
import json
import logging
import random
import time
from pathlib import Path

from . import wire
from .aggregator import identification_path
from .broker import BrokerClient
from .cloudsim import CloudClient
from .config import Config
from .service import NetCounters, stats_dump_loop

log = logging.getLogger(__name__)

SAMPLES_CSV_HEADER = [
    "run_id", "scenario", "payload_bytes", "users", "user_id", "seq",
    "msg_id", "sent_ns", "recv_ns", "latency_ns",
]
SENDLOG_CSV_HEADER = ["run_id", "user_id", "seq", "sent_ns", "status"]
PAYLOAD_KEYS = {"id", "user", "seq", "sent_ns", "pad"}


def next_interarrival(rng: random.Random, mean_ms: float, sigma_ms: float) -> float:
    """Normal(mean, sigma) draw in ms, redrawn while negative."""
    if sigma_ms == 0:
        return mean_ms
    while True:
        d = rng.gauss(mean_ms, sigma_ms)
        if d >= 0:
            return d


async def sleep_until(deadline: float) -> None:
    """Sleep to an absolute loop-time deadline via the timer heap.

    asyncio.sleep(delta) would re-anchor the deadline at call time, which
    jitters wake order between users with nearby deadlines; call_at keeps
    wake order equal to deadline order even when the loop runs behind,
    which the send-schedule determinism contract depends on.
    """
    loop = asyncio.get_running_loop()
    fut = loop.create_future()
    handle = loop.call_at(deadline, fut.set_result, None)
    try:
        await fut
    finally:
        handle.cancel()


class WorkloadRun:
    def __init__(self, cfg: Config, run_dir: str | Path, run_id: str):
        self.cfg = cfg
        self.w = cfg.workload
        self.run_dir = Path(run_dir)
        self.run_id = run_id
        self.counters = NetCounters()
        self.sampled: set[tuple[int, int]] = set()
        self.errored: set[tuple[int, int]] = set()
        self.overloaded: set[tuple[int, int]] = set()
        self.overload_msg_ids: list[str] = []
        self.seen_msg_ids: set[str] = set()
        self.dups_dropped = 0
        self.unparseable = 0
        self.reconnects = 0
        self.snapshot_harvested = 0
        self.sends_done = 0
        self._stop_receiver = False
        self._t0_mono_ns = 0
        self._samples_fh = None
        self._samples_csv = None
        self._events_fh = None
        self._events_csv = None
        self.sendlog_rows: list[tuple[int, int, int, str]] = []

    # -- sample sink (single writer) --------------------------------------

    def _open_outputs(self) -> None:
        self._samples_fh = open(self.run_dir / "samples.csv", "w", newline="")
        self._samples_csv = csv.writer(self._samples_fh)
        self._samples_csv.writerow(SAMPLES_CSV_HEADER)
        if self.w.scenario != "edge_only":
            self._events_fh = open(self.run_dir / "cloud_events.csv", "w", newline="")
            self._events_csv = csv.writer(self._events_fh)
            self._events_csv.writerow(["msg_id", "version", "path"])

    def _record_arrival(self, obj: dict, recv_ns: int, version: int | None, path: str) -> None:
        if not isinstance(obj, dict) or set(obj) != PAYLOAD_KEYS:
            self.unparseable += 1
            return
        try:
            msg_id = str(obj["id"])
            user_id = int(obj["user"])
            seq = int(obj["seq"])
            sent_ns = int(obj["sent_ns"])
        except (ValueError, TypeError):
            self.unparseable += 1
            return
        if msg_id in self.seen_msg_ids:
            self.dups_dropped += 1
            return
        self.seen_msg_ids.add(msg_id)
        self.sampled.add((user_id, seq))
        self._samples_csv.writerow(
            [
                self.run_id, self.w.scenario, self.w.payload_bytes, self.w.users,
                user_id, seq, msg_id, sent_ns, recv_ns, recv_ns - sent_ns,
            ]
        )
        if self._events_csv is not None and version is not None:
            self._events_csv.writerow([msg_id, version, path])

    # -- senders -----------------------------------------------------------

    async def _user_task(self, uid: int, send_fn) -> None:
        rng = random.Random(f"{self.cfg.seeds.workload}:u{uid}")
        t0 = self._t0_loop
        cum_ms = 0.0
        for seq in range(self.w.requests_per_user):
            cum_ms += next_interarrival(rng, self.w.interarrival_mean_ms, self.w.interarrival_sigma_ms)
            await sleep_until(t0 + cum_ms / 1000.0)
            sent_ns = time.monotonic_ns()
            msg_id = wire.derive_msg_id(self.cfg.seeds.workload, uid, seq)
            env = wire.build_payload(
                uid, seq, sent_ns, self.w.payload_bytes, msg_id, self.w.topic
            )
            status = "sent"
            try:
                send_fn(env, uid, seq)
            except Exception as exc:  # connection gone: record, keep the schedule
                status = "error:send"
                self.errored.add((uid, seq))
                log.debug("send failed for u%d seq %d: %s", uid, seq, exc)
            self.sendlog_rows.append((uid, seq, sent_ns, status))
            self.sends_done += 1

    def _make_send_fn(self):
        if self.w.scenario == "cloud_only":
            cloud = self._sender_cloud

            def send_cloud(env: wire.Envelope, uid: int, seq: int):
                fut = cloud.put_nowait(
                    identification_path(env), json.loads(env.payload), env.msg_id
                )
                fut.add_done_callback(self._cloud_ack_cb(env.msg_id, uid, seq))

            return send_cloud

        broker = self._sender_broker

        def send_edge(env: wire.Envelope, uid: int, seq: int):
            fut = broker.produce_nowait(self.w.topic, env.payload)
            fut.add_done_callback(self._produce_ack_cb(uid, seq))

        return send_edge

    def _cloud_ack_cb(self, msg_id: str, uid: int, seq: int):
        def cb(fut: asyncio.Future):
            if fut.cancelled() or fut.exception() is not None:
                self.errored.add((uid, seq))
                return
            kind, doc = fut.result()
            if kind == wire.ERROR:
                self.errored.add((uid, seq))
            elif doc.get("error") == "overload":
                self.overloaded.add((uid, seq))
                self.overload_msg_ids.append(msg_id)

        return cb

    def _produce_ack_cb(self, uid: int, seq: int):
        def cb(fut: asyncio.Future):
            if fut.cancelled() or fut.exception() is not None or fut.result()[0] == wire.ERROR:
                self.errored.add((uid, seq))

        return cb

    # -- receivers ---------------------------------------------------------

    async def _receiver_edge(self) -> None:
        client = BrokerClient()
        await client.connect(*self.cfg.broker_addr())
        self.counters.track(client.conn)
        next_offset = 0
        try:
            while not self._stop_receiver:
                try:
                    records, _ = await client.fetch(
                        self.w.topic, next_offset,
                        max_records=self.w.fetch_max_records,
                        wait_ms=self.w.fetch_wait_ms,
                    )
                except ConnectionError:
                    self.reconnects += 1
                    self.counters.untrack(client.conn)
                    client = BrokerClient()
                    while not self._stop_receiver:
                        try:
                            await client.connect(*self.cfg.broker_addr())
                            self.counters.track(client.conn)
                            break
                        except OSError:
                            await asyncio.sleep(0.2)
                    continue
                for offset, env_bytes in records:
                    recv_ns = time.monotonic_ns()
                    next_offset = max(next_offset, offset + 1)
                    try:
                        obj = json.loads(env_bytes)
                    except ValueError:
                        self.unparseable += 1
                        continue
                    self._record_arrival(obj, recv_ns, None, "")
        finally:
            self.counters.untrack(client.conn)
            await client.close()

    def _harvest_snapshot(self, node, path: str) -> None:
        """Collect payload objects already present when (re)subscribing."""
        if isinstance(node, dict):
            if set(node) == PAYLOAD_KEYS:
                before = len(self.sampled)
                self._record_arrival(node, time.monotonic_ns(), None, path)
                self.snapshot_harvested += len(self.sampled) - before
                return
            for key, child in node.items():
                self._harvest_snapshot(child, f"{path}/{key}" if path else key)

    async def _receiver_cloud(self) -> None:
        client = CloudClient()
        await client.connect(*self.cfg.cloud_addr())
        self.counters.track(client.conn)
        snapshot = await client.subscribe("tester", "runs")
        self._harvest_snapshot(snapshot.get("value"), snapshot.get("path", ""))
        try:
            while not self._stop_receiver:
                try:
                    event = await asyncio.wait_for(client.events.get(), timeout=0.5)
                except asyncio.TimeoutError:
                    continue
                if event is None:  # stream lost: re-subscribe, fresh snapshot
                    if self._stop_receiver:
                        return
                    self.reconnects += 1
                    self.counters.untrack(client.conn)
                    client = CloudClient()
                    while True:
                        try:
                            await client.connect(*self.cfg.cloud_addr())
                            break
                        except OSError:
                            await asyncio.sleep(0.2)
                    self.counters.track(client.conn)
                    snapshot = await client.subscribe("tester", "runs")
                    self._harvest_snapshot(snapshot.get("value"), snapshot.get("path", ""))
                    continue
                if event.get("kind") != "write":
                    continue
                self._record_arrival(
                    event.get("value"),
                    time.monotonic_ns(),
                    int(event["version"]),
                    str(event.get("path", "")),
                )
        finally:
            self.counters.untrack(client.conn)
            await client.close()

    # -- run ---------------------------------------------------------------

    def _accounted(self) -> int:
        return len(self.sampled | self.errored | self.overloaded)

    async def run(self) -> dict:
        loop = asyncio.get_running_loop()
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._open_outputs()

        scenario = self.w.scenario
        self._sender_broker = None
        self._sender_cloud = None
        if scenario == "cloud_only":
            self._sender_cloud = CloudClient()
            await self._sender_cloud.connect(*self.cfg.cloud_addr())
            self.counters.track(self._sender_cloud.conn)
        else:
            self._sender_broker = BrokerClient()
            await self._sender_broker.connect(*self.cfg.broker_addr())
            self.counters.track(self._sender_broker.conn)

        receiver = self._receiver_edge if scenario == "edge_only" else self._receiver_cloud
        receiver_task = asyncio.create_task(receiver())
        stats_task = asyncio.create_task(
            stats_dump_loop("workload", self.run_dir, self.counters)
        )

        await asyncio.sleep(0.05)  # let the subscription/fetch loop settle
        self._t0_mono_ns = time.monotonic_ns()
        self._t0_loop = loop.time()
        send_fn = self._make_send_fn()
        user_tasks = [
            asyncio.create_task(self._user_task(uid, send_fn))
            for uid in range(self.w.users)
        ]
        await asyncio.gather(*user_tasks)
        (self.run_dir / "senders_done").write_text(str(time.monotonic_ns()))
        log.info("all %d senders finished (%d sends)", self.w.users, self.sends_done)

        # Receiver quiescence: done when every request is accounted for, or
        # when nothing new has arrived for the grace window.
        expected = self.w.users * self.w.requests_per_user
        last_state = -1
        last_change = loop.time()
        done_reason = "complete"
        while True:
            state = self._accounted()
            if state >= expected:
                break
            if state != last_state:
                last_state = state
                last_change = loop.time()
            elif loop.time() - last_change > self.w.grace_s:
                done_reason = "grace_elapsed"
                break
            await asyncio.sleep(0.25)

        self._stop_receiver = True
        await asyncio.wait_for(receiver_task, timeout=10)
        stats_task.cancel()

        if self._sender_broker:
            self.counters.untrack(self._sender_broker.conn)
            await self._sender_broker.close()
        if self._sender_cloud:
            self.counters.untrack(self._sender_cloud.conn)
            await self._sender_cloud.close()

        return self._finalize(expected, done_reason)

    def _finalize(self, expected: int, done_reason: str) -> dict:
        with open(self.run_dir / "sendlog.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SENDLOG_CSV_HEADER)
            for uid, seq, sent_ns, status in self.sendlog_rows:
                w.writerow([self.run_id, uid, seq, sent_ns, status])
        self._samples_fh.close()
        if self._events_fh:
            self._events_fh.close()

        send_errors = self.errored - self.sampled
        overloaded = self.overloaded - self.sampled - send_errors
        report = {
            "run_id": self.run_id,
            "scenario": self.w.scenario,
            "issued": len(self.sendlog_rows),
            "expected": expected,
            "samples": len(self.sampled),
            "send_errors": len(send_errors),
            "overloads": len(overloaded),
            "overload_msg_ids": sorted(self.overload_msg_ids),
            "unreceived": expected - len(self.sampled) - len(send_errors),
            "dups_dropped": self.dups_dropped,
            "unparseable": self.unparseable,
            "reconnects": self.reconnects,
            "snapshot_harvested": self.snapshot_harvested,
            "t0_mono_ns": self._t0_mono_ns,
            "done_reason": done_reason,
        }
        (self.run_dir / "recv_report.json").write_text(json.dumps(report, indent=2))
        log.info(
            "workload done: %d/%d samples, %d send errors, %d overloads, %d dups (%s)",
            report["samples"], expected, report["send_errors"],
            report["overloads"], report["dups_dropped"], done_reason,
        )
        return report


async def run_workload(cfg: Config, run_dir: str | Path, run_id: str) -> dict:
    return await WorkloadRun(cfg, run_dir, run_id).run()
