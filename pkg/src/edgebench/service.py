"""Shared plumbing for the harness's long-running component processes.

Each component process periodically dumps its transport-layer byte
counters to `<run_dir>/<name>.net.json` so the resource sampler can report
application-level network I/O without scraping OS interface counters.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import signal
from pathlib import Path

log = logging.getLogger(__name__)

STATS_DUMP_INTERVAL_S = 0.5


def setup_logging(run_dir: str | Path | None, name: str) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if run_dir:
        handlers.append(logging.FileHandler(Path(run_dir) / f"{name}.log"))
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        handlers=handlers,
        force=True,
    )


class NetCounters:
    """Aggregates byte counters across all of a component's connections."""

    def __init__(self):
        self.closed_in = 0
        self.closed_out = 0
        self.live = []  # FrameConn objects currently open

    def track(self, conn) -> None:
        self.live.append(conn)

    def untrack(self, conn) -> None:
        if conn in self.live:
            self.live.remove(conn)
            self.closed_in += conn.bytes_in
            self.closed_out += conn.bytes_out

    def totals(self) -> tuple[int, int]:
        total_in = self.closed_in + sum(c.bytes_in for c in self.live)
        total_out = self.closed_out + sum(c.bytes_out for c in self.live)
        return total_in, total_out


async def stats_dump_loop(name: str, run_dir: str | Path, counters: NetCounters) -> None:
    """Atomically rewrite <name>.net.json at a fixed cadence until cancelled."""
    path = Path(run_dir) / f"{name}.net.json"
    tmp = path.with_suffix(".json.tmp")
    while True:
        net_in, net_out = counters.totals()
        tmp.write_text(json.dumps({"pid": os.getpid(), "net_in": net_in, "net_out": net_out}))
        tmp.replace(path)
        await asyncio.sleep(STATS_DUMP_INTERVAL_S)


def install_stop_signal(loop: asyncio.AbstractEventLoop, stop: asyncio.Event) -> None:
    for sig in (signal.SIGTERM, signal.SIGINT):
        loop.add_signal_handler(sig, stop.set)


def write_ready_file(run_dir: str | Path | None, name: str, port: int) -> None:
    if run_dir:
        Path(run_dir, f"{name}.ready").write_text(str(port))
