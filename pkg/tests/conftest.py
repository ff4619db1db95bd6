"""Shared helpers: in-process servers for fast tests, subprocess spawning
for crash/restart tests, and an acceptance PASS/FAIL line printer."""

import asyncio
import contextlib
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from edgebench.broker import BrokerServer, BrokerState
from edgebench.cloudsim import CloudServer
from edgebench.config import CloudConfig


def run_async(coro, timeout=120):
    return asyncio.run(asyncio.wait_for(coro, timeout))


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@contextlib.asynccontextmanager
async def broker_server(data_dir, flush_every=1, fault_dup_every=0):
    state = BrokerState(data_dir, flush_every)
    server = BrokerServer(state, port=0, fault_dup_every=fault_dup_every)
    await server.start()
    try:
        yield server
    finally:
        await server.stop()


@contextlib.asynccontextmanager
async def cloud_server(seed=1, **model_kwargs):
    cfg = CloudConfig(port=0, **model_kwargs)
    server = CloudServer(cfg, seed=seed)
    await server.start()
    try:
        yield server
    finally:
        await server.stop()


def fast_cloud_kwargs(**overrides):
    """Model parameters that make unit tests quick and near-deterministic."""
    kwargs = dict(
        workers=64,
        service_ms_base=1.0,
        service_ms_per_kb=0.0,
        http_overhead_ms=0.0,
        wan_median_ms=0.0,
        wan_sigma=0.0,
        queue_capacity=4096,
    )
    kwargs.update(overrides)
    return kwargs


def spawn_component(role: str, run_dir: Path, run_id: str = "test") -> subprocess.Popen:
    cmd = [
        sys.executable, "-m", "edgebench.cli", f"serve-{role}",
        "--runconfig", str(run_dir / "runconfig.json"),
        "--run-dir", str(run_dir),
        "--run-id", run_id,
    ]
    out = open(run_dir / f"{role}.stdio.log", "w")
    return subprocess.Popen(cmd, stdout=out, stderr=subprocess.STDOUT)


def wait_ready(run_dir: Path, role: str, proc, timeout=20.0) -> None:
    deadline = time.monotonic() + timeout
    ready = run_dir / f"{role}.ready"
    while time.monotonic() < deadline:
        if ready.exists():
            return
        assert proc.poll() is None, f"{role} died before ready"
        time.sleep(0.05)
    raise TimeoutError(f"{role} not ready")


@pytest.fixture
def acceptance_line(request):
    """Prints one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def check(name: str):
        try:
            yield
        except BaseException:
            print(f"\nACCEPTANCE {name}: FAIL")
            raise
        print(f"\nACCEPTANCE {name}: PASS")

    return check
