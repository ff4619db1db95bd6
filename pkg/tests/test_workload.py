"""Load generator tests: inter-arrival statistics, scenario wiring,
conservation accounting, dedup, send-schedule determinism."""

import asyncio
import csv
import json
import random

import pytest

from edgebench import wire
from edgebench.aggregator import Aggregator
from edgebench.config import Config
from edgebench.workload import (
    SAMPLES_CSV_HEADER,
    SENDLOG_CSV_HEADER,
    next_interarrival,
    run_workload,
)

from conftest import broker_server, cloud_server, fast_cloud_kwargs, run_async


# -- inter-arrival draws -------------------------------------------------------


def test_interarrival_sigma_zero_constant():
    rng = random.Random(1)
    assert {next_interarrival(rng, 1000, 0) for _ in range(100)} == {1000}


def test_interarrival_mean_converges():
    rng = random.Random(2)
    n = 10**6
    total = sum(next_interarrival(rng, 1000, 100) for _ in range(n))
    assert abs(total / n - 1000) / 1000 < 0.005


def test_interarrival_never_negative_and_seeded():
    a = [next_interarrival(random.Random(3), 10, 50) for _ in range(1000)]
    b = [next_interarrival(random.Random(3), 10, 50) for _ in range(1000)]
    assert a == b
    assert all(x >= 0 for x in a)


# -- helpers ---------------------------------------------------------------------


def fast_config(scenario, users=3, requests=5, mean_ms=20.0, sigma_ms=5.0):
    cfg = Config()
    cfg.workload.scenario = scenario
    cfg.workload.users = users
    cfg.workload.requests_per_user = requests
    cfg.workload.interarrival_mean_ms = mean_ms
    cfg.workload.interarrival_sigma_ms = sigma_ms
    cfg.workload.payload_bytes = 256
    cfg.workload.grace_s = 3.0
    cfg.workload.fetch_wait_ms = 50
    return cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- edge_only -------------------------------------------------------------------


def test_edge_only_collects_every_sample(tmp_path):
    async def scenario():
        async with broker_server(tmp_path / "broker") as broker:
            cfg = fast_config("edge_only")
            cfg.broker.port = broker.port
            return await run_workload(cfg, tmp_path / "run", "edge_only-test")

    report = run_async(scenario())
    assert report["samples"] == 15
    assert report["send_errors"] == 0 and report["unreceived"] == 0
    assert report["dups_dropped"] == 0
    samples = read_csv(tmp_path / "run" / "samples.csv")
    assert len(samples) == 15
    assert list(samples[0].keys()) == SAMPLES_CSV_HEADER
    assert all(int(r["latency_ns"]) >= 0 for r in samples)
    sendlog = read_csv(tmp_path / "run" / "sendlog.csv")
    assert list(sendlog[0].keys()) == SENDLOG_CSV_HEADER
    assert len(sendlog) == 15
    assert (tmp_path / "run" / "senders_done").exists()
    assert not (tmp_path / "run" / "cloud_events.csv").exists()


def test_edge_only_dedups_injected_duplicates(tmp_path):
    async def scenario():
        async with broker_server(tmp_path / "broker", fault_dup_every=4) as broker:
            cfg = fast_config("edge_only")
            cfg.broker.port = broker.port
            return await run_workload(cfg, tmp_path / "run", "dups-test")

    report = run_async(scenario())
    assert report["samples"] == 15  # exactly-once observation
    assert report["dups_dropped"] > 0


def test_dead_endpoint_records_send_errors(tmp_path):
    async def scenario():
        async with broker_server(tmp_path / "broker") as broker:
            cfg = fast_config("edge_only", users=1, requests=20, mean_ms=30, sigma_ms=0)
            cfg.broker.port = broker.port
            cfg.workload.grace_s = 1.0
            task = asyncio.create_task(run_workload(cfg, tmp_path / "run", "dead-test"))
            await asyncio.sleep(0.25)
            await broker.stop()  # endpoint dies mid-run
            return await task

    report = run_async(scenario())
    assert report["send_errors"] > 0
    assert report["samples"] + report["send_errors"] + report["unreceived"] == 20


# -- cloud_only ------------------------------------------------------------------


def test_cloud_only_measures_push_path(tmp_path):
    async def scenario():
        async with cloud_server(**fast_cloud_kwargs(wan_median_ms=5.0)) as cloud:
            cfg = fast_config("cloud_only")
            cfg.cloud.port = cloud.port
            report = await run_workload(cfg, tmp_path / "run", "cloud-test")
            return report, cloud.stats.accepted

    report, accepted = run_async(scenario())
    assert report["samples"] == 15
    assert accepted == 15
    events = read_csv(tmp_path / "run" / "cloud_events.csv")
    assert len(events) == 15
    assert sorted(int(e["version"]) for e in events) == list(range(1, 16))
    samples = read_csv(tmp_path / "run" / "samples.csv")
    # ~10 ms of injected WAN both ways
    assert all(int(r["latency_ns"]) >= 10_000_000 for r in samples)


def test_cloud_only_records_overloads(tmp_path):
    async def scenario():
        async with cloud_server(
            **fast_cloud_kwargs(workers=1, queue_capacity=1, service_ms_base=150.0)
        ) as cloud:
            cfg = fast_config("cloud_only", users=4, requests=4, mean_ms=10, sigma_ms=2)
            cfg.cloud.port = cloud.port
            cfg.workload.grace_s = 2.0
            return await run_workload(cfg, tmp_path / "run", "overload-test")

    report = run_async(scenario())
    assert report["overloads"] > 0
    assert report["samples"] + report["overloads"] == 16
    assert report["unreceived"] == report["overloads"]
    assert len(report["overload_msg_ids"]) == report["overloads"]


# -- edge_cloud -------------------------------------------------------------------


def test_edge_cloud_full_bridge(tmp_path):
    async def scenario():
        async with broker_server(tmp_path / "broker") as broker:
            async with cloud_server(**fast_cloud_kwargs()) as cloud:
                cfg = fast_config("edge_cloud", users=4, requests=10)
                cfg.broker.port = broker.port
                cfg.cloud.port = cloud.port
                agg = Aggregator(
                    cfg.agg, ("127.0.0.1", broker.port), ("127.0.0.1", cloud.port),
                    tmp_path / "queue",
                )
                tasks = [
                    asyncio.create_task(agg.consume_loop()),
                    asyncio.create_task(agg.drain_loop()),
                ]
                report = await run_workload(cfg, tmp_path / "run", "ec-test")
                drain = await agg.stop_and_drain(10_000)
                for t in tasks:
                    t.cancel()
                await asyncio.gather(*tasks, return_exceptions=True)
                await agg.close()
                return report, drain, broker.state.topics["bench"].next_offset

    report, drain, broker_count = run_async(scenario())
    assert report["samples"] == 40
    assert broker_count == 40
    assert drain["enqueued"] == drain["synced"] == 40
    assert drain["remaining"] == 0


def test_scenario_isolation(tmp_path):
    async def scenario():
        async with broker_server(tmp_path / "broker") as broker:
            async with cloud_server(**fast_cloud_kwargs()) as cloud:
                cfg = fast_config("edge_only", users=2, requests=3)
                cfg.broker.port = broker.port
                cfg.cloud.port = cloud.port
                await run_workload(cfg, tmp_path / "run1", "iso-edge")
                edge_cloud_writes = cloud.stats.accepted

                cfg2 = fast_config("cloud_only", users=2, requests=3)
                cfg2.broker.port = broker.port
                cfg2.cloud.port = cloud.port
                await run_workload(cfg2, tmp_path / "run2", "iso-cloud")
                broker_offset = broker.state.topics["bench"].next_offset
                return edge_cloud_writes, broker_offset

    cloud_writes_during_edge, broker_count_after_both = run_async(scenario())
    assert cloud_writes_during_edge == 0  # edge_only never touches the cloud
    assert broker_count_after_both == 6  # cloud_only never touched the broker


# -- determinism -------------------------------------------------------------------


def test_send_schedule_deterministic_across_runs(tmp_path):
    def one(run_dir):
        async def scenario():
            async with broker_server(tmp_path / f"broker-{run_dir}") as broker:
                cfg = fast_config("edge_only", users=5, requests=8)
                cfg.broker.port = broker.port
                await run_workload(cfg, tmp_path / run_dir, "det-test")

        run_async(scenario())
        rows = read_csv(tmp_path / run_dir / "sendlog.csv")
        return [(r["user_id"], r["seq"], r["status"]) for r in rows]

    assert one("a") == one("b")


def test_payload_bytes_exact_on_the_wire(tmp_path):
    async def scenario():
        async with broker_server(tmp_path / "broker") as broker:
            cfg = fast_config("edge_only", users=1, requests=3)
            cfg.workload.payload_bytes = 1024
            cfg.broker.port = broker.port
            await run_workload(cfg, tmp_path / "run", "size-test")
            return [len(env) for _, _, env in broker.state.topics["bench"].records]

    assert run_async(scenario()) == [1024, 1024, 1024]
