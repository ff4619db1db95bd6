"""Command-line interface.

User-facing commands:

    edgebench run    --config cfg.json [--scenario S] [--users N] [--bytes B] [--out-dir DIR]
    edgebench sweep  --config cfg.json [--out-dir DIR]
    edgebench report --dir DIR

Internal commands used by the orchestrator to start each component in its
own process (components read the resolved runconfig.json of their run):

    edgebench serve-broker|serve-cloudsim|serve-aggregator|serve-workload
              --runconfig FILE --run-dir DIR --run-id ID

Exit code 0 only when every conservation check passed.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import signal
import sys

from . import __version__, config as config_mod
from .aggregator import Aggregator
from .broker import BrokerServer, BrokerState
from .cloudsim import CloudServer
from .config import Config
from .service import (
    install_stop_signal,
    setup_logging,
    stats_dump_loop,
    write_ready_file,
)
from .workload import run_workload


# -- component entrypoints ---------------------------------------------------


async def _serve_broker(cfg: Config, run_dir: str) -> int:
    setup_logging(run_dir, "broker")
    state = BrokerState(cfg.broker.data_dir, cfg.broker.flush_every)
    server = BrokerServer(
        state, port=cfg.broker.port, fault_dup_every=cfg.broker.fault_dup_every
    )
    port = await server.start()
    stop = asyncio.Event()
    install_stop_signal(asyncio.get_running_loop(), stop)
    stats = asyncio.create_task(stats_dump_loop("broker", run_dir, server.counters))
    write_ready_file(run_dir, "broker", port)
    await stop.wait()
    stats.cancel()
    await server.stop()
    return 0


async def _serve_cloudsim(cfg: Config, run_dir: str) -> int:
    setup_logging(run_dir, "cloudsim")
    server = CloudServer(cfg.cloud, seed=cfg.seeds.cloud)
    port = await server.start()
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    install_stop_signal(loop, stop)
    loop.add_signal_handler(signal.SIGUSR1, server.start_outage)
    stats = asyncio.create_task(stats_dump_loop("cloudsim", run_dir, server.counters))
    write_ready_file(run_dir, "cloudsim", port)
    await stop.wait()
    stats.cancel()
    await server.stop()
    return 0


async def _serve_aggregator(cfg: Config, run_dir: str) -> int:
    setup_logging(run_dir, "aggregator")
    agg = Aggregator(
        cfg.agg,
        cfg.broker_addr(),
        cfg.cloud_addr(),
        cfg.agg.queue_dir,
        rng_seed=cfg.seeds.cloud + 7919,
    )
    stop = asyncio.Event()
    install_stop_signal(asyncio.get_running_loop(), stop)
    consume = asyncio.create_task(agg.consume_loop())
    drain = asyncio.create_task(agg.drain_loop())
    stats = asyncio.create_task(stats_dump_loop("aggregator", run_dir, agg.counters))
    write_ready_file(run_dir, "aggregator", 0)
    await stop.wait()
    report = await agg.stop_and_drain(cfg.agg.drain_timeout_ms)
    for task in (consume, drain, stats):
        task.cancel()
    await agg.close()
    with open(f"{run_dir}/drain_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    return 0 if report["remaining"] == 0 else 3


async def _serve_workload(cfg: Config, run_dir: str, run_id: str) -> int:
    setup_logging(run_dir, "workload")
    await run_workload(cfg, run_dir, run_id)
    return 0


_SERVE = {
    "serve-broker": _serve_broker,
    "serve-cloudsim": _serve_cloudsim,
    "serve-aggregator": _serve_aggregator,
    "serve-workload": _serve_workload,
}


# -- user-facing commands ----------------------------------------------------


def _load_config(args) -> Config:
    cfg = config_mod.load(args.config) if args.config else Config()
    if getattr(args, "scenario", None):
        cfg.workload.scenario = args.scenario
    if getattr(args, "users", None):
        cfg.workload.users = args.users
    if getattr(args, "bytes", None):
        cfg.workload.payload_bytes = args.bytes
    if getattr(args, "out_dir", None):
        cfg.output.dir = args.out_dir
    cfg.validate()
    return cfg


def _cmd_run(args) -> int:
    from . import orchestrator

    cfg = _load_config(args)
    try:
        result = orchestrator.run_once(cfg, cfg.output.dir)
    except orchestrator.RunError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    print(orchestrator.format_table([result]))
    print(f"artifacts: {result['run_dir']}")
    return 0 if result["valid"] else 2


def _cmd_sweep(args) -> int:
    from . import orchestrator

    cfg = _load_config(args)
    sweep = orchestrator.run_matrix(cfg, cfg.output.dir)
    print(orchestrator.format_table(sweep["cells"]))
    print(f"artifacts: {sweep['out_root']}")
    return 0 if all(c.get("valid") for c in sweep["cells"]) else 2


def _cmd_report(args) -> int:
    from . import orchestrator

    result = orchestrator.report(args.dir)
    print(orchestrator.format_table(result["cells"]))
    for sweep in result["knee"].get("sweeps", []):
        print(
            f"knee {sweep['scenario']}/{sweep['payload_bytes']}B: "
            f"max_scalable_users={sweep['max_scalable_users']}"
        )
    return 0 if all(c.get("valid") for c in result["cells"]) else 2


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="edgebench", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"edgebench {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    for name, fn in (("run", _cmd_run), ("sweep", _cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults apply per key)")
        p.add_argument("--scenario", choices=config_mod.SCENARIOS)
        p.add_argument("--users", type=int)
        p.add_argument("--bytes", type=int, help="payload size in bytes")
        p.add_argument("--out-dir", help="override output.dir")
        p.set_defaults(fn=fn)

    p = sub.add_parser("report")
    p.add_argument("--dir", required=True, help="output directory of a run/sweep")
    p.set_defaults(fn=_cmd_report)

    for name in _SERVE:
        p = sub.add_parser(name)
        p.add_argument("--runconfig", required=True)
        p.add_argument("--run-dir", required=True)
        p.add_argument("--run-id", default="adhoc")
        p.set_defaults(fn=None)

    args = parser.parse_args(argv)
    if args.cmd in _SERVE:
        cfg = config_mod.load(args.runconfig)
        coro_fn = _SERVE[args.cmd]
        if args.cmd == "serve-workload":
            return asyncio.run(coro_fn(cfg, args.run_dir, args.run_id))
        return asyncio.run(coro_fn(cfg, args.run_dir))
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
