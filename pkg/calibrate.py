"""Scratch calibration runs for the trend sweeps (not part of the package)."""

import shutil
import sys
import time
from pathlib import Path

from edgebench import orchestrator
from edgebench.config import Config

OUT = Path("/tmp/calib")


def cfg_for(scenario, users, payload=1024, requests=50, workers=64, queue=2048,
            mean_ms=150.0):
    cfg = Config()
    cfg.broker.port = 0
    cfg.cloud.port = 0
    cfg.workload.scenario = scenario
    cfg.workload.users = users
    cfg.workload.requests_per_user = requests
    cfg.workload.interarrival_mean_ms = mean_ms
    cfg.workload.interarrival_sigma_ms = 15.0
    cfg.workload.payload_bytes = payload
    cfg.workload.grace_s = 6.0
    cfg.cloud.workers = workers
    cfg.cloud.queue_capacity = queue
    cfg.sweep.settle_s = 0.5
    return cfg


def main():
    shutil.rmtree(OUT, ignore_errors=True)
    OUT.mkdir(parents=True)
    cells = []
    for spec in sys.argv[1:]:
        scenario, users, payload, requests, workers, queue = spec.split(":")
        cfg = cfg_for(scenario, int(users), int(payload), int(requests),
                      int(workers), int(queue))
        label = f"{spec.replace(':', '-')}"
        t0 = time.monotonic()
        res = orchestrator.run_once(cfg, OUT, run_id=label)
        wall = time.monotonic() - t0
        cells.append((label, res))
        print(
            f"{label:48s} n={res['n']:6d} median={res['median_ms']:10.1f}ms "
            f"p99={res['p99_ms']:10.1f}ms max={res['max_ms']:10.1f}ms "
            f"overloads={res['conservation']['unreceived']:5d} wall={wall:5.1f}s "
            f"valid={res['valid']}"
        )


if __name__ == "__main__":
    main()
