"""Statistical reductions and the 1 Hz resource sampler.

Quantiles use the nearest-rank convention (rank = ceil(p*n) on the sorted
array) so every value reported is an actual sample and brute-force
oracles can match exactly. Densities for violin rendering are Gaussian
KDEs with Silverman bandwidth computed on log10(latency), matching the
log-scaled axes the figures use.

The resource sampler attributes CPU and memory to each component process
via psutil and reads the application-layer byte counters each component
dumps next to its logs; OS interface counters would fold in unrelated
traffic.
"""

from __future__ import annotations

import json
import math
import threading
import time
from pathlib import Path

import numpy as np
import psutil

RESOURCES_CSV_HEADER = [
    "run_id", "ts_s", "component", "cpu_pct", "mem_bytes",
    "net_in_cum", "net_out_cum", "dead",
]
KDE_GRID_POINTS = 128
ECDF_MAX_POINTS = 512


class EmptyInputError(ValueError):
    pass


def quantile_nearest_rank(sorted_values: np.ndarray, p: float) -> float:
    n = len(sorted_values)
    if n == 0:
        raise EmptyInputError("no samples")
    rank = max(1, math.ceil(p * n))
    return float(sorted_values[rank - 1])


def summarize(values) -> dict:
    """Distribution summary: nearest-rank quantiles plus log-space KDE."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise EmptyInputError("cannot summarize an empty sample set")
    arr = np.sort(arr)
    n = int(arr.size)
    summary = {
        "n": n,
        "min": float(arr[0]),
        "p25": quantile_nearest_rank(arr, 0.25),
        "median": quantile_nearest_rank(arr, 0.50),
        "p75": quantile_nearest_rank(arr, 0.75),
        "p99": quantile_nearest_rank(arr, 0.99),
        "max": float(arr[-1]),
        "mean": float(arr.mean()),
    }
    summary["kde"] = _log_kde(arr)
    return summary


def _log_kde(sorted_arr: np.ndarray) -> dict:
    # Latencies are positive by construction; guard anyway.
    logs = np.log10(np.maximum(sorted_arr, 1e-9))
    n = logs.size
    std = float(logs.std(ddof=1)) if n > 1 else 0.0
    iqr = float(
        quantile_nearest_rank(np.sort(logs), 0.75) - quantile_nearest_rank(np.sort(logs), 0.25)
    )
    spread = min(x for x in (std, iqr / 1.34) if x > 0) if (std > 0 or iqr > 0) else 0.0
    h = 0.9 * spread * n ** (-1 / 5) if spread > 0 else 0.05
    grid = np.linspace(logs.min() - 3 * h, logs.max() + 3 * h, KDE_GRID_POINTS)
    # density over log10(latency); vectorized sum of Gaussian kernels
    z = (grid[:, None] - logs[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (n * h * math.sqrt(2 * math.pi))
    return {"x": (10.0 ** grid).tolist(), "y": dens.tolist(), "bandwidth_log10": h}


def ecdf(values) -> dict:
    arr = np.sort(np.asarray(values, dtype=float))
    if arr.size == 0:
        raise EmptyInputError("cannot build an ECDF from no samples")
    n = arr.size
    return {"x": arr.tolist(), "f": (np.arange(1, n + 1) / n).tolist()}


def ecdf_eval(curve: dict, x: float) -> float:
    """Step evaluation: F(x) = #{xi <= x} / n."""
    xs = curve["x"]
    lo, hi = 0, len(xs)
    while lo < hi:
        mid = (lo + hi) // 2
        if xs[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    return lo / len(xs)


def ecdf_downsample(curve: dict, max_points: int = ECDF_MAX_POINTS) -> dict:
    xs, fs = curve["x"], curve["f"]
    n = len(xs)
    if n <= max_points:
        return {"x": list(xs), "f": list(fs)}
    idx = np.unique(np.linspace(0, n - 1, max_points).round().astype(int))
    idx[-1] = n - 1  # keep F = 1.0
    return {"x": [xs[i] for i in idx], "f": [fs[i] for i in idx]}


def detect_knee(cells: list[dict], threshold_ms: float = 10_000.0) -> dict:
    """Largest swept user count whose median (and all below it) stays under
    the usability threshold, per (scenario, payload) sweep."""
    groups: dict[tuple[str, int], list[dict]] = {}
    for cell in cells:
        groups.setdefault((cell["scenario"], int(cell["payload_bytes"])), []).append(cell)
    report = {"threshold_ms": threshold_ms, "sweeps": []}
    for (scenario, payload), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: int(r["users"]))
        max_scalable = 0
        for row in rows:
            if float(row["median_ms"]) < threshold_ms:
                max_scalable = int(row["users"])
            else:
                break  # first crossing; larger counts don't count even if lower
        report["sweeps"].append(
            {
                "scenario": scenario,
                "payload_bytes": payload,
                "points": [
                    {
                        "users": int(r["users"]),
                        "median_ms": float(r["median_ms"]),
                        "p99_ms": float(r["p99_ms"]),
                        "max_ms": float(r["max_ms"]),
                    }
                    for r in rows
                ],
                "max_scalable_users": max_scalable,
            }
        )
    return report


class ResourceSampler(threading.Thread):
    """Samples component processes once per second into resources.csv."""

    def __init__(self, run_id: str, run_dir: str | Path, interval_s: float = 1.0):
        super().__init__(daemon=True)
        self.run_id = run_id
        self.run_dir = Path(run_dir)
        self.interval_s = interval_s
        self._stop_evt = threading.Event()
        self._lock = threading.Lock()
        self._procs: dict[str, psutil.Process] = {}
        self._last_cpu: dict[str, tuple[float, float]] = {}  # (cpu_s, wall_s)
        self._fh = None

    def add(self, component: str, pid: int) -> None:
        with self._lock:
            try:
                proc = psutil.Process(pid)
                self._procs[component] = proc
                t = proc.cpu_times()
                self._last_cpu[component] = (t.user + t.system, time.monotonic())
            except psutil.Error:
                pass

    def _read_net(self, component: str) -> tuple[int, int]:
        path = self.run_dir / f"{component}.net.json"
        try:
            doc = json.loads(path.read_text())
            return int(doc["net_in"]), int(doc["net_out"])
        except (OSError, ValueError, KeyError):
            return 0, 0

    def run(self) -> None:
        self._fh = open(self.run_dir / "resources.csv", "w")
        self._fh.write(",".join(RESOURCES_CSV_HEADER) + "\n")
        t0 = time.monotonic()
        ts = 0
        while not self._stop_evt.is_set():
            ts += 1
            self._stop_evt.wait(max(0.0, t0 + ts * self.interval_s - time.monotonic()))
            if self._stop_evt.is_set():
                break
            self._sample(ts)
        self._fh.close()

    def _sample(self, ts: int) -> None:
        with self._lock:
            procs = dict(self._procs)
        combined = {"cpu": 0.0, "mem": 0, "net_in": 0, "net_out": 0}
        rows = []
        for name, proc in procs.items():
            dead = 0
            cpu_pct = 0.0
            mem = 0
            try:
                t = proc.cpu_times()
                now = time.monotonic()
                cpu_s = t.user + t.system
                last_cpu_s, last_wall = self._last_cpu.get(name, (cpu_s, now))
                wall = now - last_wall
                if wall > 0:
                    cpu_pct = 100.0 * (cpu_s - last_cpu_s) / wall
                self._last_cpu[name] = (cpu_s, now)
                mem = proc.memory_info().rss
            except psutil.Error:
                dead = 1
            net_in, net_out = self._read_net(name)
            rows.append((name, cpu_pct, mem, net_in, net_out, dead))
            if not dead:
                combined["cpu"] += cpu_pct
                combined["mem"] += mem
            combined["net_in"] += net_in
            combined["net_out"] += net_out
        rows.append(
            ("combined", combined["cpu"], combined["mem"], combined["net_in"], combined["net_out"], 0)
        )
        for name, cpu_pct, mem, net_in, net_out, dead in rows:
            self._fh.write(
                f"{self.run_id},{ts},{name},{cpu_pct:.2f},{mem},{net_in},{net_out},{dead}\n"
            )
        self._fh.flush()

    def stop(self) -> None:
        self._stop_evt.set()
        if self.is_alive():
            self.join(timeout=5)


def aggregate_resources(rows: list[dict]) -> dict:
    """Per-component mean/min/max for cpu and memory, totals and peak
    per-second rates for the network counters."""
    if not rows:
        raise EmptyInputError("no resource samples")
    by_comp: dict[str, list[dict]] = {}
    for row in rows:
        by_comp.setdefault(row["component"], []).append(row)
    out = {}
    for comp, samples in sorted(by_comp.items()):
        samples = sorted(samples, key=lambda r: int(r["ts_s"]))
        alive = [s for s in samples if not int(s.get("dead", 0))]
        use = alive if alive else samples
        cpus = [float(s["cpu_pct"]) for s in use]
        mems = [int(s["mem_bytes"]) for s in use]
        peak_in = peak_out = peak_io = 0.0
        for a, b in zip(samples, samples[1:]):
            dt = int(b["ts_s"]) - int(a["ts_s"])
            if dt <= 0:
                continue
            din = (int(b["net_in_cum"]) - int(a["net_in_cum"])) / dt
            dout = (int(b["net_out_cum"]) - int(a["net_out_cum"])) / dt
            peak_in = max(peak_in, din)
            peak_out = max(peak_out, dout)
            peak_io = max(peak_io, din + dout)
        out[comp] = {
            "cpu_pct": {"mean": sum(cpus) / len(cpus), "min": min(cpus), "max": max(cpus)},
            "mem_bytes": {"mean": sum(mems) / len(mems), "min": min(mems), "max": max(mems)},
            "net": {
                "in_total": int(samples[-1]["net_in_cum"]),
                "out_total": int(samples[-1]["net_out_cum"]),
                "in_peak_rate": peak_in,
                "out_peak_rate": peak_out,
                "io_peak_rate": peak_io,
            },
            "samples": len(samples),
        }
    return out
