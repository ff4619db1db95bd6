"""Run configuration: defaults, JSON config files, and metadata dumps.

A config file is a single JSON document with sections `broker`, `cloud`,
`agg`, `workload`, `seeds`, `sweep`, `output`. Every key has a default;
unknown keys are rejected so typos don't silently fall back to defaults.
The fully resolved configuration is dumped verbatim into each run's
metadata.json.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

SCENARIOS = ("cloud_only", "edge_only", "edge_cloud")


class ConfigError(Exception):
    pass


@dataclass
class BrokerConfig:
    port: int = 7071
    data_dir: str = ""  # empty -> <run_dir>/broker-data
    flush_every: int = 1  # flush-per-append; N>1 trades durability for speed
    fault_dup_every: int = 0  # >0: every Nth fetched record delivered twice


@dataclass
class CloudConfig:
    port: int = 7072
    workers: int = 64
    service_ms_base: float = 5.0
    service_ms_per_kb: float = 2.0
    # Extra per-request cost for writes arriving outside the bulk-sync
    # channel, modelling REST-style ingress vs a persistent admin channel.
    http_overhead_ms: float = 35.0
    wan_median_ms: float = 25.0  # exp(mu) of the lognormal one-way delay
    wan_sigma: float = 0.25
    queue_capacity: int = 2048
    outage_s: float = 2.0  # connection-outage window used by fault injection


@dataclass
class AggConfig:
    broker_addr: str = ""  # empty -> 127.0.0.1:<broker.port>
    cloud_addr: str = ""  # empty -> 127.0.0.1:<cloud.port>
    topics: list[str] = field(default_factory=lambda: ["bench"])
    batch_max: int = 32
    flush_interval_ms: int = 50
    queue_dir: str = ""  # empty -> <run_dir>/agg-queue
    drain_timeout_ms: int = 120_000
    retry_base_ms: int = 100
    retry_factor: float = 2.0
    retry_cap_ms: int = 5_000
    retry_jitter: float = 0.2


@dataclass
class WorkloadConfig:
    scenario: str = "edge_only"
    users: int = 100
    requests_per_user: int = 1000
    interarrival_mean_ms: float = 1000.0
    interarrival_sigma_ms: float = 100.0
    payload_bytes: int = 1024
    topic: str = "bench"
    grace_s: float = 10.0  # receiver quiescence window after senders finish
    warmup_discard_s: float = 0.0  # discard samples sent in the first N seconds
    fetch_max_records: int = 500
    fetch_wait_ms: int = 200


@dataclass
class SeedsConfig:
    workload: int = 1
    cloud: int = 2


@dataclass
class SweepConfig:
    scenarios: list[str] = field(default_factory=lambda: list(SCENARIOS))
    user_counts: list[int] = field(default_factory=lambda: [100, 200, 300])
    payload_sizes: list[int] = field(default_factory=lambda: [1024, 10240])
    repetitions: int = 1
    settle_s: float = 3.0
    knee_threshold_ms: float = 10_000.0


@dataclass
class OutputConfig:
    dir: str = "edgebench-out"


@dataclass
class Config:
    broker: BrokerConfig = field(default_factory=BrokerConfig)
    cloud: CloudConfig = field(default_factory=CloudConfig)
    agg: AggConfig = field(default_factory=AggConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def broker_addr(self) -> tuple[str, int]:
        if self.agg.broker_addr:
            host, port = self.agg.broker_addr.rsplit(":", 1)
            return host, int(port)
        return "127.0.0.1", self.broker.port

    def cloud_addr(self) -> tuple[str, int]:
        if self.agg.cloud_addr:
            host, port = self.agg.cloud_addr.rsplit(":", 1)
            return host, int(port)
        return "127.0.0.1", self.cloud.port

    def run_id(self, rep: int = 0) -> str:
        w = self.workload
        return f"{w.scenario}-u{w.users}-b{w.payload_bytes}-r{rep}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        w = self.workload
        if w.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {w.scenario!r}, expected one of {SCENARIOS}")
        if w.users < 1 or w.requests_per_user < 1:
            raise ConfigError("users and requests_per_user must be >= 1")
        if w.interarrival_mean_ms <= 0 or w.interarrival_sigma_ms < 0:
            raise ConfigError("interarrival mean must be > 0 and sigma >= 0")
        if self.cloud.workers < 1:
            raise ConfigError("cloud.workers must be >= 1")
        for p in (
            self.cloud.service_ms_base,
            self.cloud.service_ms_per_kb,
            self.cloud.http_overhead_ms,
            self.cloud.wan_median_ms,
            self.cloud.wan_sigma,
        ):
            if p < 0:
                raise ConfigError("cloud model parameters must be >= 0")
        if self.cloud.queue_capacity < 0:
            raise ConfigError("cloud.queue_capacity must be >= 0")
        if self.agg.batch_max < 1:
            raise ConfigError("agg.batch_max must be >= 1")
        for s in self.sweep.scenarios:
            if s not in SCENARIOS:
                raise ConfigError(f"unknown sweep scenario {s!r}")
        # payload minimum is enforced at build time; check here for early errors
        from .wire import PAYLOAD_OVERHEAD

        if w.payload_bytes < PAYLOAD_OVERHEAD:
            raise ConfigError(
                f"workload.payload_bytes={w.payload_bytes} below minimum {PAYLOAD_OVERHEAD}"
            )


_SECTION_TYPES = {
    "broker": BrokerConfig,
    "cloud": CloudConfig,
    "agg": AggConfig,
    "workload": WorkloadConfig,
    "seeds": SeedsConfig,
    "sweep": SweepConfig,
    "output": OutputConfig,
}


def from_dict(doc: dict) -> Config:
    cfg = Config()
    for section, value in doc.items():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        target = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(target)}
        for key, val in value.items():
            if key not in names:
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(target, key, val)
    cfg.validate()
    return cfg


def load(path: str | Path) -> Config:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config file must contain a JSON object")
    return from_dict(doc)


def dump(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def all_keys() -> set[str]:
    """Every dotted knob name; run metadata must contain all of them."""
    keys = set()
    for section, typ in _SECTION_TYPES.items():
        for f in dataclasses.fields(typ):
            keys.add(f"{section}.{f.name}")
    return keys
