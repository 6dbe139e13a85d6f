"""Scenario schema: dataclass configs plus a strict JSON loader.

Unknown fields are rejected and every error names the offending field path,
e.g. ``topology.links[2].bandwidth``.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .compression import DEFAULT_QUANT_PENALTY, FusionConfig, PruneConfig
from .costs import CostModel
from .edgenet import CloudLink, EdgeTopology, LinkSpec, ServerSpec
from .errors import ConfigError
from .model import MoEModelSpec, WorkloadParams
from .paging import PagingConfig

SCHEMA_VERSION = 1


@dataclass
class ServerConfig:
    id: int
    gpu_mem_bytes: float
    host_mem_bytes: float
    ssd_bytes: float
    compute_rate: float
    intra_bus_bandwidth: float
    gpu_count: int = 1
    mem_bandwidth: float = 0.0

    def to_spec(self) -> ServerSpec:
        return ServerSpec(**dataclasses.asdict(self))


@dataclass
class LinkConfig:
    a: int
    b: int
    bandwidth: float
    latency: float = 0.0


@dataclass
class CloudConfig:
    bandwidth: float
    latency: float = 0.0


@dataclass
class TopologyConfig:
    servers: list[ServerConfig]
    links: list[LinkConfig] = field(default_factory=list)
    cloud: CloudConfig | None = None
    # latency of the bus hop between GPU pools of one server
    intra_bus_latency_s: float = 2e-6

    def build(self) -> EdgeTopology:
        cloud = CloudLink(self.cloud.bandwidth, self.cloud.latency) if self.cloud else None
        return EdgeTopology([s.to_spec() for s in self.servers],
                            [LinkSpec(ln.a, ln.b, ln.bandwidth, ln.latency) for ln in self.links], cloud)


@dataclass
class Participant:
    server: int
    gpus: int = 1


@dataclass
class DeploymentConfig:
    # empty: every server with all of its GPUs
    participants: list[Participant] = field(default_factory=list)
    mode: str = "plan"
    placement_file: str | None = None
    quant_file: str | None = None
    # None: one sub-model per participating GPU
    num_submodels: int | None = None
    replication_budget: int = 0
    gpu_memory_utilization: float = 0.9
    # fall back to GPU + SSD capacity when the model does not fit in GPU memory
    allow_ssd: bool = True
    max_iters: int = 1000

    def __post_init__(self):
        if self.mode not in ("plan", "fixed"):
            raise ConfigError("must be 'plan' or 'fixed'", "deployment.mode")
        if self.mode == "fixed" and not self.placement_file:
            raise ConfigError("fixed mode needs placement_file", "deployment.placement_file")
        if not 0 < self.gpu_memory_utilization <= 1:
            raise ConfigError("must be in (0, 1]", "deployment.gpu_memory_utilization")
        if self.replication_budget < 0:
            raise ConfigError("must be >= 0", "deployment.replication_budget")


@dataclass
class QuantizationConfig:
    # mixed precision is only used when the 16-bit model does not fit
    enabled: bool = False
    shared_bits: int = 16
    penalty_table: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_QUANT_PENALTY))


@dataclass
class CompressionConfig:
    quantization: QuantizationConfig = field(default_factory=QuantizationConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)


@dataclass
class ResourceEvent:
    """Scripted background load on a server from ``time_s`` on."""

    time_s: float
    server: int
    avail_compute_pct: int | None = None
    avail_gpu_mem_pct: int | None = None


@dataclass
class PerceptionConfig:
    enabled: bool = True
    threshold_pct: float = 5.0
    period_s: float = 2.0
    tick_s: float = 0.5
    events: list[ResourceEvent] = field(default_factory=list)

    def __post_init__(self):
        if self.period_s <= 0 or self.tick_s <= 0:
            raise ConfigError("period_s and tick_s must be > 0", "perception")


@dataclass
class ReplanTriggerConfig:
    enabled: bool = False
    # total-variation distance of per-layer popularity
    tv_threshold: float = 0.2
    resource_threshold_pct: float = 20.0
    check_period_s: float = 1.0
    # re-estimate co-activation from at most this many recent tokens
    window_tokens: int = 4096

    def __post_init__(self):
        if not 0 < self.tv_threshold <= 1:
            raise ConfigError("must be in (0, 1]", "replan.tv_threshold")
        if self.check_period_s <= 0:
            raise ConfigError("must be > 0", "replan.check_period_s")
        if self.resource_threshold_pct < 0:
            raise ConfigError("must be >= 0", "replan.resource_threshold_pct")
        if self.window_tokens < 1:
            raise ConfigError("must be >= 1", "replan.window_tokens")


@dataclass
class ReportConfig:
    throughput_bin_s: float = 1.0
    record_events: bool = False


@dataclass
class Scenario:
    schema_version: int
    model: MoEModelSpec
    topology: TopologyConfig
    workload: WorkloadParams
    name: str = "scenario"
    description: str = ""
    assumptions: list[str] = field(default_factory=list)
    seed: int = 0
    deployment: DeploymentConfig = field(default_factory=DeploymentConfig)
    paging: PagingConfig = field(default_factory=PagingConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    replan: ReplanTriggerConfig = field(default_factory=ReplanTriggerConfig)
    cost: CostModel = field(default_factory=CostModel)
    report: ReportConfig = field(default_factory=ReportConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {self.schema_version}", "schema_version")

    def participants(self) -> dict[int, int]:
        servers = {s.id: s for s in self.topology.servers}
        if not self.deployment.participants:
            return {sid: s.gpu_count for sid, s in servers.items()}
        out = {}
        for i, p in enumerate(self.deployment.participants):
            if p.server not in servers:
                raise ConfigError(f"unknown server {p.server}", f"deployment.participants[{i}].server")
            if not 1 <= p.gpus <= servers[p.server].gpu_count:
                raise ConfigError("gpus out of range", f"deployment.participants[{i}].gpus")
            out[p.server] = p.gpus
        return out

    def validate(self) -> None:
        self.workload.validate()
        topo = self.topology.build()
        parts = self.participants()
        if not topo.is_connected():
            raise ConfigError("topology is not connected", "topology.links")
        if not parts:
            raise ConfigError("no participating servers", "deployment.participants")


# --- loader -----------------------------------------------------------------


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError("must not be null", path)
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError("expected a list", path)
        return [_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, list) or len(value) != len(args):
            raise ConfigError(f"expected a list of {len(args)} items", path)
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError("expected an object", path)
        out = {}
        for k, v in value.items():
            key = k
            if args[0] is int:
                try:
                    key = int(k)
                except ValueError:
                    raise ConfigError("expected an integer key", f"{path}.{k}") from None
            out[key] = _convert(args[1], v, f"{path}.{k}")
        return out
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected true/false", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError("expected a string", path)
        return value
    raise ConfigError(f"unsupported field type {tp}", path)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError("expected an object", path or "<root>")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init and not f.name.startswith("_")}
    join = (lambda name: f"{path}.{name}") if path else (lambda name: name)
    for key in data:
        if key not in fields:
            raise ConfigError("unknown field", join(key))
    kwargs = {}
    for name, f in fields.items():
        if name in data:
            kwargs[name] = _convert(hints[name], data[name], join(name))
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError("missing required field", join(name))
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if path and exc.path and not exc.path.startswith(path):
            raise ConfigError(str(exc).split(": ", 1)[-1], f"{path}.{exc.path.split('.')[-1]}") from None
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path or "<root>") from None


def scenario_from_dict(data: dict) -> Scenario:
    return _build(Scenario, data, "")


def load_scenario(path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from None
    return scenario_from_dict(data)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if f.init and not f.name.startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    return obj


def scenario_to_dict(scenario: Scenario) -> dict:
    return _plain(scenario)


def dump_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True)
