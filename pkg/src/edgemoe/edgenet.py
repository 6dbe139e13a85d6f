"""Edge topology, link cost model and the hello-based perception protocol."""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

from .errors import ConfigError, EncodingError, FrameError, HelloValueError

HELLO_SIZE = 12
HELLO_TYPE = 0x01
_HELLO = struct.Struct(">IIBBB")

# ids of GPU pools carved out of a multi-GPU server: server_id * stride + gpu index
POOL_ID_STRIDE = 1000


@dataclass(frozen=True)
class ServerSpec:
    id: int
    gpu_mem_bytes: float
    host_mem_bytes: float
    ssd_bytes: float
    compute_rate: float
    intra_bus_bandwidth: float
    gpu_count: int = 1
    # bytes/s for streaming weights out of GPU memory; 0 disables that cost term
    mem_bandwidth: float = 0.0

    def __post_init__(self):
        for name in ("gpu_mem_bytes", "host_mem_bytes", "ssd_bytes", "compute_rate", "intra_bus_bandwidth"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", f"server[{self.id}].{name}")
        if self.gpu_count < 1:
            raise ConfigError("must be >= 1", f"server[{self.id}].gpu_count")
        if self.mem_bandwidth < 0:
            raise ConfigError("must be >= 0", f"server[{self.id}].mem_bandwidth")
        if not 0 <= self.id < 2**32:
            raise ConfigError("server id must fit in 32 bits", f"server[{self.id}].id")


@dataclass(frozen=True)
class LinkSpec:
    a: int
    b: int
    bandwidth: float
    latency: float = 0.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ConfigError("must be > 0", f"link[{self.a}-{self.b}].bandwidth")
        if self.latency < 0:
            raise ConfigError("must be >= 0", f"link[{self.a}-{self.b}].latency")
        if self.a == self.b:
            raise ConfigError("self-loop", f"link[{self.a}-{self.b}]")

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.a, self.b), max(self.a, self.b))


@dataclass(frozen=True)
class CloudLink:
    bandwidth: float
    latency: float = 0.0


def transfer_time(nbytes: float, link) -> float:
    """Latency plus serialization time of ``nbytes`` over one link."""
    if nbytes < 0:
        raise ValueError("byte count must be >= 0")
    return link.latency + nbytes / link.bandwidth


@dataclass
class EdgeTopology:
    servers: list[ServerSpec]
    links: list[LinkSpec]
    cloud_link: CloudLink | None = None
    _paths: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [s.id for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate server id", "topology.servers")
        known = set(ids)
        seen = set()
        for ln in self.links:
            if ln.a not in known or ln.b not in known:
                raise ConfigError(f"link endpoint not a server: {ln.a}-{ln.b}", "topology.links")
            if ln.key in seen:
                raise ConfigError(f"duplicate link {ln.key}", "topology.links")
            seen.add(ln.key)
        self._by_id = {s.id: s for s in self.servers}
        self._links = {ln.key: ln for ln in self.links}
        self._adj: dict[int, list[int]] = {i: [] for i in ids}
        for ln in self.links:
            self._adj[ln.a].append(ln.b)
            self._adj[ln.b].append(ln.a)
        for v in self._adj.values():
            v.sort()

    @property
    def server_ids(self) -> list[int]:
        return sorted(self._by_id)

    def server(self, sid: int) -> ServerSpec:
        return self._by_id[sid]

    def link(self, a: int, b: int) -> LinkSpec:
        return self._links[(min(a, b), max(a, b))]

    def neighbors(self, sid: int) -> list[int]:
        return self._adj[sid]

    def path(self, src: int, dst: int) -> list[tuple[int, int]]:
        """Hops (u, v) of the lowest-latency route; ties prefer fewer hops, then smaller ids."""
        if src == dst:
            return []
        key = (src, dst)
        if key not in self._paths:
            self._paths[key] = self._dijkstra(src, dst)
        return self._paths[key]

    def _dijkstra(self, src, dst):
        heap = [(0.0, 0, (src,))]
        done = set()
        while heap:
            lat, hops, route = heapq.heappop(heap)
            node = route[-1]
            if node == dst:
                return list(zip(route[:-1], route[1:]))
            if node in done:
                continue
            done.add(node)
            for nxt in self._adj[node]:
                if nxt not in done:
                    heapq.heappush(heap, (lat + self.link(node, nxt).latency, hops + 1, route + (nxt,)))
        raise ConfigError(f"no route between servers {src} and {dst}", "topology.links")

    def path_transfer_time(self, nbytes: float, src: int, dst: int) -> float:
        """Store-and-forward time over every hop of the route."""
        return sum(transfer_time(nbytes, self.link(u, v)) for u, v in self.path(src, dst))

    def is_connected(self, subset: Iterable[int] | None = None) -> bool:
        nodes = set(self.server_ids if subset is None else subset)
        if not nodes:
            return False
        start = min(nodes)
        seen, stack = {start}, [start]
        while stack:
            for nxt in self._adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return nodes <= seen

    def is_star(self) -> bool:
        n = len(self.servers)
        if len(self.links) != n - 1 or not self.is_connected():
            return False
        return n <= 2 or any(len(v) == n - 1 for v in self._adj.values())


def expand_gpu_pools(
    topology: EdgeTopology,
    participants: dict[int, int] | None = None,
    intra_latency_s: float = 0.0,
) -> tuple[EdgeTopology, list[int], dict[int, int]]:
    """Split multi-GPU servers into single-GPU pool nodes joined by the intra-server bus.

    ``participants`` maps server id -> number of GPUs used (None: every server,
    all GPUs). Non-participating servers stay in the graph as relays only.
    Returns (node topology, compute node ids, node -> parent server id).
    """
    if participants is None:
        participants = {s.id: s.gpu_count for s in topology.servers}
    servers: list[ServerSpec] = []
    links: list[LinkSpec] = []
    compute: list[int] = []
    parent: dict[int, int] = {}
    nic: dict[int, int] = {}
    for s in topology.servers:
        g = participants.get(s.id, 0)
        if g > s.gpu_count:
            raise ConfigError(f"server has only {s.gpu_count} GPUs", f"deployment.servers[{s.id}].gpus")
        if g <= 1:
            per = replace(s, gpu_count=1, gpu_mem_bytes=s.gpu_mem_bytes / s.gpu_count,
                          compute_rate=s.compute_rate / s.gpu_count)
            servers.append(per)
            nic[s.id] = s.id
            parent[s.id] = s.id
            if g == 1:
                compute.append(s.id)
            continue
        ids = [s.id * POOL_ID_STRIDE + i for i in range(g)]
        for pid in ids:
            servers.append(replace(
                s,
                id=pid,
                gpu_count=1,
                gpu_mem_bytes=s.gpu_mem_bytes / s.gpu_count,
                host_mem_bytes=s.host_mem_bytes / g,
                ssd_bytes=s.ssd_bytes / g,
                compute_rate=s.compute_rate / s.gpu_count,
            ))
            parent[pid] = s.id
            compute.append(pid)
        for pid in ids[1:]:
            links.append(LinkSpec(ids[0], pid, s.intra_bus_bandwidth, intra_latency_s))
        nic[s.id] = ids[0]
    for ln in topology.links:
        links.append(replace(ln, a=nic[ln.a], b=nic[ln.b]))
    return EdgeTopology(servers, links, topology.cloud_link), sorted(compute), parent


# --- perception -------------------------------------------------------------


@dataclass(frozen=True)
class ResourceStatus:
    avail_compute_pct: int
    avail_gpu_mem_pct: int
    timestamp: float = 0.0


@dataclass(frozen=True)
class HelloMessage:
    sender: int
    seq: int
    status: ResourceStatus


def _checksum(data: bytes) -> int:
    c = 0
    for b in data:
        c ^= b
    return c


def _check_pct(value, name, exc):
    if not isinstance(value, int) or not 0 <= value <= 100:
        raise exc(f"{name} must be an integer percentage in [0, 100], got {value!r}")


def encode_hello(status: ResourceStatus, sender: int, seq: int) -> bytes:
    """12-byte big-endian frame: sender u32, seq u32, type u8, compute %, mem %, xor checksum."""
    _check_pct(status.avail_compute_pct, "avail_compute_pct", EncodingError)
    _check_pct(status.avail_gpu_mem_pct, "avail_gpu_mem_pct", EncodingError)
    if not (0 <= sender < 2**32 and 0 <= seq < 2**32):
        raise EncodingError("sender and seq must fit in 32 bits")
    body = _HELLO.pack(sender, seq, HELLO_TYPE, status.avail_compute_pct, status.avail_gpu_mem_pct)
    return body + bytes([_checksum(body)])


def decode_hello(data: bytes, received_at: float = 0.0) -> tuple[int, int, ResourceStatus]:
    if len(data) != HELLO_SIZE:
        raise FrameError(f"hello frame must be {HELLO_SIZE} bytes, got {len(data)}")
    if _checksum(data[:11]) != data[11]:
        raise FrameError("hello checksum mismatch")
    sender, seq, mtype, cpu, mem = _HELLO.unpack(data[:11])
    if mtype != HELLO_TYPE:
        raise FrameError(f"unexpected message type 0x{mtype:02x}")
    if cpu > 100 or mem > 100:
        raise HelloValueError(f"reserved percentage value ({cpu}, {mem})")
    return sender, seq, ResourceStatus(cpu, mem, received_at)


def maybe_advertise(
    current: ResourceStatus,
    last_advertised: ResourceStatus | None,
    threshold_pct: float,
    period_s: float,
    now: float,
    *,
    sender: int = 0,
    seq: int = 0,
) -> HelloMessage | None:
    if last_advertised is None:
        return HelloMessage(sender, seq, replace(current, timestamp=now))
    d_cpu = abs(current.avail_compute_pct - last_advertised.avail_compute_pct)
    d_mem = abs(current.avail_gpu_mem_pct - last_advertised.avail_gpu_mem_pct)
    # tolerance absorbs float drift in tick times that are nominal multiples of the period
    due = now - last_advertised.timestamp >= period_s - 1e-9
    if d_cpu > threshold_pct or d_mem > threshold_pct or due:
        return HelloMessage(sender, seq, replace(current, timestamp=now))
    return None


def neighbor_view(server: int, hellos: Iterable[HelloMessage]) -> dict[int, ResourceStatus]:
    """Latest status per neighbor, keyed by sender; stale sequence numbers are dropped."""
    best: dict[int, HelloMessage] = {}
    for msg in hellos:
        if msg.sender == server:
            continue
        cur = best.get(msg.sender)
        if cur is None or msg.seq > cur.seq:
            best[msg.sender] = msg
    return {sid: m.status for sid, m in sorted(best.items())}


class PerceptionAgent:
    """Per-server advertisement state: sequence counter and last advertised status."""

    def __init__(self, server: int, threshold_pct: float = 5.0, period_s: float = 2.0):
        if threshold_pct < 0 or period_s <= 0:
            raise ConfigError("threshold must be >= 0 and period > 0", "perception")
        self.server = server
        self.threshold_pct = threshold_pct
        self.period_s = period_s
        self.seq = 0
        self.last: ResourceStatus | None = None
        self.sent = 0

    def tick(self, status: ResourceStatus, now: float) -> HelloMessage | None:
        msg = maybe_advertise(status, self.last, self.threshold_pct, self.period_s, now,
                              sender=self.server, seq=self.seq + 1)
        if msg is not None:
            self.seq += 1
            self.last = msg.status
            self.sent += 1
        return msg


def hellos_for_constant_status(duration: float, period: float) -> int:
    """Messages one agent emits over ``duration`` when its status never changes."""
    return math.ceil(duration / period)
