"""Seeded overlay-traffic generator producing ground-truthed traces.

Clients download files from web servers through fixed three-relay paths
(entry, middle, exit). Two vantage points are recorded:

* server side: one connection per download between the exit relay and the
  web server, carrying the plain response as ``server_packet_size`` packets;
* client side: one long-lived connection per client to its entry relay,
  carrying every download re-quantized into fixed-size cells.

Transmission is store-and-forward per hop with bandwidth pacing, Gaussian
latency jitter and Bernoulli loss repaired by a fixed retransmission timeout.
There is no TCP model and no contention between circuits.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .trace_model import (
    ConnectionId,
    Direction,
    EndpointTuple,
    Flow,
    PacketRecord,
    group_flows,
    write_ground_truth,
    write_trace,
)

KiB = 1024
MiB = 1024 * KiB

CLIENT_TRACE = "client_trace.csv"
SERVER_TRACE = "server_trace.csv"
GROUND_TRUTH = "ground_truth.csv"
MANIFEST = "manifest.json"

# Stream tags for per-entity random generators.
_PATH, _START, _DOWNLOAD, _SETUP = range(4)


class ConfigurationError(ValueError):
    pass


class Role(enum.Enum):
    CLIENT = "client"
    RELAY = "relay"
    SERVER = "server"


class BehaviorKind(enum.Enum):
    WEB = "web"
    BULK = "bulk"
    CUSTOM = "custom"


@dataclass(frozen=True)
class NodeSpec:
    name: str
    role: Role
    bandwidth_down: float  # bytes/s
    bandwidth_up: float
    processing_delay: float = 0.0  # seconds per packet

    def __post_init__(self):
        if self.bandwidth_down <= 0 or self.bandwidth_up <= 0:
            raise ConfigurationError(f"{self.name}: bandwidths must be positive")
        if self.processing_delay < 0:
            raise ConfigurationError(f"{self.name}: processing delay must be >= 0")


@dataclass(frozen=True)
class LinkSpec:
    """Access link of a node; a hop combines the links of both ends."""

    latency: float = 0.02
    jitter: float = 0.0  # std of the symmetric perturbation
    loss: float = 0.0

    def __post_init__(self):
        if self.latency < 0 or self.jitter < 0:
            raise ConfigurationError("latency and jitter must be >= 0")
        if not 0 <= self.loss < 1:
            raise ConfigurationError("loss must be in [0, 1)")

    def __add__(self, other: LinkSpec) -> LinkSpec:
        return LinkSpec(
            self.latency + other.latency,
            math.hypot(self.jitter, other.jitter),
            1 - (1 - self.loss) * (1 - other.loss),
        )


@dataclass(frozen=True)
class ClientBehavior:
    kind: BehaviorKind
    download_size: int
    pause: float
    repetitions: int = 0  # 0: keep downloading until the scenario ends
    injected_extra: int = 0

    def __post_init__(self):
        if self.download_size <= 0:
            raise ConfigurationError("download_size must be positive")
        if self.pause < 0 or self.repetitions < 0 or self.injected_extra < 0:
            raise ConfigurationError("pause, repetitions and injected_extra must be >= 0")


@dataclass(frozen=True)
class Scenario:
    seed: int
    duration: float
    nodes: tuple[NodeSpec, ...]
    behaviors: Mapping[str, ClientBehavior]
    links: Mapping[str, LinkSpec] = field(default_factory=dict)
    default_link: LinkSpec = LinkSpec()
    cell_size: int = 512
    cell_payload: int = 498
    server_packet_size: int = 498
    request_size: int = 300
    control_cells: int = 3
    retransmit_timeout: float = 0.5
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if self.duration <= 0:
            raise ConfigurationError("duration must be positive")
        if not 0 < self.cell_payload < self.cell_size:
            raise ConfigurationError("cell_payload must be positive and below cell_size")
        if self.server_packet_size <= 0 or self.request_size <= 0 or self.control_cells < 0:
            raise ConfigurationError("packet sizes must be positive, control_cells >= 0")
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ConfigurationError("node names must be unique")
        roles = {r: [n for n in self.nodes if n.role is r] for r in Role}
        if len(roles[Role.RELAY]) < 3:
            raise ConfigurationError("at least three relays are required")
        if not roles[Role.SERVER]:
            raise ConfigurationError("at least one server is required")
        clients = {n.name for n in roles[Role.CLIENT]}
        if set(self.behaviors) != clients:
            raise ConfigurationError("every client needs exactly one behavior")
        if sum(b.injected_extra > 0 for b in self.behaviors.values()) > 1:
            raise ConfigurationError("at most one client may receive injected content")

    def node(self, name: str) -> NodeSpec:
        return self._by_name[name]

    @property
    def _by_name(self) -> dict[str, NodeSpec]:
        cache = self.__dict__.get("_node_cache")
        if cache is None:
            cache = {n.name: n for n in self.nodes}
            object.__setattr__(self, "_node_cache", cache)
        return cache

    def by_role(self, role: Role) -> list[NodeSpec]:
        return sorted((n for n in self.nodes if n.role is role), key=lambda n: n.name)

    def link(self, name: str) -> LinkSpec:
        return self.links.get(name, self.default_link)

    @property
    def victim(self) -> str | None:
        for name, b in sorted(self.behaviors.items()):
            if b.injected_extra > 0:
                return name
        return None

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("nodes", "behaviors", "links")}
        d["nodes"] = [{**asdict(n), "role": n.role.value} for n in self.nodes]
        d["behaviors"] = {k: {**asdict(b), "kind": b.kind.value} for k, b in sorted(self.behaviors.items())}
        d["links"] = {k: asdict(v) for k, v in sorted(self.links.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> Scenario:
        d = dict(d)
        try:
            d["nodes"] = tuple(NodeSpec(**{**n, "role": Role(n["role"])}) for n in d["nodes"])
            d["behaviors"] = {
                k: ClientBehavior(**{**b, "kind": BehaviorKind(b["kind"])})
                for k, b in d["behaviors"].items()
            }
            d["links"] = {k: LinkSpec(**v) for k, v in d.get("links", {}).items()}
            if "default_link" in d:
                d["default_link"] = LinkSpec(**d["default_link"])
            return cls(**d)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"invalid scenario: {exc}") from None

    def replace(self, **changes) -> Scenario:
        return Scenario.from_dict({**self.to_dict(), **{k: v for k, v in changes.items()}})


@dataclass(frozen=True, eq=False)
class DownloadRecord:
    """Bookkeeping for one download, used for conservation and causality checks.

    ``client_times`` holds the client arrival of every delivered cell;
    ``origin_times`` the server send time of the packet whose data completed
    that cell (control cells share the origin of the data cell they precede).
    """

    server_conn: ConnectionId
    client_conn: ConnectionId
    start: float
    response_bytes: int
    data_cells: int
    control_cells: int
    client_times: np.ndarray = field(repr=False)
    origin_times: np.ndarray = field(repr=False)
    cell_size: int = 512

    @property
    def delivered_bytes(self) -> int:
        return len(self.client_times) * self.cell_size


@dataclass
class SimulationResult:
    client_flows: list[Flow]
    server_flows: list[Flow]
    ground_truth: dict[ConnectionId, ConnectionId]
    downloads: list[DownloadRecord]
    victim: ConnectionId | None


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _key(name: str) -> int:
    return zlib.crc32(name.encode())


def _micro(t: np.ndarray) -> np.ndarray:
    # Snap to microseconds so traces round-trip through the 6-decimal format.
    return np.rint(np.asarray(t) * 1e6).astype(np.int64) / 1e6


def _forward(
    ready: np.ndarray, tx: float, proc: float, link: LinkSpec, timeout: float, rng: np.random.Generator
) -> np.ndarray:
    """Arrival times at the next node for packets ready at ``ready`` (non-decreasing).

    Store-and-forward FIFO: departure_i = max(ready_i, departure_{i-1} + tx),
    solved in closed form with a running maximum. Delivery stays in order.
    """
    n = len(ready)
    if n == 0:
        return ready
    idx = np.arange(n) * tx
    depart = np.maximum.accumulate(ready + proc - idx) + idx + tx
    delay = np.full(n, link.latency)
    if link.jitter > 0:
        delay += rng.normal(0.0, link.jitter, n)
        np.maximum(delay, 0.0, out=delay)
    if link.loss > 0:
        delay += (rng.geometric(1 - link.loss, n) - 1) * timeout
    return np.maximum.accumulate(depart + delay)


def _bottleneck(nodes: list[NodeSpec]) -> float:
    server, *relays, client = nodes
    rates = [server.bandwidth_up, client.bandwidth_down]
    rates += [r.bandwidth_up for r in relays] + [r.bandwidth_down for r in relays]
    return min(rates)


def _nominal_transfer(sc: Scenario, client: NodeSpec, b: ClientBehavior) -> float:
    cells = math.ceil((b.download_size + b.injected_extra) / sc.cell_payload) + sc.control_cells
    return cells * sc.cell_size / client.bandwidth_down


def _start_window(b: ClientBehavior) -> float:
    return max(b.pause, 1.0)


def simulate(sc: Scenario) -> SimulationResult:
    clients = sc.by_role(Role.CLIENT)
    relays = sc.by_role(Role.RELAY)
    servers = sc.by_role(Role.SERVER)

    for c in clients:
        b = sc.behaviors[c.name]
        if _start_window(b) + _nominal_transfer(sc, c, b) > sc.duration:
            raise ConfigurationError(
                f"duration {sc.duration}s is too short for one download by {c.name} "
                f"(start window {_start_window(b):g}s + transfer {_nominal_transfer(sc, c, b):.1f}s)"
            )

    pending = []  # (start, client index, download index, payload)
    client_records: dict[str, list] = {}
    for ci, client in enumerate(clients):
        b = sc.behaviors[client.name]
        path_idx = _rng(sc.seed, _PATH, _key(client.name)).choice(len(relays), 3, replace=False)
        entry, middle, exit_ = (relays[i] for i in path_idx)
        conn = ConnectionId(
            f"C{ci + 1}", EndpointTuple(client.name, 40000 + ci), EndpointTuple(entry.name, 9001)
        )
        t = _rng(sc.seed, _START, _key(client.name)).uniform(0, _start_window(b))
        k = 0
        records = client_records[conn.name] = []
        while t < sc.duration and (b.repetitions == 0 or k < b.repetitions):
            dl = _download(sc, client, (entry, middle, exit_), servers, b, t, k, conn)
            pending.append(dl)
            records.append((t, dl))
            t = dl["end"] + b.pause
            k += 1

    # Server connection names follow request order.
    pending.sort(key=lambda d: (d["request_at_server"], d["client_conn"].name))
    client_packets: list[PacketRecord] = []
    server_packets: list[PacketRecord] = []
    truth: dict[ConnectionId, ConnectionId] = {}
    downloads: list[DownloadRecord] = []
    for k, dl in enumerate(pending, start=1):
        sconn = ConnectionId(
            f"S{k}",
            EndpointTuple(dl["exit"], 10000 + k % 55000),
            EndpointTuple(dl["server"], 80),
        )
        cconn = dl["client_conn"]
        truth[sconn] = cconn
        server_packets.append(PacketRecord(dl["request_at_server"], sconn, Direction.UP, sc.request_size))
        server_packets.extend(
            PacketRecord(t, sconn, Direction.DOWN, s)
            for t, s in zip(dl["server_times"].tolist(), dl["server_sizes"].tolist())
        )
        client_packets.append(PacketRecord(dl["request_at_client"], cconn, Direction.UP, sc.cell_size))
        client_packets.extend(
            PacketRecord(t, cconn, Direction.DOWN, sc.cell_size) for t in dl["client_times"].tolist()
        )
        downloads.append(
            DownloadRecord(
                sconn, cconn, dl["request_at_client"], dl["response_bytes"], dl["data_cells"],
                sc.control_cells, dl["client_times"], dl["origin_times"], cell_size=sc.cell_size,
            )
        )

    victim = None
    if sc.victim is not None:
        idx = [c.name for c in clients].index(sc.victim)
        victim = ConnectionId(f"C{idx + 1}")
    return SimulationResult(
        client_flows=group_flows(client_packets),
        server_flows=group_flows(server_packets),
        ground_truth=truth,
        downloads=downloads,
        victim=victim,
    )


def _download(sc, client, path, servers, b, start, k, conn) -> dict:
    entry, middle, exit_ = path
    rng = _rng(sc.seed, _DOWNLOAD, _key(client.name), k)
    server = servers[int(rng.integers(len(servers)))]
    timeout = sc.retransmit_timeout

    # Request: one cell upstream to the exit, then one plain packet to the server.
    t = np.array([start])
    up_path = [client, entry, middle, exit_, server]
    for src, dst in zip(up_path, up_path[1:]):
        size = sc.request_size if dst is server else sc.cell_size
        tx = size / min(src.bandwidth_up, dst.bandwidth_down)
        t = _forward(t, tx, src.processing_delay, sc.link(src.name) + sc.link(dst.name), timeout, rng)
    request_at_server = float(_micro(t)[0])

    response = b.download_size + b.injected_extra
    seg = sc.server_packet_size
    n_pkts = math.ceil(response / seg)
    sizes = np.full(n_pkts, seg, dtype=np.int64)
    sizes[-1] = response - seg * (n_pkts - 1)
    # Server paces at the path bottleneck, scaled to the cell payload rate so
    # relay queues stay bounded.
    rate = _bottleneck([server, exit_, middle, entry, client]) * sc.cell_payload / sc.cell_size
    first = request_at_server + server.processing_delay
    server_times = _micro(first + np.concatenate(([0], np.cumsum(sizes[:-1]))) / rate)

    hop = sc.link(server.name) + sc.link(exit_.name)
    tx = seg / min(server.bandwidth_up, exit_.bandwidth_down)
    at_exit = _forward(server_times, tx, 0.0, hop, timeout, rng)

    n_data = math.ceil(response / sc.cell_payload)
    last_byte = np.minimum((np.arange(n_data) + 1) * sc.cell_payload, response) - 1
    pkt_of_cell = last_byte // seg
    data_ready = at_exit[pkt_of_cell]
    data_origin = server_times[pkt_of_cell]
    # Control cells are interleaved evenly, each just ahead of a data cell.
    ctrl_pos = (np.arange(sc.control_cells) * n_data) // max(sc.control_cells, 1)
    ready = np.insert(data_ready, ctrl_pos, data_ready[ctrl_pos])
    origin = np.insert(data_origin, ctrl_pos, data_origin[ctrl_pos])

    t = ready
    down_path = [exit_, middle, entry, client]
    for src, dst in zip(down_path, down_path[1:]):
        tx = sc.cell_size / min(src.bandwidth_up, dst.bandwidth_down)
        t = _forward(t, tx, src.processing_delay, sc.link(src.name) + sc.link(dst.name), timeout, rng)
    client_times = _micro(t)

    return {
        "client_conn": conn,
        "server": server.name,
        "exit": exit_.name,
        "request_at_client": float(_micro(np.array([start]))[0]),
        "request_at_server": request_at_server,
        "response_bytes": response,
        "data_cells": n_data,
        "server_times": server_times,
        "server_sizes": sizes,
        "client_times": client_times,
        "origin_times": origin,
        "end": float(client_times[-1]),
    }


# -- presets -----------------------------------------------------------------

WEB_SIZE = 350 * KiB
BULK_SIZE = 5 * MiB
VICTIM_EXTRA = 2 * MiB
CLIENT_BANDWIDTHS = (256 * KiB, 512 * KiB, 1 * MiB)


def _build(
    name: str,
    seed: int,
    duration: float,
    behaviors: list[ClientBehavior],
    n_servers: int,
    n_relays: int,
    jitter: float,
    loss: float,
) -> Scenario:
    rng = _rng(seed, _SETUP)
    width = len(str(len(behaviors)))
    nodes: list[NodeSpec] = []
    links: dict[str, LinkSpec] = {}
    behavior_map: dict[str, ClientBehavior] = {}
    for i, b in enumerate(behaviors, start=1):
        cname = f"client{i:0{width}d}"
        bw = float(rng.choice(CLIENT_BANDWIDTHS))
        nodes.append(NodeSpec(cname, Role.CLIENT, bw, bw / 4))
        behavior_map[cname] = b
    for i in range(1, n_relays + 1):
        bw = float(rng.uniform(4, 16)) * MiB
        nodes.append(NodeSpec(f"relay{i:03d}", Role.RELAY, bw, bw, processing_delay=0.0001))
    for i in range(1, n_servers + 1):
        nodes.append(NodeSpec(f"server{i:03d}", Role.SERVER, 50 * MiB, 50 * MiB))
    for n in nodes:
        links[n.name] = LinkSpec(round(float(rng.uniform(0.005, 0.04)), 6), jitter, loss)
    return Scenario(seed=seed, duration=duration, nodes=tuple(nodes), behaviors=behavior_map, links=links, name=name)


def preset(name: str, seed: int = 42) -> Scenario:
    key = name.lower().replace("_", "").replace("-", "")
    web = ClientBehavior(BehaviorKind.WEB, WEB_SIZE, 60.0)
    bulk = ClientBehavior(BehaviorKind.BULK, BULK_SIZE, 0.0)
    victim = ClientBehavior(BehaviorKind.WEB, WEB_SIZE, 60.0, injected_extra=VICTIM_EXTRA)
    if key == "tiny":
        return _build("tiny", seed, 150.0, [web] * 3 + [bulk, victim], 2, 6, 0.001, 0.0)
    if key == "small":
        return _build("small", seed, 150.0, [web] * 97 + [bulk] * 2 + [victim], 20, 30, 0.002, 1e-5)
    if key == "papershape":
        mix = (
            [web] * 983
            + [ClientBehavior(BehaviorKind.WEB, s, 60.0) for s in (50 * KiB, 1 * MiB, 5 * MiB) for _ in range(2)]
            + [bulk] * 10
            + [victim]
        )
        return _build("papershape", seed, 120.0, mix, 100, 100, 0.002, 1e-5)
    raise ConfigurationError(f"unknown scenario preset {name!r}; choose tiny, small or papershape")


def web_scenario(n_clients: int, seed: int = 42, duration: float = 90.0) -> Scenario:
    """Homogeneous web-client population, used for runtime-scaling measurements."""
    web = ClientBehavior(BehaviorKind.WEB, WEB_SIZE, 60.0)
    return _build(f"web{n_clients}", seed, duration, [web] * n_clients, 10, 20, 0.002, 0.0)


# -- artifact emission -------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_outputs(result: SimulationResult, scenario: Scenario, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trace(result.client_flows, out / CLIENT_TRACE)
    write_trace(result.server_flows, out / SERVER_TRACE)
    write_ground_truth(result.ground_truth, out / GROUND_TRUTH)
    manifest = {
        "seed": scenario.seed,
        "preset": scenario.name,
        "duration": scenario.duration,
        "n_clients": len(result.client_flows),
        "n_server_connections": len(result.server_flows),
        "victim_client_conn": result.victim.name if result.victim else None,
        "files": {f: _sha256(out / f) for f in (CLIENT_TRACE, SERVER_TRACE, GROUND_TRUTH)},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_scenario(path: str | Path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return Scenario.from_dict(data)
