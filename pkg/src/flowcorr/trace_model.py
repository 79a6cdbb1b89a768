"""Trace and ground-truth data model plus CSV ingestion/emission.

Trace files are line-based CSV::

    timestamp_s,conn_id,endpoint_a,endpoint_b,direction,bytes
    0.500000,S1,10.0.0.5:443,10.0.0.9:51000,down,512

The first character of ``conn_id`` encodes the observation side
(``S`` server-side, ``C`` client-side).
"""

from __future__ import annotations

import csv
import enum
import re
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

TRACE_HEADER = ["timestamp_s", "conn_id", "endpoint_a", "endpoint_b", "direction", "bytes"]
GROUND_TRUTH_HEADER = ["server_conn_id", "client_conn_id"]


class TraceError(ValueError):
    """Malformed trace or ground-truth input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class Side(enum.Enum):
    SERVER = "S"
    CLIENT = "C"


class Direction(enum.Enum):
    DOWN = "down"  # toward the client
    UP = "up"


@dataclass(frozen=True, slots=True)
class EndpointTuple:
    address: str
    port: int

    def __post_init__(self):
        if not self.address:
            raise TraceError("endpoint address is empty")
        if not 0 <= self.port <= 65535:
            raise TraceError(f"port {self.port} out of range")

    @classmethod
    def parse(cls, text: str) -> EndpointTuple:
        address, sep, port = text.rpartition(":")
        if not sep:
            raise TraceError(f"endpoint {text!r} lacks ':port'")
        try:
            port_num = int(port)
        except ValueError:
            raise TraceError(f"endpoint {text!r} has non-integer port") from None
        return cls(address, port_num)

    def __str__(self) -> str:
        return f"{self.address}:{self.port}"


@dataclass(frozen=True)
class ConnectionId:
    """One connection on one observation side.

    Identity (equality, hashing, ordering) is the ``name`` token, which trace
    files keep unique per connection per side. Endpoints are carried for
    emission; ground-truth files reference connections by name only, so the
    endpoints may be absent there.
    """

    name: str
    a: EndpointTuple | None = field(default=None, compare=False)
    b: EndpointTuple | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.name or self.name[0] not in "SC":
            raise TraceError(f"connection id {self.name!r} must start with 'S' or 'C'")
        if self.a is not None and self.a == self.b:
            raise TraceError(f"connection {self.name} has identical endpoints")

    @property
    def side(self) -> Side:
        return Side(self.name[0])

    def __lt__(self, other: ConnectionId) -> bool:
        return natural_key(self.name) < natural_key(other.name)

    def __str__(self) -> str:
        return self.name


def natural_key(name: str) -> tuple:
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", name))


@dataclass(frozen=True, slots=True)
class PacketRecord:
    timestamp: float
    conn: ConnectionId
    direction: Direction
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise TraceError(f"packet size {self.size} must be >= 1")
        if not np.isfinite(self.timestamp) or self.timestamp < 0:
            raise TraceError(f"timestamp {self.timestamp} must be finite and non-negative")


def _packet_sort_key(p: PacketRecord):
    return (p.timestamp, p.direction.value, p.size)


@dataclass(frozen=True)
class Flow:
    """Time-ordered packets of a single connection."""

    conn: ConnectionId
    packets: tuple[PacketRecord, ...]

    def __post_init__(self):
        packets = tuple(self.packets)
        object.__setattr__(self, "packets", packets)
        for p in packets:
            if p.conn != self.conn:
                raise TraceError(f"packet of {p.conn} placed in flow {self.conn}")
        ts = [p.timestamp for p in packets]
        if any(t1 < t0 for t0, t1 in zip(ts, ts[1:])):
            raise TraceError(f"flow {self.conn} packets are not time-ordered")

    @classmethod
    def from_packets(cls, conn: ConnectionId, packets: Iterable[PacketRecord]) -> Flow:
        return cls(conn, tuple(sorted(packets, key=_packet_sort_key)))

    def __len__(self) -> int:
        return len(self.packets)

    # Columnar views used by the vectorised statistics; computed once per flow.
    @cached_property
    def timestamps(self) -> np.ndarray:
        return np.fromiter((p.timestamp for p in self.packets), float, len(self.packets))

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.fromiter((p.size for p in self.packets), np.int64, len(self.packets))

    @cached_property
    def downstream(self) -> np.ndarray:
        return np.fromiter(
            (p.direction is Direction.DOWN for p in self.packets), bool, len(self.packets)
        )


@dataclass(frozen=True)
class GroundTruthEntry:
    server_conn: ConnectionId
    client_conn: ConnectionId

    def __post_init__(self):
        if self.server_conn.side is not Side.SERVER:
            raise TraceError(f"{self.server_conn} is not a server-side connection")
        if self.client_conn.side is not Side.CLIENT:
            raise TraceError(f"{self.client_conn} is not a client-side connection")


def group_flows(packets: Iterable[PacketRecord]) -> list[Flow]:
    """Partition packets into flows, ordered by connection name."""
    groups: dict[ConnectionId, list[PacketRecord]] = defaultdict(list)
    for p in packets:
        groups[p.conn].append(p)
    return [Flow.from_packets(conn, groups[conn]) for conn in sorted(groups)]


def parse_trace(path: str | Path) -> list[Flow]:
    path = Path(path)
    conns: dict[str, ConnectionId] = {}
    packets: list[PacketRecord] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if header != TRACE_HEADER:
            raise TraceError(f"unexpected header {header!r}", line=1)
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(TRACE_HEADER):
                raise TraceError(f"expected {len(TRACE_HEADER)} fields, got {len(row)}", lineno)
            ts_text, name, ep_a, ep_b, direction, size_text = row
            try:
                timestamp = float(ts_text)
                size = int(size_text)
                dirn = Direction(direction)
            except ValueError as exc:
                raise TraceError(str(exc), lineno) from None
            try:
                conn = conns.get(name)
                if conn is None:
                    conn = conns[name] = ConnectionId(
                        name, EndpointTuple.parse(ep_a), EndpointTuple.parse(ep_b)
                    )
                elif str(conn.a) != ep_a or str(conn.b) != ep_b:
                    raise TraceError(f"connection {name} reappears with different endpoints")
                packets.append(PacketRecord(timestamp, conn, dirn, size))
            except TraceError as exc:
                raise TraceError(str(exc), lineno) from None
    return group_flows(packets)


def write_trace(flows: Iterable[Flow], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for flow in flows:
            c = flow.conn
            a, b = str(c.a), str(c.b)
            writer.writerows(
                (f"{p.timestamp:.6f}", c.name, a, b, p.direction.value, p.size)
                for p in flow.packets
            )


def load_ground_truth(path: str | Path) -> dict[ConnectionId, ConnectionId]:
    truth: dict[ConnectionId, ConnectionId] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return truth
        if header != GROUND_TRUTH_HEADER:
            raise TraceError(f"unexpected header {header!r}", line=1)
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise TraceError("expected 2 fields", reader.line_num)
            try:
                entry = GroundTruthEntry(ConnectionId(row[0]), ConnectionId(row[1]))
            except TraceError as exc:
                raise TraceError(str(exc), reader.line_num) from None
            if entry.server_conn in truth:
                raise TraceError(f"duplicate server connection {row[0]}", reader.line_num)
            truth[entry.server_conn] = entry.client_conn
    return truth


def write_ground_truth(truth: dict[ConnectionId, ConnectionId], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GROUND_TRUTH_HEADER)
        for server in sorted(truth):
            writer.writerow([server.name, truth[server].name])
