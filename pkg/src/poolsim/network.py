"""Road / walking network model, meeting-point sets and geodesic helpers."""

from __future__ import annotations

import io
import math
import threading
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6_371_000.0

# Edge lengths are quantized to integer millimeters at load time so that
# every downstream distance sum is exact integer arithmetic.
MM_PER_M = 1000


class NetworkParseError(ValueError):
    """Malformed edge-list input; carries the offending line number."""

    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class NetworkValidationError(ValueError):
    """Structurally invalid network (dangling endpoint, bad length, ...)."""


class RoadNetwork:
    """Directed weighted road graph with dense integer node ids.

    Attributes:
        n: number of nodes
        lat, lon: per-node coordinate arrays (degrees)
        edge_from, edge_to: per-edge endpoint arrays
        edge_len_mm: per-edge length in integer millimeters
    """

    def __init__(self, nodes, edges):
        # nodes: iterable of (id, lat, lon); edges: iterable of (u, v, length_m)
        nodes = list(nodes)
        n = len(nodes)
        ids = sorted(nid for nid, _, _ in nodes)
        if ids != list(range(n)):
            raise NetworkValidationError("node ids must be dense integers 0..n-1")
        self.n = n
        self.lat = np.empty(n, dtype=np.float64)
        self.lon = np.empty(n, dtype=np.float64)
        for nid, la, lo in nodes:
            self.lat[nid] = la
            self.lon[nid] = lo

        m = len(edges := list(edges))
        self.edge_from = np.empty(m, dtype=np.int32)
        self.edge_to = np.empty(m, dtype=np.int32)
        self.edge_len_mm = np.empty(m, dtype=np.int64)
        for i, (u, v, length_m) in enumerate(edges):
            if not (0 <= u < n) or not (0 <= v < n):
                raise NetworkValidationError(
                    f"edge ({u}, {v}) references undeclared node "
                    f"{u if not (0 <= u < n) else v}"
                )
            if not math.isfinite(length_m) or length_m <= 0:
                raise NetworkValidationError(
                    f"edge ({u}, {v}) has non-positive or non-finite length {length_m}"
                )
            self.edge_from[i] = u
            self.edge_to[i] = v
            self.edge_len_mm[i] = round(length_m * MM_PER_M)

        # adjacency in CSR form, neighbors sorted by target id for determinism
        order = np.lexsort((self.edge_to, self.edge_from))
        self.edge_from = self.edge_from[order]
        self.edge_to = self.edge_to[order]
        self.edge_len_mm = self.edge_len_mm[order]
        self.adj_indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.adj_indptr, self.edge_from + 1, 1)
        np.cumsum(self.adj_indptr, out=self.adj_indptr)

    @property
    def m(self):
        return len(self.edge_from)

    def out_edges(self, u):
        """(targets, lengths_mm) arrays of u's outgoing edges, ascending target."""
        lo, hi = self.adj_indptr[u], self.adj_indptr[u + 1]
        return self.edge_to[lo:hi], self.edge_len_mm[lo:hi]

    def max_out_degree(self):
        return int(np.diff(self.adj_indptr).max(initial=0))

    def reversed(self):
        """New RoadNetwork with every edge direction flipped."""
        rev = RoadNetwork.__new__(RoadNetwork)
        rev.n = self.n
        rev.lat = self.lat
        rev.lon = self.lon
        order = np.lexsort((self.edge_from, self.edge_to))
        rev.edge_from = self.edge_to[order].copy()
        rev.edge_to = self.edge_from[order].copy()
        rev.edge_len_mm = self.edge_len_mm[order].copy()
        rev.adj_indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.add.at(rev.adj_indptr, rev.edge_from + 1, 1)
        np.cumsum(rev.adj_indptr, out=rev.adj_indptr)
        return rev

    def bounding_box(self):
        """(lat_min, lat_max, lon_min, lon_max) over all nodes."""
        return (
            float(self.lat.min()),
            float(self.lat.max()),
            float(self.lon.min()),
            float(self.lon.max()),
        )


class WalkingNetwork:
    """Undirected pedestrian graph derived from a RoadNetwork.

    Antiparallel directed edges collapse to the minimum length (pedestrians
    ignore one-way restrictions, and the minimum is conservative for the
    walking-distance cap).
    """

    def __init__(self, n, sym_edges):
        # sym_edges: dict (u, v) u<v -> length_mm
        self.n = n
        adj = [[] for _ in range(n)]
        for (u, v), w in sorted(sym_edges.items()):
            adj[u].append((v, w))
            adj[v].append((u, w))
        self.adj = [sorted(lst) for lst in adj]
        self._mp_memo = {}
        self._mp_lock = threading.Lock()

    def edge_count(self):
        return sum(len(a) for a in self.adj) // 2

    def walking_distances(self, source, limit_mm=None):
        """Dijkstra from source; nodes beyond limit_mm are left unreached."""
        import heapq

        dist = {source: 0}
        heap = [(0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, -1):
                continue
            for v, w in self.adj[u]:
                nd = d + w
                if limit_mm is not None and nd > limit_mm:
                    continue
                if nd < dist.get(v, nd + 1):
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        return dist


@dataclass(frozen=True)
class MeetingPointSet:
    """Nodes within walking radius of a center intersection."""

    center: int
    members: frozenset
    radius_m: float

    def __len__(self):
        return len(self.members)

    def sorted_members(self):
        return sorted(self.members)


def load_network(source) -> RoadNetwork:
    """Parse the text edge-list format into a RoadNetwork.

    Format: header `nodes <n> edges <m>`, then n `node <id> <lat> <lon>`
    lines, then m `edge <from> <to> <length_m>` lines. `#` starts a comment.
    """
    if isinstance(source, (str, bytes)):
        text = source.decode() if isinstance(source, bytes) else source
        lines = io.StringIO(text)
    elif hasattr(source, "read"):
        data = source.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        lines = io.StringIO(data)
    else:
        raise TypeError("load_network expects text, bytes or a file object")

    header = None
    nodes, edges = [], []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "nodes":
                if header is not None:
                    raise NetworkParseError("duplicate header", line_no)
                if len(parts) != 4 or parts[2] != "edges":
                    raise NetworkParseError("header must be 'nodes <n> edges <m>'", line_no)
                header = (int(parts[1]), int(parts[3]))
            elif kind == "node":
                if len(parts) != 4:
                    raise NetworkParseError("node line must be 'node <id> <lat> <lon>'", line_no)
                nid, la, lo = int(parts[1]), float(parts[2]), float(parts[3])
                if not (-90.0 <= la <= 90.0) or not (-180.0 <= lo <= 180.0):
                    raise NetworkParseError(f"coordinate out of range: {la}, {lo}", line_no)
                nodes.append((nid, la, lo))
            elif kind == "edge":
                if len(parts) != 4:
                    raise NetworkParseError(
                        "edge line must be 'edge <from> <to> <length_m>'", line_no
                    )
                edges.append((int(parts[1]), int(parts[2]), float(parts[3])))
            else:
                raise NetworkParseError(f"unknown record type {kind!r}", line_no)
        except (ValueError, OverflowError) as exc:
            if isinstance(exc, (NetworkParseError, NetworkValidationError)):
                raise
            raise NetworkParseError(str(exc), line_no) from exc

    if header is None:
        raise NetworkParseError("missing 'nodes <n> edges <m>' header")
    if header != (len(nodes), len(edges)):
        raise NetworkParseError(
            f"header declares {header[0]} nodes / {header[1]} edges, "
            f"found {len(nodes)} / {len(edges)}"
        )
    return RoadNetwork(nodes, edges)


def derive_walking_network(rn: RoadNetwork) -> WalkingNetwork:
    """Symmetrize the driving network, keeping the minimum antiparallel length."""
    sym = {}
    for u, v, w in zip(rn.edge_from, rn.edge_to, rn.edge_len_mm):
        key = (int(u), int(v)) if u < v else (int(v), int(u))
        prev = sym.get(key)
        if prev is None or w < prev:
            sym[key] = int(w)
    return WalkingNetwork(rn.n, sym)


def meeting_points(wn: WalkingNetwork, v: int, d_w_m: float) -> MeetingPointSet:
    """All nodes whose walking shortest distance from v is <= d_w meters.

    Memoized per (node, radius); the memo is lock-protected so concurrent
    simulation threads can share one WalkingNetwork.
    """
    if not (0 <= v < wn.n):
        raise KeyError(f"unknown node id {v}")
    if d_w_m < 0:
        raise ValueError("walking radius must be non-negative")
    limit_mm = round(d_w_m * MM_PER_M)
    key = (v, limit_mm)
    with wn._mp_lock:
        hit = wn._mp_memo.get(key)
    if hit is not None:
        return hit
    dist = wn.walking_distances(v, limit_mm=limit_mm)
    members = frozenset(u for u, d in dist.items() if d <= limit_mm)
    mps = MeetingPointSet(center=v, members=members, radius_m=d_w_m)
    with wn._mp_lock:
        wn._mp_memo[key] = mps
    return mps


def haversine(a, b) -> float:
    """Great-circle distance in meters between (lat, lon) degree pairs."""
    lat1, lon1 = a
    lat2, lon2 = b
    for la, lo in ((lat1, lon1), (lat2, lon2)):
        if not (-90.0 <= la <= 90.0) or not (-180.0 <= lo <= 180.0):
            raise ValueError(f"coordinate out of range: ({la}, {lo})")
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlam = math.radians(lon2 - lon1)
    s = math.sin(dphi / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2.0) ** 2
    return EARTH_RADIUS_M * 2.0 * math.asin(min(1.0, math.sqrt(s)))


def haversine_m(lat1, lon1, lat2, lon2) -> float:
    return haversine((lat1, lon1), (lat2, lon2))


def snap_to_node(p, rn: RoadNetwork) -> int:
    """Node minimizing great-circle distance to p; ties -> lowest node id."""
    if rn.n == 0:
        raise ValueError("cannot snap to an empty network")
    lat, lon = p
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise ValueError(f"coordinate out of range: ({lat}, {lon})")
    # vectorized haversine over all nodes; argmin returns the lowest index on ties
    p1 = math.radians(lat)
    p2 = np.radians(rn.lat)
    dphi = p2 - p1
    dlam = np.radians(rn.lon - lon)
    s = np.sin(dphi / 2.0) ** 2 + math.cos(p1) * np.cos(p2) * np.sin(dlam / 2.0) ** 2
    return int(np.argmin(s))
