"""Partitioned shortest-path cache.

Answers exact point-to-point road distances out of a compact structure:
for every source u and destination region D_i, all shortest paths from u
into D_i share prefixes ("common sub-paths"); a greedy hitting set over
those sub-paths picks cover nodes c so that dist(u, v) decomposes as
dist(u, c) + dist(c, v). Sub-paths shorter than a threshold L are extended
along their forks, shrinking the hitting set at the cost of up to
b^(L-1) lookups per query (b = max branching factor). A symmetric set of
source-side partitions (built on the reversed graph) supports one-to-many
lookups. All distances are integer millimeters; composition is exact.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

from .network import RoadNetwork

# Reserved infinity for unreachable pairs. Small enough that one addition
# of two sentinels still fits int64, huge against any real mm distance.
INF_MM = 1 << 61

# On-disk encoding of INF_MM (u64 all-ones).
_DISK_INF = (1 << 64) - 1

CACHE_MAGIC = b"SPC1"
CACHE_VERSION = 1


class CacheFormatError(ValueError):
    pass


class BadMagicError(CacheFormatError):
    pass


class VersionMismatchError(CacheFormatError):
    pass


class TruncatedCacheError(CacheFormatError):
    pass


# ---------------------------------------------------------------------------
# Single-source shortest paths
# ---------------------------------------------------------------------------

@dataclass
class SpTree:
    """Single-source shortest-path tree.

    dist_mm[v] is the exact distance in millimeters (INF_MM if unreachable);
    pred[v] is the tree predecessor, chosen as the lowest-id node among all
    shortest predecessors so the tree is deterministic. pred[source] = -1.
    """

    source: int
    dist_mm: np.ndarray
    pred: np.ndarray


def _build_csr(rn: RoadNetwork):
    # dedup parallel edges keeping the minimum before handing to scipy
    # (coo->csr sums duplicates, which would be wrong)
    key = rn.edge_from.astype(np.int64) * rn.n + rn.edge_to
    order = np.argsort(key, kind="stable")
    k = key[order]
    first = np.ones(len(k), dtype=bool)
    first[1:] = k[1:] != k[:-1]
    # edges are sorted by (from, to); within a duplicate group take the min
    wmin = np.minimum.reduceat(rn.edge_len_mm[order], np.flatnonzero(first)) \
        if len(k) else np.empty(0, dtype=np.int64)
    ef = rn.edge_from[order][first]
    et = rn.edge_to[order][first]
    mat = sp.csr_matrix(
        (wmin.astype(np.float64), (ef, et)), shape=(rn.n, rn.n)
    )
    return mat, ef.astype(np.int64), et.astype(np.int64), wmin.astype(np.int64)


def _dist_rows(csr, sources):
    d = _csgraph_dijkstra(csr, directed=True, indices=sources)
    out = np.where(np.isinf(d), float(INF_MM), d)
    return out.astype(np.int64)


def shortest_path_tree(rn: RoadNetwork, source: int) -> SpTree:
    """Exact SSSP distances plus the deterministic lowest-predecessor tree."""
    if not (0 <= source < rn.n):
        raise KeyError(f"unknown node id {source}")
    csr, ef, et, w = _build_csr(rn)
    dist = _dist_rows(csr, [source])[0]
    pred = _pred_row(dist, ef, et, w, rn.n)
    return SpTree(source=source, dist_mm=dist, pred=pred)


def _pred_row(dist_u, ef, et, w, n):
    # lowest-id predecessor among edges that lie on a shortest path
    ok = (dist_u[ef] + w) == dist_u[et]
    pred = np.full(n, -1, dtype=np.int32)
    if ok.any():
        cf, ct = ef[ok], et[ok]
        order = np.lexsort((cf, ct))
        ct, cf = ct[order], cf[order]
        firsts = np.ones(len(ct), dtype=bool)
        firsts[1:] = ct[1:] != ct[:-1]
        pred[ct[firsts]] = cf[firsts]
    return pred


# ---------------------------------------------------------------------------
# Common sub-paths and fork extension (tree-based operations)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubPathSet:
    """Forked common sub-paths out of one source.

    Every destination's shortest path from the source contains at least one
    sub-path entirely, which is what makes hitting-set covers exact.
    """

    source: int
    subpaths: tuple


def _tree_kids(tree: SpTree, destinations):
    """On-path child lists for the subtree spanning source->destinations."""
    dist, pred = tree.dist_mm, tree.pred
    visited = {tree.source}
    kids = {}
    for d in destinations:
        if dist[d] >= INF_MM:
            raise ValueError(f"destination {d} unreachable from {tree.source}")
        x = int(d)
        while x not in visited:
            p = int(pred[x])
            kids.setdefault(p, []).append(x)
            visited.add(x)
            x = p
    for lst in kids.values():
        lst.sort()
    return kids


def common_subpath(tree: SpTree, destinations) -> list:
    """Longest path prefix shared by the tree paths to all destinations."""
    dests = set(int(d) for d in destinations)
    if not dests:
        raise ValueError("destination set must be non-empty")
    kids = _tree_kids(tree, dests)
    path = [tree.source]
    x = tree.source
    while x not in dests:
        ks = kids.get(x, [])
        if len(ks) != 1:
            break
        x = ks[0]
        path.append(x)
    return path


def fork_subpaths(tree: SpTree, destinations, L: int) -> SubPathSet:
    """Extend the common sub-path along its forks until length >= L.

    One forking round extends every sub-path shorter than L by one node
    (splitting at branch points); a sub-path ending at a destination never
    extends past it. At most L-1 rounds are needed.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    dests = set(int(d) for d in destinations)
    kids = _tree_kids(tree, dests)
    subpaths = [common_subpath(tree, dests)]
    for _ in range(L - 1):
        grew = False
        nxt = []
        for p in subpaths:
            x = p[-1]
            if len(p) < L and x not in dests:
                ks = kids.get(x, [])
                if ks:
                    nxt.extend(p + [c] for c in ks)
                    grew = True
                    continue
            nxt.append(p)
        subpaths = nxt
        if not grew:
            break
    return SubPathSet(source=tree.source, subpaths=tuple(tuple(p) for p in subpaths))


# ---------------------------------------------------------------------------
# Greedy hitting set
# ---------------------------------------------------------------------------

def greedy_hitting_set(sets) -> set:
    """Greedy hitting set: repeatedly take the node hitting the most unhit sets.

    Ties break to the lowest node id. Each decrement lowers a frequency by
    exactly one, so stale heap entries are skipped in amortized O(1) per
    decrement and the total work is linear (up to the heap log factor) in
    the summed set sizes.
    """
    import heapq

    sets = [list(dict.fromkeys(s)) for s in sets]
    for s in sets:
        if not s:
            raise ValueError("hitting-set input contains an empty set")

    freq = {}
    where = {}
    for i, s in enumerate(sets):
        for node in s:
            freq[node] = freq.get(node, 0) + 1
            where.setdefault(node, []).append(i)

    heap = [(-f, node) for node, f in freq.items()]
    heapq.heapify(heap)

    alive = [True] * len(sets)
    remaining = len(sets)
    chosen = set()
    while remaining:
        while True:
            nf, node = heapq.heappop(heap)
            if -nf > 0 and freq.get(node, 0) == -nf:
                break
        chosen.add(node)
        freq[node] = 0
        for i in where[node]:
            if not alive[i]:
                continue
            alive[i] = False
            remaining -= 1
            for other in sets[i]:
                f = freq[other]
                if f > 0:
                    freq[other] = f - 1
                    if f - 1 > 0:
                        heapq.heappush(heap, (-(f - 1), other))
    return chosen


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------

@dataclass
class CachePartition:
    """Cache unit answering every query into one destination region.

    row_nodes are the cover nodes plus the destinations; local[r, j] is the
    exact distance from row_nodes[r] to dest_nodes[j]. Per source u,
    cover_row/cover_dist[indptr[u]:indptr[u+1]] hold u's cover entries.
    """

    region_id: int
    side: int  # 0 = destination partition, 1 = source partition (reversed graph)
    n: int
    dest_nodes: np.ndarray
    row_nodes: np.ndarray
    local: np.ndarray
    cover_indptr: np.ndarray
    cover_row: np.ndarray
    cover_dist: np.ndarray
    max_branching: int
    col_of: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.col_of is None:
            self.col_of = np.full(self.n, -1, dtype=np.int32)
            self.col_of[self.dest_nodes] = np.arange(len(self.dest_nodes), dtype=np.int32)

    def query(self, u: int, v: int) -> int:
        """Exact mm distance u -> v for v in this partition's destinations."""
        if u == v:
            return 0
        col = self.col_of[v]
        lo, hi = self.cover_indptr[u], self.cover_indptr[u + 1]
        best = INF_MM
        loc = self.local
        for k in range(lo, hi):
            d = self.cover_dist[k] + loc[self.cover_row[k], col]
            if d < best:
                best = d
        return int(min(best, INF_MM))

    def cover_size(self, u: int) -> int:
        return int(self.cover_indptr[u + 1] - self.cover_indptr[u])

    def cover_nodes(self, u: int):
        lo, hi = self.cover_indptr[u], self.cover_indptr[u + 1]
        return [int(self.row_nodes[r]) for r in self.cover_row[lo:hi]]

    def entry_count(self) -> int:
        """Stored u64 distance entries: cover distances plus local cells."""
        return int(len(self.cover_dist) + self.local.size)

    def mean_cover_size(self) -> float:
        return float(np.diff(self.cover_indptr).mean())


class _SideContext:
    """Shared per-side build data: graph CSR and all-pairs distances."""

    def __init__(self, rn: RoadNetwork):
        self.rn = rn
        self.csr, self.ef, self.et, self.w = _build_csr(rn)
        self.dist = _dist_rows(self.csr, np.arange(rn.n))
        self.max_branching = rn.max_out_degree()

    def adj_of(self, x):
        return self.rn.out_edges(x)


class _PartitionScratch:
    """Per-partition chain-walk accelerator.

    A node x can extend a common sub-path from u exactly when
    dist(u,x) + dist(x,d) == dist(u,d) for every destination d, which (for
    sources reaching all of D) is equivalent to x lying on a shortest path
    to the anchor destination and the anchored difference vector
    dist(x, D) - dist(x, d0) matching u's. Hashing those vectors once makes
    the per-step test O(1).
    """

    def __init__(self, ctx, dest_arr):
        import hashlib

        self.dest_arr = dest_arr
        self.dest_set = set(int(d) for d in dest_arr)
        self.d0 = int(dest_arr[0])
        sub = ctx.dist[:, dest_arr]
        self.full_reach = sub.max(axis=1) < INF_MM
        anchored = sub - sub[:, 0][:, None]
        self.sig = [
            hashlib.blake2b(row.tobytes(), digest_size=16).digest()
            for row in anchored
        ]
        self.col_d0 = np.ascontiguousarray(ctx.dist[:, self.d0])


def _first_hops(ctx, dist_u, x, group):
    """Lowest-id next hop out of x on a shortest path toward each node of group.

    Returns dict child -> array of group nodes routed through it.
    """
    nbrs, ws = ctx.adj_of(x)
    dist_rows = ctx.dist
    buckets = {}
    remaining = np.asarray(group, dtype=np.int64)
    dx = dist_rows[x]
    for c, w in zip(nbrs, ws):
        if remaining.size == 0:
            break
        c = int(c)
        hit = (w + dist_rows[c][remaining]) == dx[remaining]
        if hit.any():
            buckets[c] = remaining[hit]
            remaining = remaining[~hit]
    return buckets


def _subpaths_of_source(ctx, scratch, u, L):
    """Forked common sub-paths from u into the partition, for the cache build.

    The self-query dist(u,u) is answered as a trivial identity by the cache,
    so u itself is excluded from the destinations to cover.
    """
    dist_u = ctx.dist[u]
    dest_arr = scratch.dest_arr
    reach = dest_arr[(dist_u[dest_arr] < INF_MM) & (dest_arr != u)]
    if reach.size == 0:
        return []
    reach_set = set(int(d) for d in reach)

    path = [u]
    x = u
    if scratch.full_reach[u]:
        # O(1) per-step test via the anchored-signature equivalence
        sig, col_d0 = scratch.sig, scratch.col_d0
        sig_u = sig[u]
        base_d0 = col_d0[u]
        while x not in reach_set:
            nbrs, ws = ctx.adj_of(x)
            dx = dist_u[x]
            for c, w in zip(nbrs, ws):
                c = int(c)
                if (
                    dist_u[c] == dx + w
                    and sig[c] == sig_u
                    and dist_u[c] + col_d0[c] == base_d0
                ):
                    x = c
                    path.append(c)
                    break
            else:
                break
    else:
        # partial reachability: exact vector test per step
        dist_rows = ctx.dist
        dd = dist_u[reach]
        while x not in reach_set:
            nbrs, ws = ctx.adj_of(x)
            dx = dist_u[x]
            advanced = False
            for c, w in zip(nbrs, ws):
                c = int(c)
                if dist_u[c] != dx + w:
                    continue
                if np.all(dist_u[c] + dist_rows[c][reach] == dd):
                    x = c
                    path.append(c)
                    advanced = True
                    break
            if not advanced:
                break

    # fork rounds: extend sub-paths shorter than L by one node per round
    active = [(path, reach)]
    final = []
    rounds = 0
    while active and rounds < L - 1:
        rounds += 1
        nxt = []
        for p, group in active:
            x = p[-1]
            if len(p) >= L or bool((group == x).any()):
                final.append(p)
                continue
            buckets = _first_hops(ctx, dist_u, x, group)
            if not buckets:
                final.append(p)
                continue
            for c in sorted(buckets):
                nxt.append((p + [c], buckets[c]))
        active = nxt
    final.extend(p for p, _ in active)
    return final


def build_partition(
    rn: RoadNetwork, destinations, L: int, region_id: int = 0,
    side: int = 0, _ctx: _SideContext | None = None,
) -> CachePartition:
    """Build one cache partition for the given destination set."""
    if len(destinations) == 0:
        raise ValueError("destination set must be non-empty")
    ctx = _ctx if _ctx is not None else _SideContext(rn)
    n = rn.n
    dest_arr = np.asarray(sorted(int(d) for d in destinations), dtype=np.int64)
    scratch = _PartitionScratch(ctx, dest_arr)

    all_subpaths = []
    per_source = []
    for u in range(n):
        sps = _subpaths_of_source(ctx, scratch, u, L)
        per_source.append(sps)
        all_subpaths.extend(sps)

    hitting = greedy_hitting_set(all_subpaths) if all_subpaths else set()

    indptr = np.zeros(n + 1, dtype=np.int64)
    cover_nodes_per_source = []
    designated = set()
    for u in range(n):
        chosen = []
        for path in per_source[u]:
            for node in path:
                if node in hitting:
                    if node not in chosen:
                        chosen.append(node)
                    break
        cover_nodes_per_source.append(sorted(chosen))
        designated.update(chosen)
        indptr[u + 1] = indptr[u] + len(chosen)

    # local-matrix rows: only cover nodes that some source actually uses
    # (destinations appear as rows exactly when they designate themselves);
    # self-queries dist(v, v) are answered as a trivial identity instead
    row_nodes = np.asarray(sorted(designated), dtype=np.int64)
    row_of = {int(node): r for r, node in enumerate(row_nodes)}
    local = (
        ctx.dist[np.ix_(row_nodes, dest_arr)].copy()
        if len(row_nodes)
        else np.empty((0, len(dest_arr)), dtype=np.int64)
    )

    cover_row = np.empty(indptr[-1], dtype=np.int32)
    cover_dist = np.empty(indptr[-1], dtype=np.int64)
    k = 0
    for u in range(n):
        for node in cover_nodes_per_source[u]:
            cover_row[k] = row_of[node]
            cover_dist[k] = ctx.dist[u][node]
            k += 1

    return CachePartition(
        region_id=region_id,
        side=side,
        n=n,
        dest_nodes=dest_arr,
        row_nodes=row_nodes,
        local=local,
        cover_indptr=indptr,
        cover_row=cover_row,
        cover_dist=cover_dist,
        max_branching=ctx.max_branching,
    )


# ---------------------------------------------------------------------------
# The full cache
# ---------------------------------------------------------------------------

@dataclass
class DistanceCache:
    """Region-partitioned distance cache over a road network.

    dest_partitions[i] answers dist(u, v) for v in region i;
    src_partitions[i] (built on the reversed graph) answers dist(u, v)
    for u in region i, enabling one-to-many lookups.
    """

    n: int
    L: int
    region_of: np.ndarray
    region_ids: list
    dest_partitions: list
    src_partitions: list

    def _dest_part(self, v):
        return self.dest_partitions[self.region_of[v]]

    def dist_query(self, u: int, v: int) -> int:
        """Exact shortest distance u -> v in mm (INF_MM if unreachable)."""
        return self._dest_part(v).query(u, v)

    def dist_query_from(self, u: int, v: int) -> int:
        """Same value as dist_query, resolved via the source-side partitions."""
        part = self.src_partitions[self.region_of[u]]
        return part.query(v, u)

    def dist_one_to_many(self, u: int, targets) -> np.ndarray:
        """Vector of dist(u, t) using u's source-side partition."""
        part = self.src_partitions[self.region_of[u]]
        col = part.col_of[u]
        targets = np.asarray(targets, dtype=np.int64)
        out = np.empty(len(targets), dtype=np.int64)
        indptr, rows, dists, loc = (
            part.cover_indptr, part.cover_row, part.cover_dist, part.local,
        )
        for i, t in enumerate(targets):
            if t == u:
                out[i] = 0
                continue
            lo, hi = indptr[t], indptr[t + 1]
            if lo == hi:
                out[i] = INF_MM
                continue
            out[i] = min(INF_MM, (dists[lo:hi] + loc[rows[lo:hi], col]).min())
        return out

    def dist_matrix(self, sources, dests) -> np.ndarray:
        """Bulk exact distances (len(sources) x len(dests)), vectorized."""
        sources = np.asarray(sources, dtype=np.int64)
        dests = np.asarray(dests, dtype=np.int64)
        out = np.empty((len(sources), len(dests)), dtype=np.int64)
        regions = self.region_of[dests]
        for rid in np.unique(regions):
            part = self.dest_partitions[rid]
            sel = np.flatnonzero(regions == rid)
            cols = part.col_of[dests[sel]]
            indptr = part.cover_indptr
            counts = indptr[sources + 1] - indptr[sources]
            if int(counts.sum()) == 0:
                out[:, sel] = INF_MM
                continue
            # expand the CSR cover entries of every source
            starts = indptr[sources]
            idx = np.concatenate(
                [np.arange(s, s + c) for s, c in zip(starts, counts)]
            )
            expanded = part.cover_dist[idx][:, None] + part.local[
                np.ix_(part.cover_row[idx], cols)
            ]
            seg = np.zeros(len(sources), dtype=np.int64)
            if len(sources) > 1:
                np.cumsum(counts[:-1], out=seg[1:])
            nonempty = counts > 0
            res = np.full((len(sources), len(sel)), INF_MM, dtype=np.int64)
            if nonempty.any():
                red = np.minimum.reduceat(expanded, seg[nonempty], axis=0)
                res[nonempty] = red
            np.minimum(res, INF_MM, out=res)
            out[:, sel] = res
        eq = sources[:, None] == dests[None, :]
        out[eq] = 0
        return out

    def path_query(self, rn: RoadNetwork, u: int, v: int) -> list:
        """One exact shortest path u -> v as a node list.

        Depth-first walk pruned by the membership test
        dist(u,w) + dist(w,v) == dist(u,v); no backtracking needed.
        """
        if u == v:
            return [u]
        total = self.dist_query(u, v)
        if total >= INF_MM:
            raise ValueError(f"node {v} unreachable from {u}")
        path = [u]
        x, d = u, 0
        while x != v:
            nbrs, ws = rn.out_edges(x)
            for c, w in zip(nbrs, ws):
                c = int(c)
                rest = self.dist_query(c, v)
                if rest < INF_MM and d + w + rest == total:
                    x = c
                    d += int(w)
                    path.append(x)
                    break
            else:
                raise AssertionError("membership test failed; cache inconsistent")
        return path

    # -- size accounting ---------------------------------------------------

    def all_partitions(self):
        return list(self.dest_partitions) + list(self.src_partitions)

    def stored_entries(self) -> int:
        return sum(p.entry_count() for p in self.all_partitions())

    def mean_cover_size(self) -> float:
        sizes = [np.diff(p.cover_indptr) for p in self.all_partitions()]
        return float(np.concatenate(sizes).mean())


def build_cache(
    rn: RoadNetwork, region_map, L: int = 2, threads: int | None = None
) -> DistanceCache:
    """Build destination and source partitions for every region.

    region_map: dict or array mapping every node id to a region label.
    Partitions are independent work units processed by a thread pool
    (width from `threads` or POOLSIM_THREADS) and merged by region index.
    """
    n = rn.n
    region_of_raw = np.empty(n, dtype=np.int64)
    if hasattr(region_map, "__getitem__") and not isinstance(region_map, dict):
        arr = np.asarray(region_map)
        if len(arr) != n:
            raise ValueError("region map must cover every node")
        region_of_raw[:] = arr
    else:
        for v in range(n):
            if v not in region_map:
                raise ValueError(f"node {v} missing from region map")
            region_of_raw[v] = region_map[v]

    region_ids = sorted(set(int(r) for r in region_of_raw))
    region_index = {r: i for i, r in enumerate(region_ids)}
    region_of = np.asarray([region_index[int(r)] for r in region_of_raw], dtype=np.int32)

    fwd = _SideContext(rn)
    rev = _SideContext(rn.reversed())

    if threads is None:
        threads = int(os.environ.get("POOLSIM_THREADS", "0")) or 1

    members = [np.flatnonzero(region_of == i) for i in range(len(region_ids))]
    for i, m in enumerate(members):
        if len(m) == 0:
            raise ValueError(f"region {region_ids[i]} has no nodes")

    def task(args):
        side, i = args
        ctx = fwd if side == 0 else rev
        graph = rn if side == 0 else ctx.rn
        return build_partition(
            graph, members[i], L, region_id=region_ids[i], side=side, _ctx=ctx
        )

    jobs = [(0, i) for i in range(len(region_ids))] + [
        (1, i) for i in range(len(region_ids))
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, jobs))
    else:
        results = [task(j) for j in jobs]

    k = len(region_ids)
    return DistanceCache(
        n=n,
        L=L,
        region_of=region_of,
        region_ids=region_ids,
        dest_partitions=results[:k],
        src_partitions=results[k:],
    )


# ---------------------------------------------------------------------------
# Serialization (format documented in docs/cache-format.md)
# ---------------------------------------------------------------------------

def _mm_to_disk(arr):
    out = arr.astype(np.uint64)
    out[arr >= INF_MM] = _DISK_INF
    return out.astype("<u8")


def _mm_from_disk(arr):
    out = arr.astype(np.int64, casting="unsafe", copy=True)
    out[arr == _DISK_INF] = INF_MM
    return out


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, nbytes, what):
        if self.pos + nbytes > len(self.data):
            raise TruncatedCacheError(f"truncated stream while reading {what}")
        chunk = self.data[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]

    def array(self, dtype, count, what):
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count, what), dtype=dtype).copy()


def serialize_cache(cache: DistanceCache) -> bytes:
    out = bytearray()
    out += CACHE_MAGIC
    parts = cache.all_partitions()
    out += struct.pack(
        "<IIII", CACHE_VERSION, cache.L, cache.n, len(parts)
    )
    out += struct.pack("<I", len(cache.region_ids))
    out += np.asarray(cache.region_ids, dtype="<u4").tobytes()
    out += cache.region_of.astype("<u4").tobytes()
    for p in parts:
        out += struct.pack("<BI", p.side, p.region_id)
        out += struct.pack("<I", len(p.dest_nodes))
        out += p.dest_nodes.astype("<u4").tobytes()
        out += struct.pack("<I", len(p.row_nodes))
        out += p.row_nodes.astype("<u4").tobytes()
        out += struct.pack("<I", p.max_branching)
        out += p.cover_indptr.astype("<u8").tobytes()
        out += struct.pack("<I", len(p.cover_row))
        out += p.cover_row.astype("<u4").tobytes()
        out += _mm_to_disk(p.cover_dist).tobytes()
        out += _mm_to_disk(p.local.ravel()).tobytes()
    return bytes(out)


def deserialize_cache(data: bytes) -> DistanceCache:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != CACHE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {CACHE_MAGIC!r}")
    version = r.u32("version")
    if version != CACHE_VERSION:
        raise VersionMismatchError(f"unsupported cache version {version}")
    L = r.u32("L")
    n = r.u32("node count")
    part_count = r.u32("partition count")
    k = r.u32("region count")
    region_ids = [int(x) for x in r.array("<u4", k, "region ids")]
    region_of = r.array("<u4", n, "region map").astype(np.int32)

    dest_parts, src_parts = [], []
    for _ in range(part_count):
        side = r.u8("partition side")
        region_id = r.u32("partition region")
        dcount = r.u32("destination count")
        dest_nodes = r.array("<u4", dcount, "destination list").astype(np.int64)
        rcount = r.u32("row count")
        row_nodes = r.array("<u4", rcount, "row nodes").astype(np.int64)
        max_b = r.u32("max branching")
        indptr = r.array("<u8", n + 1, "cover indptr").astype(np.int64)
        ccount = r.u32("cover entry count")
        cover_row = r.array("<u4", ccount, "cover rows").astype(np.int32)
        cover_dist = _mm_from_disk(r.array("<u8", ccount, "cover distances"))
        local = _mm_from_disk(
            r.array("<u8", rcount * dcount, "local matrix")
        ).reshape(rcount, dcount)
        part = CachePartition(
            region_id=region_id, side=side, n=n, dest_nodes=dest_nodes,
            row_nodes=row_nodes, local=local, cover_indptr=indptr,
            cover_row=cover_row, cover_dist=cover_dist, max_branching=max_b,
        )
        (dest_parts if side == 0 else src_parts).append(part)
    if r.pos != len(data):
        raise CacheFormatError("trailing bytes after cache payload")
    return DistanceCache(
        n=n, L=L, region_of=region_of, region_ids=region_ids,
        dest_partitions=dest_parts, src_partitions=src_parts,
    )


def rectangular_regions(rn: RoadNetwork, nx: int, ny: int) -> np.ndarray:
    """Region labels from an nx-by-ny lat/lon block split (synthetic grids)."""
    lat_min, lat_max, lon_min, lon_max = rn.bounding_box()
    eps = 1e-12
    fx = (rn.lon - lon_min) / max(lon_max - lon_min, eps)
    fy = (rn.lat - lat_min) / max(lat_max - lat_min, eps)
    ix = np.minimum((fx * nx).astype(int), nx - 1)
    iy = np.minimum((fy * ny).astype(int), ny - 1)
    return (iy * nx + ix).astype(np.int64)


def load_regions(text, n: int) -> np.ndarray:
    """Parse a region file: one `<node_id> <region_id>` pair per line."""
    region = np.full(n, -1, dtype=np.int64)
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {line_no}: expected '<node_id> <region_id>'")
        v, rid = int(parts[0]), int(parts[1])
        if not (0 <= v < n):
            raise ValueError(f"line {line_no}: unknown node {v}")
        region[v] = rid
    if (region < 0).any():
        missing = int(np.flatnonzero(region < 0)[0])
        raise ValueError(f"node {missing} missing from region file")
    return region
