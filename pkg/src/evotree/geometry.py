"""Geometric primitives over points in R^D.

Provides Lp distances, minimum spanning trees, L1/L2 Steiner trees, Fermat
points and geometric medians. Everything here is a pure function of its
inputs; no shared mutable state.

Steiner solvers:

* L1 exact: dynamic programming over the Hanan grid graph (the grid induced
  by coordinate hyperplanes through the terminals). Optimal rectilinear
  Steiner points can always be chosen on that grid, so the grid DP is exact.
* L1 heuristic: iterated single-point insertion. Candidates are Hanan grid
  points (the full grid when small, otherwise coordinate-wise medians of
  vertex triples, which stay on the grid); the candidate with the largest
  spanning-tree reduction is inserted until no improvement remains.
* L2 exact: enumeration of all full topologies (N <= 6) with convex
  coordinate optimization of the Steiner points, then an exact Fermat-point
  polish so the 120-degree meeting condition holds to high precision.
* L2 heuristic: same enumeration for N <= 6; for larger N a greedy pass that
  replaces sharp tree corners (< 120 degrees) with local Fermat points,
  followed by the same polish.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import BudgetExceededError, InvalidInputError

# Vertices closer than this are considered coincident and merged.
MERGE_TOL = 1e-9
# Maximum deviation from 120 degrees accepted at an L2 Steiner vertex.
ANGLE_TOL = 1e-6
# Array-op budget for the exact L1 grid DP (roughly 2^(N-1) * |grid|^2).
_L1_EXACT_BUDGET = 3e8
_L2_EXACT_MAX_TERMINALS = 6


def _as_point(p, name: str = "point") -> np.ndarray:
    a = np.asarray(p, dtype=float)
    if a.ndim != 1 or a.size < 1:
        raise InvalidInputError(f"{name} must be a 1-D coordinate vector")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


def _as_points(points, name: str = "points") -> np.ndarray:
    pts = [_as_point(p, name) for p in points]
    if not pts:
        raise InvalidInputError(f"{name} must be non-empty")
    dim = pts[0].size
    if any(p.size != dim for p in pts):
        raise InvalidInputError(f"{name} must share one dimension")
    return np.array(pts, dtype=float)


def _check_norm(p) -> int:
    if p not in (1, 2):
        raise InvalidInputError(f"unsupported norm selector {p!r}; use 1 or 2")
    return int(p)


def lp_distance(a, b, p) -> float:
    """Lp distance between two equal-dimension points."""
    p = _check_norm(p)
    va, vb = _as_point(a, "a"), _as_point(b, "b")
    if va.size != vb.size:
        raise InvalidInputError(
            f"dimension mismatch: {va.size} vs {vb.size}"
        )
    d = va - vb
    if p == 1:
        return float(np.sum(np.abs(d)))
    return float(np.sqrt(np.sum(d * d)))


def _pairwise(points: np.ndarray, p: int) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    if p == 1:
        return np.sum(np.abs(diff), axis=2)
    return np.sqrt(np.sum(diff * diff, axis=2))


@dataclass(frozen=True)
class Tree:
    """A tree over points in R^D.

    vertices holds terminals first (in input order) followed by any Steiner
    points. edges are index pairs (i < j). length is the total Lp edge
    length under `norm`.
    """

    vertices: np.ndarray
    terminal_ids: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    norm: int
    length: float

    @property
    def steiner_ids(self) -> tuple[int, ...]:
        terminal = set(self.terminal_ids)
        return tuple(i for i in range(len(self.vertices)) if i not in terminal)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(len(self.vertices), dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def neighbors(self, v: int) -> tuple[int, ...]:
        out = []
        for i, j in self.edges:
            if i == v:
                out.append(j)
            elif j == v:
                out.append(i)
        return tuple(sorted(out))


def tree_length(t: Tree) -> float:
    """Recompute the total edge length of a tree under its norm."""
    total = 0.0
    for i, j in t.edges:
        total += lp_distance(t.vertices[i], t.vertices[j], t.norm)
    return total


def _canonical_edges(vertices: np.ndarray, edges: Iterable[tuple[int, int]]):
    norm_edges = tuple(sorted((min(i, j), max(i, j)) for i, j in edges))
    key = tuple(
        sorted(
            tuple(sorted((tuple(vertices[i]), tuple(vertices[j]))))
            for i, j in norm_edges
        )
    )
    return norm_edges, key


def _make_tree(vertices: np.ndarray, terminal_ids, edges, p: int) -> Tree:
    vertices = np.asarray(vertices, dtype=float)
    norm_edges, _ = _canonical_edges(vertices, edges)
    length = sum(
        lp_distance(vertices[i], vertices[j], p) for i, j in norm_edges
    )
    return Tree(
        vertices=vertices,
        terminal_ids=tuple(terminal_ids),
        edges=norm_edges,
        norm=p,
        length=float(length),
    )


def validate_tree(t: Tree, rtol: float = 1e-9) -> None:
    """Raise InvalidInputError when a tree violates its structural contract."""
    n = len(t.vertices)
    if sorted(set(t.terminal_ids)) != sorted(t.terminal_ids):
        raise InvalidInputError("duplicate terminal ids")
    if any(v < 0 or v >= n for e in t.edges for v in e):
        raise InvalidInputError("edge references missing vertex")
    if n > 1 and len(t.edges) != n - 1:
        raise InvalidInputError("edge count is not |V| - 1")
    # connectivity via union-find
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in t.edges:
        ri, rj = find(i), find(j)
        if ri == rj:
            raise InvalidInputError("tree contains a cycle")
        parent[ri] = rj
    if n > 1 and len({find(i) for i in range(n)}) != 1:
        raise InvalidInputError("tree is not connected")
    expected = tree_length(t)
    if abs(expected - t.length) > rtol * max(1.0, abs(expected)):
        raise InvalidInputError("stored length disagrees with edges")
    n_terminals = len(t.terminal_ids)
    if len(t.steiner_ids) > max(0, n_terminals - 2):
        raise InvalidInputError("more Steiner vertices than N - 2")
    if t.norm == 2:
        deg = t.degrees()
        for s in t.steiner_ids:
            if deg[s] != 3:
                raise InvalidInputError("L2 Steiner vertex degree != 3")


# ---------------------------------------------------------------------------
# Minimum spanning tree
# ---------------------------------------------------------------------------


def _mst_edges(dist: np.ndarray) -> list[tuple[int, int]]:
    """Prim's algorithm on a full distance matrix; index tie-break."""
    n = dist.shape[0]
    if n <= 1:
        return []
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    best_from = np.zeros(n, dtype=int)
    in_tree[0] = True
    best[0] = 0.0
    np.minimum(best, dist[0], out=best)
    best_from[:] = 0
    edges = []
    for _ in range(n - 1):
        masked = np.where(in_tree, np.inf, best)
        u = int(np.argmin(masked))
        in_tree[u] = True
        edges.append((int(best_from[u]), u))
        closer = dist[u] < best
        update = closer & ~in_tree
        best[update] = dist[u][update]
        best_from[update] = u
    return edges


def minimum_spanning_tree(terminals, p) -> Tree:
    """Minimum total Lp length spanning tree on the terminals (no Steiner points)."""
    p = _check_norm(p)
    pts = _as_points(terminals, "terminals")
    dist = _pairwise(pts, p)
    edges = _mst_edges(dist)
    return _make_tree(pts, range(len(pts)), edges, p)


def _mst_length(points: np.ndarray, p: int) -> float:
    dist = _pairwise(points, p)
    edges = _mst_edges(dist)
    return float(sum(dist[i, j] for i, j in edges))


# ---------------------------------------------------------------------------
# Fermat point and geometric median
# ---------------------------------------------------------------------------


def fermat_point(a, b, c) -> np.ndarray:
    """Point minimizing the summed L2 distance to three points.

    All triangle angles < 120 degrees: the interior point whose incident
    directions meet pairwise at 120 degrees (computed from the isogonic
    center's trilinear coordinates). Any angle >= 120 degrees: that vertex.
    Collinear input: the middle point, by convention.
    """
    va, vb, vc = _as_point(a, "a"), _as_point(b, "b"), _as_point(c, "c")
    if not (va.size == vb.size == vc.size):
        raise InvalidInputError("dimension mismatch")
    return _fermat3(va, vb, vc)


def _fermat3(va: np.ndarray, vb: np.ndarray, vc: np.ndarray) -> np.ndarray:
    """fermat_point without input validation, for inner loops."""
    verts = (va, vb, vc)
    # opposite side lengths
    sides = np.array(
        [
            np.linalg.norm(vb - vc),
            np.linalg.norm(vc - va),
            np.linalg.norm(va - vb),
        ]
    )
    scale = float(np.max(sides))
    if scale <= 0.0:
        return va.copy()
    if np.min(sides) <= 1e-12 * scale:
        # two points coincide; the duplicated point is optimal
        dup = int(np.argmin(sides))
        return verts[(dup + 1) % 3].copy()
    # collinearity: compare longest side against the sum of the others
    longest = int(np.argmax(sides))
    others = sides[[i for i in range(3) if i != longest]]
    if abs(float(np.sum(others)) - float(sides[longest])) <= 1e-12 * scale:
        return verts[longest].copy()  # opposite the longest side = middle point
    cosines = np.empty(3)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        cosines[i] = (sides[j] ** 2 + sides[k] ** 2 - sides[i] ** 2) / (
            2.0 * sides[j] * sides[k]
        )
    wide = int(np.argmin(cosines))
    if cosines[wide] <= -0.5 + 1e-15:
        return verts[wide].copy()
    angles = np.arccos(np.clip(cosines, -1.0, 1.0))
    # barycentric weights of the isogonic center: side_i / sin(angle_i + 60 deg)
    weights = sides / np.sin(angles + math.pi / 3.0)
    weights = weights / np.sum(weights)
    return weights[0] * va + weights[1] * vb + weights[2] * vc


def _median_lower(values: np.ndarray) -> float:
    s = np.sort(values)
    return float(s[(len(s) - 1) // 2])


def geometric_median(points, p) -> np.ndarray:
    """Point minimizing the summed Lp distance to a point set.

    p=1: coordinate-wise median, taking the lower middle value on even
    counts. p=2: an input point when one is optimal, otherwise Weiszfeld
    iteration run until the certified objective gap is below 1e-9.
    """
    p = _check_norm(p)
    pts = _as_points(points, "points")
    if p == 1:
        return np.array([_median_lower(pts[:, d]) for d in range(pts.shape[1])])
    n = len(pts)
    if n == 1:
        return pts[0].copy()
    span = float(np.max(np.ptp(pts, axis=0))) or 1.0
    # optimality test at each distinct input point
    for idx in range(n):
        y = pts[idx]
        d = np.linalg.norm(pts - y, axis=1)
        at = d <= 1e-12 * span
        rest = pts[~at]
        if len(rest) == 0:
            return y.copy()
        units = (rest - y) / np.linalg.norm(rest - y, axis=1)[:, None]
        pull = np.linalg.norm(np.sum(units, axis=0))
        if pull <= np.count_nonzero(at) + 1e-12:
            return y.copy()
    x = np.mean(pts, axis=0)
    diam = float(
        np.linalg.norm(np.max(pts, axis=0) - np.min(pts, axis=0))
    ) or 1.0
    for _ in range(10000):
        d = np.linalg.norm(pts - x, axis=1)
        if np.any(d <= 1e-14 * span):
            # landed on a datum that failed the optimality test: nudge off it
            x = x + 1e-9 * span
            continue
        w = 1.0 / d
        x = np.sum(pts * w[:, None], axis=0) / np.sum(w)
        d = np.linalg.norm(pts - x, axis=1)
        if np.all(d > 0):
            grad = np.sum((x - pts) / d[:, None], axis=0)
            # convexity: objective gap <= |grad| * diameter of the hull
            if float(np.linalg.norm(grad)) * diam < 1e-9:
                break
    return x


# ---------------------------------------------------------------------------
# L1 Steiner trees
# ---------------------------------------------------------------------------


def _hanan_grid(terminals: np.ndarray) -> np.ndarray:
    axes = [np.unique(terminals[:, d]) for d in range(terminals.shape[1])]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _steiner_l1_exact(terminals: np.ndarray) -> Tree:
    """Optimal L1 Steiner tree via subset DP on the Hanan grid graph."""
    n = len(terminals)
    nodes = _hanan_grid(terminals)
    v = len(nodes)
    budget = (2 ** (n - 1)) * float(v) * float(v)
    if budget > _L1_EXACT_BUDGET:
        raise BudgetExceededError(
            f"exact L1 grid DP too large ({n} terminals, {v} grid nodes)"
        )
    dist = _pairwise(nodes, 1)
    # map each terminal onto its grid node
    node_of = []
    for t in terminals:
        hits = np.where(np.all(np.abs(nodes - t) <= 0.0, axis=1))[0]
        node_of.append(int(hits[0]))
    root = node_of[0]
    others = node_of[1:]
    k = len(others)
    if k == 0:
        return _make_tree(terminals, range(n), [], 1)

    full = (1 << k) - 1
    dp = {}
    split_at = {}  # (mask, v) resolution happens via stored arrays
    relay = {}
    for i in range(k):
        dp[1 << i] = dist[others[i]].copy()
    for mask in range(1, full + 1):
        if mask in dp and mask.bit_count() == 1:
            # still needs relay bookkeeping for backtracking
            relay[mask] = None
            split_at[mask] = None
            continue
        low = mask & (-mask)
        best = None
        best_split = None
        sub = (mask - 1) & mask
        while sub > 0:
            if sub & low:  # canonical: submask containing the lowest bit
                cand = dp[sub] + dp[mask ^ sub]
                if best is None:
                    best = cand
                    best_split = np.full(v, sub, dtype=np.int64)
                else:
                    better = cand < best
                    best = np.where(better, cand, best)
                    best_split[better] = sub
            sub = (sub - 1) & mask
        # relay through the metric closure: one min-plus pass suffices
        total = best[:, None] + dist
        arg = np.argmin(total, axis=0)
        dp[mask] = total[arg, np.arange(v)]
        relay[mask] = arg
        split_at[mask] = best_split

    edges_out: set[tuple[int, int]] = set()

    def backtrack(mask: int, node: int) -> None:
        if mask.bit_count() == 1:
            i = mask.bit_length() - 1
            if others[i] != node:
                edges_out.add((min(others[i], node), max(others[i], node)))
            return
        u = int(relay[mask][node])
        if u != node:
            edges_out.add((min(u, node), max(u, node)))
        sub = int(split_at[mask][u])
        backtrack(sub, u)
        backtrack(mask ^ sub, u)

    backtrack(full, root)

    used = sorted({i for e in edges_out for i in e} | set(node_of))
    remap = {old: new for new, old in enumerate(used)}
    verts = nodes[used]
    edge_list = [(remap[i], remap[j]) for i, j in edges_out]
    # drop possible duplicates/cycles from tie backtracks, then normalize
    sub_dist = _pairwise(verts, 1)
    edge_list = _restrict_mst(sub_dist, edge_list)
    terminal_ids = [remap[node_of_i] for node_of_i in node_of]
    return _finalize_steiner(verts, terminals, terminal_ids, edge_list, 1)


def _restrict_mst(dist: np.ndarray, edges: list[tuple[int, int]]):
    """Kruskal on the given edge subset (used to clean tie backtracks)."""
    n = dist.shape[0]
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    out = []
    for i, j in sorted(set(edges), key=lambda e: (dist[e[0], e[1]], e)):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            out.append((i, j))
    return out


def _incremental_mst_length(
    base_points: np.ndarray, base_edges: list[tuple[int, int]], cand: np.ndarray
) -> float:
    """Length of MST(points + cand) built from old MST edges plus the star to cand."""
    n = len(base_points)
    d_cand = np.sum(np.abs(base_points - cand), axis=1)
    candidate_edges = [
        (float(np.sum(np.abs(base_points[i] - base_points[j]))), i, j)
        for i, j in base_edges
    ]
    candidate_edges += [(float(d_cand[i]), i, n) for i in range(n)]
    candidate_edges.sort()
    parent = list(range(n + 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    total = 0.0
    picked = 0
    for w, i, j in candidate_edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            total += w
            picked += 1
            if picked == n:
                break
    return total


def _triple_medians(points: np.ndarray) -> np.ndarray:
    cands = set()
    n = len(points)
    for i, j, k in itertools.combinations(range(n), 3):
        med = np.median(points[[i, j, k]], axis=0)
        cands.add(tuple(med))
    return np.array(sorted(cands)) if cands else np.empty((0, points.shape[1]))


def _steiner_l1_insertion(terminals: np.ndarray) -> Tree:
    """Iterated single-point insertion over Hanan grid candidates."""
    n = len(terminals)
    pts = terminals.copy()
    dist = _pairwise(pts, 1)
    edges = _mst_edges(dist)
    cur_len = float(sum(dist[i, j] for i, j in edges))
    max_insert = max(0, n - 2)
    inserted = 0
    grid = _hanan_grid(terminals)
    use_full_grid = len(grid) <= 512
    while inserted < max_insert:
        if use_full_grid:
            cands = grid
        else:
            cands = _triple_medians(pts)
        best_gain = 1e-12
        best_cand = None
        for cand in cands:
            if np.any(np.all(np.abs(pts - cand) <= 0.0, axis=1)):
                continue
            new_len = _incremental_mst_length(pts, edges, cand)
            gain = cur_len - new_len
            if gain > best_gain + 1e-15:
                best_gain = gain
                best_cand = cand
        if best_cand is None:
            break
        pts = np.vstack([pts, best_cand])
        dist = _pairwise(pts, 1)
        edges = _mst_edges(dist)
        cur_len = float(sum(dist[i, j] for i, j in edges))
        inserted += 1
    return _finalize_steiner(pts, terminals, list(range(n)), edges, 1)


# ---------------------------------------------------------------------------
# L2 Steiner trees
# ---------------------------------------------------------------------------


def _full_topologies(n: int):
    """All full Steiner topologies on n terminals.

    Terminals are 0..n-1; Steiner vertices are n..2n-3, each of degree 3.
    Built by repeatedly splitting an edge of a smaller topology with a fresh
    Steiner vertex and hanging the next terminal off it.
    """
    base = [((0, n), (1, n), (2, n))]
    count_s = 1
    for t in range(3, n):
        nxt = []
        s_new = n + count_s
        for topo in base:
            for idx, (u, vv) in enumerate(topo):
                edges = list(topo)
                del edges[idx]
                edges += [(u, s_new), (vv, s_new), (t, s_new)]
                nxt.append(tuple(edges))
        base = nxt
        count_s += 1
    return base


def _fermat_polish(full: np.ndarray, edges, n_terminals: int, sweeps: int = 4000):
    """Gauss-Seidel sweeps setting each Steiner vertex to its neighbors' Fermat point."""
    nbrs = {}
    for u, v in edges:
        nbrs.setdefault(u, []).append(v)
        nbrs.setdefault(v, []).append(u)
    steiner = [i for i in range(n_terminals, len(full))]
    for _ in range(sweeps):
        move = 0.0
        for s in steiner:
            ns = nbrs.get(s, [])
            if len(ns) != 3:
                continue
            target = _fermat3(full[ns[0]], full[ns[1]], full[ns[2]])
            move = max(move, float(np.max(np.abs(target - full[s]))))
            full[s] = target
        if move < 5e-14:
            break
    return full


def _irls_topology(
    terminals: np.ndarray, edges, n_s: int, iters: int = 200
) -> tuple[np.ndarray, float]:
    """Convex coordinate optimization of a fixed topology.

    Iteratively reweighted least squares: with edge weights 1/length the
    stationarity system is linear in the Steiner coordinates; re-solving it
    drives the configuration to the global optimum of the (convex) total
    length. A small floor on edge lengths keeps degenerate topologies,
    whose Steiner points collapse onto terminals, numerically stable.
    """
    n_t, dim = terminals.shape
    pos = np.vstack([terminals, np.tile(np.mean(terminals, axis=0), (n_s, 1))])
    eu = np.fromiter((e[0] for e in edges), dtype=int)
    ev = np.fromiter((e[1] for e in edges), dtype=int)
    u_s = eu >= n_t
    v_s = ev >= n_t
    floor = 1e-14
    for _ in range(iters):
        diff = pos[eu] - pos[ev]
        lens = np.sqrt(np.sum(diff * diff, axis=1))
        w = 1.0 / np.maximum(lens, floor)
        a_mat = np.zeros((n_s, n_s))
        rhs = np.zeros((n_s, dim))
        iu = eu - n_t
        iv = ev - n_t
        np.add.at(a_mat, (iu[u_s], iu[u_s]), w[u_s])
        np.add.at(a_mat, (iv[v_s], iv[v_s]), w[v_s])
        both = u_s & v_s
        np.add.at(a_mat, (iu[both], iv[both]), -w[both])
        np.add.at(a_mat, (iv[both], iu[both]), -w[both])
        u_only = u_s & ~v_s
        v_only = v_s & ~u_s
        np.add.at(rhs, iu[u_only], w[u_only, None] * pos[ev[u_only]])
        np.add.at(rhs, iv[v_only], w[v_only, None] * pos[eu[v_only]])
        new_coords = np.linalg.solve(a_mat, rhs)
        move = float(np.max(np.abs(new_coords - pos[n_t:])))
        pos[n_t:] = new_coords
        if move < 1e-11:
            break
    diff = pos[eu] - pos[ev]
    length = float(np.sum(np.sqrt(np.sum(diff * diff, axis=1))))
    return pos, length


def _steiner_l2_enumerate(terminals: np.ndarray) -> Tree:
    n = len(terminals)
    mst = minimum_spanning_tree(terminals, 2)
    best, best_key = mst, _canonical_edges(mst.vertices, mst.edges)[1]
    # cheap convex solve on every topology, exact polish on the leaders only
    scored = []
    for topo in _full_topologies(n):
        full, length = _irls_topology(terminals, topo, n - 2, iters=120)
        scored.append((length, topo, full))
    scored.sort(key=lambda t: t[0])
    cutoff = scored[0][0] + 1e-4 if scored else 0.0
    leaders = [s for s in scored[:8] if s[0] <= cutoff] or scored[:1]
    for _, topo, full in leaders:
        full = _fermat_polish(full, topo, n)
        tree = _finalize_steiner(full, terminals, list(range(n)), list(topo), 2)
        if tree is None:
            continue
        key = _canonical_edges(tree.vertices, tree.edges)[1]
        if tree.length < best.length - 1e-12 or (
            abs(tree.length - best.length) <= 1e-12 and key < best_key
        ):
            best, best_key = tree, key
    return best


def _steiner_l2_greedy(terminals: np.ndarray) -> Tree:
    """Greedy corner smoothing: insert Fermat points where edges meet below 120 deg."""
    n = len(terminals)
    pts = [t.copy() for t in terminals]
    dist = _pairwise(terminals, 2)
    edges = set()
    for i, j in _mst_edges(dist):
        edges.add((min(i, j), max(i, j)))
    n_steiner = 0
    cos_limit = -0.5 + 1e-9

    def neighbor_map():
        nb = {}
        for u, v in edges:
            nb.setdefault(u, []).append(v)
            nb.setdefault(v, []).append(u)
        return nb

    while n_steiner < n - 2:
        nb = neighbor_map()
        best = None
        for v, ns in nb.items():
            for a, b in itertools.combinations(sorted(ns), 2):
                ea = np.asarray(pts[a]) - np.asarray(pts[v])
                eb = np.asarray(pts[b]) - np.asarray(pts[v])
                la, lb = np.linalg.norm(ea), np.linalg.norm(eb)
                if la <= MERGE_TOL or lb <= MERGE_TOL:
                    continue
                cosang = float(np.dot(ea, eb) / (la * lb))
                if cosang <= cos_limit:
                    continue  # already >= 120 degrees apart
                f = _fermat3(pts[v], pts[a], pts[b])
                gain = (
                    la
                    + lb
                    - np.linalg.norm(f - pts[v])
                    - np.linalg.norm(f - pts[a])
                    - np.linalg.norm(f - pts[b])
                )
                if gain > 1e-12 and (best is None or gain > best[0]):
                    best = (gain, v, a, b, f)
        if best is None:
            break
        _, v, a, b, f = best
        s = len(pts)
        pts.append(np.asarray(f, dtype=float))
        edges.discard((min(v, a), max(v, a)))
        edges.discard((min(v, b), max(v, b)))
        edges.update(
            {(min(v, s), max(v, s)), (min(a, s), max(a, s)), (min(b, s), max(b, s))}
        )
        n_steiner += 1
        # splice Steiner vertices left with degree 2
        nb = neighbor_map()
        for w in range(n, len(pts)):
            ns = nb.get(w, [])
            if len(ns) == 2:
                x, y = ns
                edges.discard((min(w, x), max(w, x)))
                edges.discard((min(w, y), max(w, y)))
                edges.add((min(x, y), max(x, y)))
                nb = neighbor_map()
    all_pts = np.array(pts)
    all_pts = _fermat_polish(all_pts, list(edges), n)
    tree = _finalize_steiner(all_pts, terminals, list(range(n)), list(edges), 2)
    if tree is None:
        return minimum_spanning_tree(terminals, 2)
    return tree


# ---------------------------------------------------------------------------
# Shared finalization
# ---------------------------------------------------------------------------


def _finalize_steiner(
    vertices: np.ndarray,
    terminals: np.ndarray,
    terminal_ids: Sequence[int],
    edges: Sequence[tuple[int, int]],
    p: int,
) -> Optional[Tree]:
    """Contract coincident vertices, splice pass-through Steiner points, canonicalize.

    Returns None when contraction leaves an L2 Steiner vertex without
    degree 3 (the caller then discards this candidate topology).
    """
    n_vert = len(vertices)
    parent = list(range(n_vert))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    terminal_set = set(int(t) for t in terminal_ids)

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra == rb:
            return
        # keep terminal representatives so merges fold into terminals
        if ra in terminal_set:
            parent[rb] = ra
        else:
            parent[ra] = rb

    for i, j in edges:
        if lp_distance(vertices[i], vertices[j], p) <= MERGE_TOL:
            union(i, j)
    # also merge Steiner vertices sitting on terminals without a direct edge
    for s in range(n_vert):
        if s in terminal_set:
            continue
        for t in terminal_set:
            if lp_distance(vertices[s], vertices[t], p) <= MERGE_TOL:
                union(s, t)
                break

    contracted = {}
    for i in range(n_vert):
        contracted.setdefault(find(i), len(contracted))
    new_edges = set()
    for i, j in edges:
        a, b = contracted[find(i)], contracted[find(j)]
        if a != b:
            new_edges.add((min(a, b), max(a, b)))
    coords = np.zeros((len(contracted), vertices.shape[1]))
    for old, root in ((i, find(i)) for i in range(n_vert)):
        coords[contracted[root]] = vertices[root]
    new_terminal = {}
    for t in terminal_ids:
        new_terminal[contracted[find(int(t))]] = True

    # splice non-terminal vertices of degree <= 2
    changed = True
    while changed:
        changed = False
        deg = {}
        nbr = {}
        for a, b in new_edges:
            deg[a] = deg.get(a, 0) + 1
            deg[b] = deg.get(b, 0) + 1
            nbr.setdefault(a, []).append(b)
            nbr.setdefault(b, []).append(a)
        for v_idx in list(deg):
            if v_idx in new_terminal:
                continue
            if deg.get(v_idx, 0) == 1:
                u = nbr[v_idx][0]
                new_edges.discard((min(u, v_idx), max(u, v_idx)))
                changed = True
                break
            if deg.get(v_idx, 0) == 2:
                x, y = nbr[v_idx]
                new_edges.discard((min(x, v_idx), max(x, v_idx)))
                new_edges.discard((min(y, v_idx), max(y, v_idx)))
                if x != y:
                    new_edges.add((min(x, y), max(x, y)))
                changed = True
                break

    used = sorted({i for e in new_edges for i in e} | set(
        idx for idx, is_t in new_terminal.items() if is_t
    ))
    remap = {old: new for new, old in enumerate(used)}
    final_edges = [(remap[a], remap[b]) for a, b in new_edges]
    final_coords = coords[used]

    # order: terminals first, in input terminal order, then Steiner by coords
    term_order = []
    seen = set()
    for t in terminal_ids:
        ci = contracted[find(int(t))]
        if ci in remap and ci not in seen:
            term_order.append(remap[ci])
            seen.add(ci)
    steiner_order = sorted(
        (i for i in range(len(used)) if i not in term_order),
        key=lambda i: tuple(final_coords[i]),
    )
    order = term_order + steiner_order
    pos = {old: new for new, old in enumerate(order)}
    final_coords = final_coords[order]
    final_edges = [(pos[a], pos[b]) for a, b in final_edges]
    terminal_ids_out = list(range(len(term_order)))

    if p == 2:
        deg = np.zeros(len(final_coords), dtype=int)
        for a, b in final_edges:
            deg[a] += 1
            deg[b] += 1
        for s in range(len(term_order), len(final_coords)):
            if deg[s] != 3:
                return None
    return _make_tree(final_coords, terminal_ids_out, final_edges, p)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def steiner_tree(terminals, p, mode: str = "auto") -> Tree:
    """Tree of minimum (or near-minimum) total Lp length spanning the terminals.

    mode selects the solver: "exact-small" enumerates within a budget and is
    limited to N <= 6 terminals; "heuristic" always runs the bounded
    heuristics; "auto" uses the exact solver when it fits the budget and
    falls back to the heuristic.
    """
    p = _check_norm(p)
    if mode not in ("exact-small", "heuristic", "auto"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    pts = _as_points(terminals, "terminals")
    n = len(pts)
    if n == 1:
        return _make_tree(pts, [0], [], p)
    if n == 2:
        return _make_tree(pts, [0, 1], [(0, 1)], p)
    if mode == "exact-small" and n > _L2_EXACT_MAX_TERMINALS:
        raise BudgetExceededError(
            f"exact-small mode supports at most {_L2_EXACT_MAX_TERMINALS} terminals, got {n}"
        )

    if p == 1:
        if mode == "exact-small":
            return _steiner_l1_exact(pts)
        if mode == "auto" and n <= _L2_EXACT_MAX_TERMINALS:
            try:
                return _steiner_l1_exact(pts)
            except BudgetExceededError:
                pass
        return _steiner_l1_insertion(pts)
    if mode == "exact-small" or n <= _L2_EXACT_MAX_TERMINALS:
        return _steiner_l2_enumerate(pts)
    return _steiner_l2_greedy(pts)
