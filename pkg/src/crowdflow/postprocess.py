"""From predicted maps to detections and tracks.

Localization is strict-maximum suppression over a square window.  Tracking
builds the classic unit-capacity flow network over detections (entry, exit,
detection and transition arcs) and solves it with successive shortest
paths under Johnson potentials, stopping once another path would raise the
total cost.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

__all__ = [
    "Detection", "Tracklet", "localize", "count_from_density",
    "FlowGraph", "build_flow_graph", "solve_min_cost_flow", "track",
    "save_detections", "load_detections", "save_tracklets", "load_tracklets",
]


@dataclass(frozen=True)
class Detection:
    """A localized head: pixel-center coordinates plus confidence."""

    frame: int
    x: float
    y: float
    conf: float


@dataclass
class Tracklet:
    """One identity over a contiguous run of frames."""

    ident: int
    detections: list[Detection]

    def __post_init__(self):
        frames = [d.frame for d in self.detections]
        if not frames:
            raise ValueError("a tracklet needs at least one detection")
        if any(b - a != 1 for a, b in zip(frames, frames[1:])):
            raise ValueError(f"tracklet frames must be consecutive, got {frames}")

    @property
    def frames(self):
        return [d.frame for d in self.detections]

    @property
    def avg_conf(self) -> float:
        return float(np.mean([d.conf for d in self.detections]))

    def position(self, frame):
        for d in self.detections:
            if d.frame == frame:
                return (d.x, d.y)
        return None


def localize(loc_map, theta=0.25, radius=3, frame=0) -> list[Detection]:
    """Detections are pixels above theta that strictly dominate their
    (2*radius+1)^2 window; equal-valued contenders lose to the lowest (y, x)."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if radius < 1:
        raise ValueError("radius must be at least 1")
    m = np.asarray(loc_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"localization map must be 2-D, got shape {m.shape}")
    size = 2 * radius + 1
    peak = maximum_filter(m, size=size, mode="constant", cval=-np.inf)
    cand = np.argwhere((m >= peak) & (m > theta))
    h, w = m.shape
    dets = []
    for y, x in cand:
        v = m[y, x]
        window = m[max(y - radius, 0):y + radius + 1,
                   max(x - radius, 0):x + radius + 1]
        ties = np.argwhere(window == v)
        ties[:, 0] += max(y - radius, 0)
        ties[:, 1] += max(x - radius, 0)
        best = min((ty, tx) for ty, tx in ties)
        if best == (y, x):
            dets.append(Detection(frame, float(x), float(y), float(v)))
    dets.sort(key=lambda d: (d.y, d.x))
    return dets


def count_from_density(density_map) -> float:
    """Predicted count is the integral of the density surface."""
    return float(np.asarray(density_map, dtype=np.float64).sum())


# ---------------------------------------------------------------------------
# min-cost flow


class FlowGraph:
    """Unit-capacity flow network over detections.

    Node 0 is the source and node 1 the sink; detection ``i`` owns nodes
    ``2 + 2i`` (in) and ``3 + 2i`` (out).  Arcs are stored with their paired
    residual reverse at index ``idx ^ 1``.
    """

    def __init__(self, n_detections: int):
        self.n_nodes = 2 + 2 * n_detections
        self.arc_to: list[int] = []
        self.arc_cap: list[int] = []
        self.arc_cost: list[float] = []
        self.adj: list[list[int]] = [[] for _ in range(self.n_nodes)]
        self.kinds: dict[int, tuple] = {}
        self.detections: list[Detection] = []
        self.topo: list[int] = []

    def add_arc(self, u: int, v: int, cost: float, kind: tuple) -> int:
        idx = len(self.arc_to)
        self.arc_to.extend([v, u])
        self.arc_cap.extend([1, 0])
        self.arc_cost.extend([cost, -cost])
        self.adj[u].append(idx)
        self.adj[v].append(idx + 1)
        self.kinds[idx] = kind
        return idx

    def arcs_of_kind(self, name: str):
        return [(idx, k) for idx, k in self.kinds.items() if k[0] == name]

    @staticmethod
    def in_node(i: int) -> int:
        return 2 + 2 * i

    @staticmethod
    def out_node(i: int) -> int:
        return 3 + 2 * i


def detection_cost(conf: float, conf_eps: float = 1e-6) -> float:
    """Log-odds reward for keeping a detection; clamped away from 0 and 1."""
    c = min(max(conf, conf_eps), 1.0 - conf_eps)
    return float(np.log((1.0 - c) / c))


def build_flow_graph(dets_by_frame, gate=25.0, c_entry=2.0, c_exit=2.0,
                     gamma=0.0, embeddings=None, use_confidence=True,
                     conf_eps=1e-6) -> FlowGraph:
    """Assemble the tracking network from per-frame detection lists.

    Transition arcs only connect consecutive frame indices and only when
    the Euclidean step is within ``gate``.  With ``gamma`` > 0 an embedding
    distance joins the motion cost; ``embeddings`` must then supply one
    vector per detection, in the same frame-major order.
    """
    if gate <= 0:
        raise ValueError("gate radius must be positive")
    frames = sorted(dets_by_frame)
    flat: list[Detection] = []
    index: dict[int, list[int]] = {}
    for f in frames:
        index[f] = []
        for d in dets_by_frame[f]:
            index[f].append(len(flat))
            flat.append(d)
    g = FlowGraph(len(flat))
    g.detections = flat
    if gamma > 0.0 and embeddings is None:
        raise ValueError("gamma > 0 requires embeddings")
    for i, d in enumerate(flat):
        cost = detection_cost(d.conf, conf_eps) if use_confidence else 0.0
        g.add_arc(0, g.in_node(i), c_entry, ("entry", i))
        g.add_arc(g.in_node(i), g.out_node(i), cost, ("det", i))
        g.add_arc(g.out_node(i), 1, c_exit, ("exit", i))
    for f in frames:
        if f + 1 not in index:
            continue
        for i in index[f]:
            for j in index[f + 1]:
                a, b = flat[i], flat[j]
                dist = float(np.hypot(a.x - b.x, a.y - b.y))
                if dist > gate:
                    continue
                cost = dist
                if gamma > 0.0:
                    e = np.asarray(embeddings[i]) - np.asarray(embeddings[j])
                    cost += gamma * float(np.sqrt((e * e).sum()))
                g.add_arc(g.out_node(i), g.in_node(j), cost, ("trans", i, j))
    # frame-major node order makes every arc forward, so one relaxation
    # sweep yields exact initial potentials despite negative arc costs
    g.topo = [0]
    for f in frames:
        for i in index[f]:
            g.topo.extend([g.in_node(i), g.out_node(i)])
    g.topo.append(1)
    return g


def solve_min_cost_flow(graph: FlowGraph):
    """Successive shortest augmenting paths with potentials.

    Augments one unit at a time along the cheapest residual source-sink
    path and stops when that path cost turns non-negative (or the network
    disconnects).  Returns (tracklets, total_cost).
    """
    n = graph.n_nodes
    cap = list(graph.arc_cap)
    cost = graph.arc_cost
    to = graph.arc_to
    adj = graph.adj

    pot = [0.0] * n
    dist0 = [np.inf] * n
    dist0[0] = 0.0
    for u in graph.topo:
        if dist0[u] == np.inf:
            continue
        for idx in adj[u]:
            if cap[idx] > 0 and dist0[u] + cost[idx] < dist0[to[idx]]:
                dist0[to[idx]] = dist0[u] + cost[idx]
    pot = [d if d != np.inf else 0.0 for d in dist0]

    total_cost = 0.0
    flow_arcs: set[int] = set()
    while True:
        dist = [np.inf] * n
        prev_arc = [-1] * n
        dist[0] = 0.0
        heap = [(0.0, 0)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u] + 1e-12:
                continue
            for idx in adj[u]:
                if cap[idx] <= 0:
                    continue
                v = to[idx]
                nd = d + cost[idx] + pot[u] - pot[v]
                if nd < dist[v] - 1e-15:
                    dist[v] = nd
                    prev_arc[v] = idx
                    heapq.heappush(heap, (nd, v))
        if dist[1] == np.inf:
            break
        path_cost = dist[1] + pot[1] - pot[0]
        if path_cost >= -1e-12:
            break
        for v in range(n):
            if dist[v] != np.inf:
                pot[v] += dist[v]
        v = 1
        while v != 0:
            idx = prev_arc[v]
            cap[idx] -= 1
            cap[idx ^ 1] += 1
            if idx % 2 == 0:
                flow_arcs.add(idx)
            else:
                flow_arcs.discard(idx ^ 1)
            v = to[idx ^ 1]
        total_cost += path_cost

    tracklets = _decompose(graph, flow_arcs)
    return tracklets, total_cost


def _decompose(graph: FlowGraph, flow_arcs):
    """Follow unit flows from the source into node-disjoint tracklets."""
    succ: dict[int, int] = {}
    starts: list[int] = []
    for idx in sorted(flow_arcs):
        kind = graph.kinds[idx]
        if kind[0] == "entry":
            starts.append(kind[1])
        elif kind[0] == "trans":
            succ[kind[1]] = kind[2]
    tracklets = []
    for ident, start in enumerate(sorted(starts)):
        chain = [start]
        while chain[-1] in succ:
            chain.append(succ[chain[-1]])
        tracklets.append(
            Tracklet(ident, [graph.detections[i] for i in chain]))
    return tracklets


def track(dets_by_frame, gate=25.0, c_entry=2.0, c_exit=2.0, gamma=0.0,
          embeddings=None, use_confidence=True):
    """Convenience wrapper: build the network and extract tracklets."""
    graph = build_flow_graph(dets_by_frame, gate, c_entry, c_exit, gamma,
                             embeddings, use_confidence)
    tracklets, _ = solve_min_cost_flow(graph)
    return tracklets


# ---------------------------------------------------------------------------
# detection / tracklet files


def save_detections(path, detections):
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "x", "y", "conf"])
        for d in sorted(detections, key=lambda d: (d.frame, d.y, d.x)):
            writer.writerow([d.frame, repr(float(d.x)), repr(float(d.y)),
                             repr(float(d.conf))])


def load_detections(path) -> list[Detection]:
    out = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame", "x", "y", "conf"]:
            raise ValueError(f"{path}: expected header frame,x,y,conf, got {header}")
        for row in reader:
            out.append(Detection(int(row[0]), float(row[1]), float(row[2]),
                                 float(row[3])))
    return out


def save_tracklets(path, tracklets):
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["track_id", "frame", "x", "y", "conf"])
        for t in sorted(tracklets, key=lambda t: t.ident):
            for d in t.detections:
                writer.writerow([t.ident, d.frame, repr(float(d.x)),
                                 repr(float(d.y)), repr(float(d.conf))])


def load_tracklets(path) -> list[Tracklet]:
    rows: dict[int, list[Detection]] = {}
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["track_id", "frame", "x", "y", "conf"]:
            raise ValueError(
                f"{path}: expected header track_id,frame,x,y,conf, got {header}")
        for row in reader:
            rows.setdefault(int(row[0]), []).append(
                Detection(int(row[1]), float(row[2]), float(row[3]),
                          float(row[4])))
    out = []
    for ident in sorted(rows):
        dets = sorted(rows[ident], key=lambda d: d.frame)
        out.append(Tracklet(ident, dets))
    return out
