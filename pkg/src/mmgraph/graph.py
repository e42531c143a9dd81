"""Typed multimodal graphs: construction, temporal aggregation and export."""

from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from mmgraph import tensor as tn
from mmgraph.tensor import Tensor

GRAPH_FORMAT = "mmgraph-graph/1"


class GraphError(ValueError):
    pass


class NodeKind(str, enum.Enum):
    FRAME = "frame"
    OBJECT = "object"
    TEXT = "text"
    FUSION = "fusion"


class EdgeKind(str, enum.Enum):
    TEMPORAL = "temporal"
    SPATIAL = "spatial"
    SEMANTIC = "semantic"


_KIND_ORDER = {NodeKind.FRAME: 0, NodeKind.OBJECT: 1, NodeKind.TEXT: 2, NodeKind.FUSION: 3}


@dataclass
class Node:
    kind: NodeKind
    feature: np.ndarray
    frame_index: int | None = None
    region_id: str | None = None

    def __post_init__(self):
        framed = self.kind in (NodeKind.FRAME, NodeKind.OBJECT)
        if framed != (self.frame_index is not None):
            raise GraphError(f"{self.kind.value} node frame_index={self.frame_index!r} is inconsistent with its kind")


@dataclass
class Edge:
    kind: EdgeKind
    i: int
    j: int
    weight: float
    active: bool = True

    @property
    def pair(self) -> tuple[int, int]:
        return (self.i, self.j) if self.i < self.j else (self.j, self.i)


@dataclass
class GraphConfig:
    spatial_threshold: float = 0.3
    semantic_threshold: float = 0.3
    include_text: bool = True

    def __post_init__(self):
        for name in ("spatial_threshold", "semantic_threshold"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1]")


@dataclass
class MultimodalGraph:
    nodes: list[Node] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)

    def __post_init__(self):
        self._pairs: dict[tuple[int, int], int] = {}
        for k, e in enumerate(self.edges):
            self._register(e, k)

    def _register(self, e: Edge, k: int) -> None:
        if e.i == e.j:
            raise GraphError(f"self-loop on node {e.i}")
        if not (0 <= e.i < len(self.nodes) and 0 <= e.j < len(self.nodes)):
            raise GraphError(f"edge ({e.i}, {e.j}) references a missing node")
        if e.pair in self._pairs:
            raise GraphError(f"duplicate edge between nodes {e.pair}")
        self._pairs[e.pair] = k

    def add_node(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def add_edge(self, kind: EdgeKind, i: int, j: int, weight: float, active: bool = True) -> Edge:
        e = Edge(kind, i, j, float(weight), active)
        self._register(e, len(self.edges))
        self.edges.append(e)
        return e

    def edge_between(self, i: int, j: int) -> Edge | None:
        k = self._pairs.get((i, j) if i < j else (j, i))
        return None if k is None else self.edges[k]

    def copy(self) -> MultimodalGraph:
        return copy.deepcopy(self)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def adjacency(self) -> list[list[int]]:
        """Sorted active neighbours of every node (undirected)."""
        adj: list[list[int]] = [[] for _ in self.nodes]
        for e in self.edges:
            if e.active:
                adj[e.i].append(e.j)
                adj[e.j].append(e.i)
        return [sorted(a) for a in adj]

    def active_edges(self, kind: EdgeKind | None = None) -> list[Edge]:
        return [e for e in self.edges if e.active and (kind is None or e.kind == kind)]

    def count(self, kind: EdgeKind, active_only: bool = True) -> int:
        return sum(1 for e in self.edges if e.kind == kind and (e.active or not active_only))

    def nodes_of(self, kind: NodeKind) -> list[int]:
        return [k for k, n in enumerate(self.nodes) if n.kind == kind]

    def is_floor_edge(self, e: Edge) -> bool:
        """Edges that keep the graph connected and are never pruned.

        Temporal links, frame-to-object containment, text-to-frame links and
        anything touching the fusion node.
        """
        a, b = self.nodes[e.i].kind, self.nodes[e.j].kind
        kinds = {a, b}
        return (e.kind == EdgeKind.TEMPORAL
                or kinds == {NodeKind.FRAME, NodeKind.OBJECT}
                or kinds == {NodeKind.FRAME, NodeKind.TEXT}
                or NodeKind.FUSION in kinds)

    def permuted(self, order: list[int]) -> MultimodalGraph:
        """Graph whose node ``k`` is this graph's node ``order[k]``."""
        inverse = {old: new for new, old in enumerate(order)}
        if sorted(order) != list(range(self.num_nodes)):
            raise GraphError("order must be a permutation of node indices")
        nodes = [copy.deepcopy(self.nodes[o]) for o in order]
        edges = [Edge(e.kind, inverse[e.i], inverse[e.j], e.weight, e.active) for e in self.edges]
        return MultimodalGraph(nodes, edges)

    def connected_components(self) -> int:
        parent = list(range(self.num_nodes))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.active_edges():
            parent[find(e.i)] = find(e.j)
        return len({find(x) for x in range(self.num_nodes)})

    def dense(self) -> dict[str, np.ndarray]:
        """Symmetric n x n masks per active edge kind plus weights and delta."""
        n = self.num_nodes
        out = {k.value: np.zeros((n, n), dtype=bool) for k in EdgeKind}
        weight = np.zeros((n, n))
        delta = np.zeros((n, n))
        for e in self.edges:
            if not e.active:
                continue
            out[e.kind.value][e.i, e.j] = out[e.kind.value][e.j, e.i] = True
            weight[e.i, e.j] = weight[e.j, e.i] = e.weight
            if e.kind == EdgeKind.TEMPORAL:
                fi, fj = self.nodes[e.i].frame_index, self.nodes[e.j].frame_index
                delta[e.i, e.j] = delta[e.j, e.i] = float(abs(fi - fj) == 1)
        out["active"] = out["temporal"] | out["spatial"] | out["semantic"]
        out["weight"] = weight
        out["delta"] = delta
        return out


def initial_edge_weight(f_i, f_j) -> float:
    """Cosine similarity of two equal-length feature vectors."""
    u = np.asarray(f_i, dtype=np.float64)
    v = np.asarray(f_j, dtype=np.float64)
    if u.shape != v.shape:
        raise GraphError(f"cannot compare features of shapes {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= tn.NORM_EPS or nv <= tn.NORM_EPS:
        raise GraphError("edge weight of a zero feature vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _cos_or_zero(u: np.ndarray, v: np.ndarray) -> float:
    try:
        return initial_edge_weight(u, v)
    except GraphError:
        return 0.0


def build_graph(frame_features: np.ndarray,
                objects: list[tuple[int, str, np.ndarray]],
                text_feature: np.ndarray | None,
                cfg: GraphConfig | None = None,
                project_visual: np.ndarray | None = None,
                project_text: np.ndarray | None = None) -> MultimodalGraph:
    """Assemble frame, object and text nodes with temporal/spatial/semantic edges.

    ``project_visual`` (d_s x d_V) and ``project_text`` (d_s x d_T) map both
    modalities into the shared space where text-visual cosines are measured;
    without them the raw features are compared, which needs d_V == d_T.
    """
    cfg = cfg or GraphConfig()
    frames = np.asarray(frame_features, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise GraphError("an episode needs at least one frame")
    g = MultimodalGraph()
    for t, f in enumerate(frames):
        g.add_node(Node(NodeKind.FRAME, f.copy(), frame_index=t))
    obj_ids = []
    for t, name, f in objects:
        obj_ids.append(g.add_node(Node(NodeKind.OBJECT, np.asarray(f, dtype=np.float64).copy(),
                                       frame_index=t, region_id=name)))

    for t in range(len(frames) - 1):
        g.add_edge(EdgeKind.TEMPORAL, t, t + 1, _cos_or_zero(frames[t], frames[t + 1]))
    for k in obj_ids:
        node = g.nodes[k]
        g.add_edge(EdgeKind.SPATIAL, node.frame_index, k, _cos_or_zero(frames[node.frame_index], node.feature))
    for a_pos, a in enumerate(obj_ids):
        for b in obj_ids[a_pos + 1:]:
            na, nb = g.nodes[a], g.nodes[b]
            if na.frame_index != nb.frame_index:
                continue
            w = _cos_or_zero(na.feature, nb.feature)
            if w >= cfg.spatial_threshold:
                g.add_edge(EdgeKind.SPATIAL, a, b, w)

    if cfg.include_text and text_feature is not None:
        text = np.asarray(text_feature, dtype=np.float64)
        tid = g.add_node(Node(NodeKind.TEXT, text.copy()))
        pv = (lambda x: project_visual @ x) if project_visual is not None else (lambda x: x)
        pt = project_text @ text if project_text is not None else text
        for k in range(len(frames)):
            g.add_edge(EdgeKind.SEMANTIC, tid, k, _cos_or_zero(pt, pv(frames[k])))
        for k in obj_ids:
            w = _cos_or_zero(pt, pv(g.nodes[k].feature))
            if w >= cfg.semantic_threshold:
                g.add_edge(EdgeKind.SEMANTIC, k, tid, w)
    return g


def graph_from_episode(episode, cfg: GraphConfig | None = None,
                       project_visual=None, project_text=None) -> MultimodalGraph:
    """Graph over raw (non-aggregated) frame embeddings of an episode."""
    return build_graph(episode.frame_embeddings(), episode.object_embeddings(),
                       episode.text_embedding, cfg, project_visual, project_text)


def temporal_aggregate(frames, query, key, value, mask: np.ndarray | None = None) -> Tensor:
    """Residual single-head scaled dot-product self-attention over frame vectors.

    ``frames`` is T x d; the projections are d x d. ``mask`` (T x T, bool)
    restricts which frames may attend to each other, which is how several
    clips are aggregated in one call without mixing.
    """
    frames = tn.tensor(frames)
    d = frames.shape[1]
    q = frames @ query
    k = frames @ key
    v = frames @ value
    scores = (q @ k.T) * (1.0 / math.sqrt(d))
    if mask is None:
        mask = np.ones((frames.shape[0],) * 2, dtype=bool)
    attn = tn.masked_softmax(scores, mask)
    return frames + attn @ v


# export -----------------------------------------------------------------------

_DOT_STYLE = {
    "temporal": 'color="red", style="dashed"',
    "containment": 'color="black", style="solid"',
    "object": 'color="darkgreen", style="solid"',
    "semantic": 'color="blue", style="dotted"',
    "fusion": 'color="purple", style="dotted"',
}


def _node_name(g: MultimodalGraph, k: int) -> str:
    n = g.nodes[k]
    if n.kind == NodeKind.FRAME:
        return f"I{n.frame_index}"
    if n.kind == NodeKind.OBJECT:
        return f"O{n.frame_index}_{n.region_id}"
    return "T" if n.kind == NodeKind.TEXT else "F"


def _export_order(g: MultimodalGraph) -> list[int]:
    return sorted(range(g.num_nodes), key=lambda k: (_KIND_ORDER[g.nodes[k].kind], k))


def to_dot(g: MultimodalGraph, name: str = "episode") -> str:
    """Graphviz digraph; edges point frame->object, object->text, frame->frame."""
    lines = [f"digraph {json.dumps(name)} {{", "  rankdir=LR;"]
    shapes = {NodeKind.FRAME: "box", NodeKind.OBJECT: "ellipse", NodeKind.TEXT: "note", NodeKind.FUSION: "diamond"}
    order = _export_order(g)
    pos = {old: new for new, old in enumerate(order)}
    for k in order:
        n = g.nodes[k]
        lines.append(f'  "{_node_name(g, k)}" [shape={shapes[n.kind]}, kind="{n.kind.value}"];')
    edges = sorted(g.edges, key=lambda e: (e.kind.value, *sorted((pos[e.i], pos[e.j]))))
    for e in edges:
        a, b = e.i, e.j
        ka, kb = g.nodes[a].kind, g.nodes[b].kind
        # orient edges along the visual -> semantic flow
        if _KIND_ORDER[ka] > _KIND_ORDER[kb] or (ka == kb and g.nodes[a].frame_index is not None
                                   and g.nodes[a].frame_index > g.nodes[b].frame_index):
            a, b = b, a
            ka, kb = kb, ka
        if e.kind == EdgeKind.TEMPORAL:
            style = _DOT_STYLE["temporal"]
        elif e.kind == EdgeKind.SPATIAL:
            style = _DOT_STYLE["containment" if ka == NodeKind.FRAME else "object"]
        else:
            style = _DOT_STYLE["fusion" if NodeKind.FUSION in (ka, kb) else "semantic"]
        if not e.active:
            style = 'color="gray", style="invis"'
        lines.append(f'  "{_node_name(g, a)}" -> "{_node_name(g, b)}" '
                     f'[{style}, kind="{e.kind.value}", weight_value="{e.weight:.6f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_structured(g: MultimodalGraph) -> str:
    order = _export_order(g)
    pos = {old: new for new, old in enumerate(order)}
    nodes = []
    for k in order:
        n = g.nodes[k]
        nodes.append({"kind": n.kind.value, "frame_index": n.frame_index, "region_id": n.region_id,
                      "feature": [float(x) for x in n.feature]})
    edges = [{"kind": e.kind.value, "i": pos[e.i], "j": pos[e.j], "weight": float(e.weight), "active": e.active}
             for e in g.edges]
    edges.sort(key=lambda d: (d["kind"], min(d["i"], d["j"]), max(d["i"], d["j"])))
    return json.dumps({"format": GRAPH_FORMAT, "nodes": nodes, "edges": edges}, indent=1, sort_keys=True) + "\n"


def from_structured(text: str) -> MultimodalGraph:
    doc = json.loads(text)
    if doc.get("format") != GRAPH_FORMAT:
        raise GraphError(f"unknown graph format {doc.get('format')!r}")
    nodes = [Node(NodeKind(n["kind"]), np.asarray(n["feature"], dtype=np.float64),
                  n["frame_index"], n["region_id"]) for n in doc["nodes"]]
    edges = [Edge(EdgeKind(e["kind"]), int(e["i"]), int(e["j"]), float(e["weight"]), bool(e["active"]))
             for e in doc["edges"]]
    return MultimodalGraph(nodes, edges)


def export_graph(g: MultimodalGraph, fmt: str = "dot") -> str:
    if fmt == "dot":
        return to_dot(g)
    if fmt in ("structured", "json"):
        return to_structured(g)
    raise ValueError(f"unknown export format {fmt!r}; expected 'dot' or 'structured'")


def canonical(g: MultimodalGraph) -> MultimodalGraph:
    """Re-order nodes by kind (stable) and edges by (kind, endpoints)."""
    return from_structured(to_structured(g))
