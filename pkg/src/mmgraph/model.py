"""Task-modulated graph attention over multimodal episode graphs.

The forward pass runs a whole minibatch as one disjoint-union graph: node
features live in a single ``n x d`` tensor and every per-edge quantity is an
``n x n`` matrix masked by the union's block-diagonal adjacency. Masked
entries never reach the softmax, so the batch members cannot interact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from mmgraph import tensor as tn
from mmgraph.embeddings import Episode
from mmgraph.graph import (
    EdgeKind,
    GraphConfig,
    MultimodalGraph,
    Node,
    NodeKind,
    build_graph,
    temporal_aggregate,
)
from mmgraph.tensor import Tensor

VARIANTS = ("visual_only", "plus_text", "static_graph", "full")
EDGE_KINDS = ("temporal", "spatial", "semantic")


@dataclass
class ModelConfig:
    hidden: int = 32
    layers: int = 2
    spatial_threshold: float = 0.3
    semantic_threshold: float = 0.3
    prune_threshold: float = 0.1
    add_threshold: float = 0.8
    weighted_messages: bool = False
    leaky_slope: float = tn.LEAKY_SLOPE
    init_modulation: float = 0.1

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("need at least one layer and one hidden unit")
        if not self.prune_threshold < self.add_threshold:
            raise ValueError("prune_threshold must be below add_threshold")

    def graph_config(self, include_text: bool = True) -> GraphConfig:
        return GraphConfig(self.spatial_threshold, self.semantic_threshold, include_text)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ModelParams:
    """Named learnable tensors plus the dimensions they were built for."""

    tensors: dict[str, Tensor]
    d_v: int
    d_t: int
    num_classes: int
    variant: str
    config: ModelConfig = field(default_factory=ModelConfig)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def meta(self) -> dict:
        return {"d_v": self.d_v, "d_t": self.d_t, "num_classes": self.num_classes,
                "variant": self.variant, "config": asdict(self.config)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> ModelParams:
        tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}
        return cls(tensors, int(meta["d_v"]), int(meta["d_t"]), int(meta["num_classes"]),
                   str(meta["variant"]), ModelConfig.from_dict(meta.get("config", {})))

    def copy(self) -> ModelParams:
        return ModelParams.from_arrays(self.arrays(), self.meta())

    @property
    def groups(self) -> dict[str, list[str]]:
        """Parameter names grouped the way the gradient report prints them."""
        out: dict[str, list[str]] = {}
        for name in sorted(self.tensors):
            prefix, _, leaf = name.partition(".")
            if prefix.startswith("gat"):
                key = {"W": "W", "a": "a", "M": "M"}.get(leaf, "omega")
            else:
                key = {"temporal": "temporal", "adapt": "lambda", "classifier": "classifier"}.get(prefix)
                if prefix == "fusion":
                    key = {"W_v": "W_v", "W_t": "W_t", "a": "a_fusion"}[leaf]
            out.setdefault(key, []).append(name)
        return out


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def readout_dim(cfg: ModelConfig, variant: str) -> int:
    return 2 * cfg.hidden if variant == "plus_text" else cfg.hidden


def init_params(d_v: int, d_t: int, num_classes: int, cfg: ModelConfig | None = None,
                variant: str = "full", seed: int = 0) -> ModelParams:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    h = cfg.hidden
    arrays: dict[str, np.ndarray] = {}
    for proj in ("query", "key", "value"):
        arrays[f"temporal.{proj}"] = _uniform(rng, (d_v, d_v), d_v)
    arrays["fusion.W_v"] = _uniform(rng, (h, d_v), d_v)
    arrays["fusion.W_t"] = _uniform(rng, (h, d_t), d_t)
    arrays["fusion.a"] = _uniform(rng, (h,), h)
    for layer in range(cfg.layers):
        arrays[f"gat{layer}.W"] = _uniform(rng, (h, h), h)
        arrays[f"gat{layer}.a"] = _uniform(rng, (2 * h,), 2 * h)
        arrays[f"gat{layer}.M"] = _uniform(rng, (h, h), h)
        for kind in EDGE_KINDS:
            arrays[f"gat{layer}.omega_{kind}"] = np.array(cfg.init_modulation)
    for kind in EDGE_KINDS:
        arrays[f"adapt.lambda_{kind}"] = np.array(cfg.init_modulation)
    r = readout_dim(cfg, variant)
    arrays["classifier.W"] = _uniform(rng, (r, num_classes), r)
    arrays["classifier.b"] = np.zeros(num_classes)
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return ModelParams(tensors, d_v, d_t, num_classes, variant, cfg)


@dataclass
class LayerParams:
    W: Tensor
    a: Tensor
    M: Tensor
    omega: dict[str, Tensor]

    @classmethod
    def of(cls, params: ModelParams, layer: int) -> LayerParams:
        p = params.tensors
        return cls(p[f"gat{layer}.W"], p[f"gat{layer}.a"], p[f"gat{layer}.M"],
                   {k: p[f"gat{layer}.omega_{k}"] for k in EDGE_KINDS})


@dataclass
class AdaptParams:
    lam: dict[str, Tensor]
    M: Tensor
    prune_threshold: float = 0.1
    add_threshold: float = 0.8

    def __post_init__(self):
        if not self.prune_threshold < self.add_threshold:
            raise ValueError("prune_threshold must be below add_threshold")

    @classmethod
    def of(cls, params: ModelParams) -> AdaptParams:
        p = params.tensors
        last = params.config.layers - 1
        return cls({k: p[f"adapt.lambda_{k}"] for k in EDGE_KINDS}, p[f"gat{last}.M"],
                   params.config.prune_threshold, params.config.add_threshold)


# per-edge scalar forms --------------------------------------------------------


def _sigmoid(x: float) -> float:
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= tn.NORM_EPS or nv <= tn.NORM_EPS:
        return 0.0
    return float(u @ v / (nu * nv))


def _edge_term(graph: MultimodalGraph, i: int, j: int, h_i, h_j, M, coeffs: dict[str, float]) -> float:
    e = graph.edge_between(i, j)
    if e is None or not e.active:
        raise ValueError(f"no active edge between {i} and {j}")
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    if e.kind == EdgeKind.TEMPORAL:
        delta = float(abs(graph.nodes[i].frame_index - graph.nodes[j].frame_index) == 1)
        return coeffs["temporal"] * delta
    if e.kind == EdgeKind.SPATIAL:
        return coeffs["spatial"] * _cos(h_i, h_j)
    return coeffs["semantic"] * _sigmoid(float(h_i @ np.asarray(M) @ h_j))


def phi(graph: MultimodalGraph, i: int, j: int, h_i, h_j, layer: LayerParams) -> float:
    """Edge-type modulation added to the attention logit for i attending to j."""
    return _edge_term(graph, i, j, h_i, h_j, layer.M.data,
                      {k: float(v.data) for k, v in layer.omega.items()})


def psi(graph: MultimodalGraph, i: int, j: int, h_i, h_j, adapt: AdaptParams) -> float:
    """Edge-type adjustment added to the similarity when refining stored weights."""
    return _edge_term(graph, i, j, h_i, h_j, adapt.M.data,
                      {k: float(v.data) for k, v in adapt.lam.items()})


# dense tensor forms -------------------------------------------------------------


def _kind_term(H: Tensor, masks: dict[str, np.ndarray], M: Tensor, coeffs: dict[str, Tensor]) -> Tensor:
    """sum over edge kinds of coefficient * (delta | cosine | sigmoid(h M h)) on active edges."""
    hn = tn.normalize_rows(H)
    cos = hn @ hn.T
    sem = tn.sigmoid(H @ M @ H.T)
    return (coeffs["temporal"] * masks["delta"]
            + coeffs["spatial"] * (cos * masks["spatial"])
            + coeffs["semantic"] * (sem * masks["semantic"]))


def gat_attention(H: Tensor, masks: dict[str, np.ndarray], layer: LayerParams,
                  slope: float = tn.LEAKY_SLOPE) -> Tensor:
    """Dense n x n attention; row i is i's distribution over its active neighbours."""
    H = tn.tensor(H)
    wh = H @ layer.W
    d = wh.shape[1]
    src = (wh @ layer.a[:d]).reshape((-1, 1))
    dst = (wh @ layer.a[d:]).reshape((1, -1))
    logits = tn.leaky_relu(src + dst, slope) + _kind_term(H, masks, layer.M, layer.omega)
    return tn.masked_softmax(logits, masks["active"])


def edge_weights(H: Tensor, masks: dict[str, np.ndarray], adapt: AdaptParams) -> Tensor:
    """Refined weights w_ij = cos(h_i, h_j) + psi(i, j) on active edges, zero elsewhere."""
    H = tn.tensor(H)
    hn = tn.normalize_rows(H)
    cos = (hn @ hn.T) * masks["active"]
    return cos + _kind_term(H, masks, adapt.M, adapt.lam)


def gat_layer(H: Tensor, masks: dict[str, np.ndarray], layer: LayerParams,
              slope: float = tn.LEAKY_SLOPE, weights: Tensor | np.ndarray | None = None) -> Tensor:
    """relu(sum_j alpha_ij W h_j); with ``weights`` each message is also scaled by w_ij."""
    H = tn.tensor(H)
    alpha = gat_attention(H, masks, layer, slope)
    if weights is not None:
        alpha = alpha * weights
    return tn.relu(alpha @ (H @ layer.W))


def refine_edges(graph: MultimodalGraph, H, adapt: AdaptParams) -> Tensor:
    """Recompute every active edge's stored weight from node features ``H``."""
    w = edge_weights(tn.tensor(H), graph.dense(), adapt)
    for e in graph.edges:
        if e.active:
            e.weight = float(w.data[e.i, e.j])
    return w


def adapt_topology(graph: MultimodalGraph, H, adapt: AdaptParams) -> MultimodalGraph:
    """Prune weak edges and add strongly similar candidate pairs, in place.

    Temporal edges are never pruned and the connectivity floor (containment,
    text-to-frame and fusion links) is re-activated afterwards. Candidates for
    addition are same-frame object pairs (spatial) and text-visual pairs
    (semantic); a new edge's weight is its cosine plus psi.
    """
    h = np.asarray(H.data if isinstance(H, Tensor) else H, dtype=np.float64)
    for e in graph.edges:
        if e.active and e.kind != EdgeKind.TEMPORAL and e.weight < adapt.prune_threshold:
            e.active = False
    for e in graph.edges:
        if graph.is_floor_edge(e):
            e.active = True

    objects = graph.nodes_of(NodeKind.OBJECT)
    texts = graph.nodes_of(NodeKind.TEXT)
    visual = graph.nodes_of(NodeKind.FRAME) + objects
    candidates = []
    for pos, a in enumerate(objects):
        for b in objects[pos + 1:]:
            if graph.nodes[a].frame_index == graph.nodes[b].frame_index:
                candidates.append((EdgeKind.SPATIAL, a, b))
    for t in texts:
        candidates.extend((EdgeKind.SEMANTIC, v, t) for v in visual)
    for kind, a, b in candidates:
        sim = _cos(h[a], h[b])
        if sim < adapt.add_threshold:
            continue
        e = graph.edge_between(a, b)
        if e is None:
            e = graph.add_edge(kind, a, b, 0.0)
        elif e.active:
            continue
        e.active = True
        e.weight = sim + psi(graph, a, b, h[a], h[b], adapt)
    return graph


def fuse(f_v, f_t, W_v: Tensor, W_t: Tensor, a: Tensor) -> tuple[Tensor, Tensor]:
    """Project both modalities to the shared space and mix them by attention.

    Accepts single vectors or row-stacked batches. Returns (fused, weights)
    where weights[..., 0] is the visual share and weights[..., 1] the text share.
    """
    f_v, f_t = tn.tensor(f_v), tn.tensor(f_t)
    single = f_v.ndim == 1
    if single:
        f_v, f_t = f_v.reshape((1, -1)), f_t.reshape((1, -1))
    pv = f_v @ W_v.T
    pt = f_t @ W_t.T
    scores = tn.concat([(pv @ a).reshape((-1, 1)), (pt @ a).reshape((-1, 1))], axis=1)
    mix = tn.masked_softmax(scores, np.ones(scores.shape, dtype=bool))
    fused = mix[:, 0:1] * pv + mix[:, 1:2] * pt
    if single:
        return fused[0], mix[0]
    return fused, mix


# episodes -> logits ---------------------------------------------------------------


@dataclass
class EpisodeFeatures:
    """Per-episode aggregates, computed once and reused every epoch."""

    frames: np.ndarray  # T x d_V
    objects: list[tuple[int, str, np.ndarray]]
    text: np.ndarray
    label: int

    @classmethod
    def of(cls, ep: Episode) -> EpisodeFeatures:
        return cls(ep.frame_embeddings(), ep.object_embeddings(), ep.text_embedding.astype(np.float64), ep.class_id)


@dataclass
class ForwardResult:
    logits: Tensor
    graphs: list[MultimodalGraph]
    hidden: list[Tensor]


def _block_mask(sizes: list[int]) -> np.ndarray:
    n = sum(sizes)
    m = np.zeros((n, n), dtype=bool)
    start = 0
    for s in sizes:
        m[start:start + s, start:start + s] = True
        start += s
    return m


def _union_dense(graphs: list[MultimodalGraph]) -> dict[str, np.ndarray]:
    parts = [g.dense() for g in graphs]
    n = sum(g.num_nodes for g in graphs)
    out = {}
    for key in parts[0]:
        big = np.zeros((n, n), dtype=parts[0][key].dtype)
        start = 0
        for g, p in zip(graphs, parts):
            s = g.num_nodes
            big[start:start + s, start:start + s] = p[key]
            start += s
        out[key] = big
    return out


def uses_text_node(variant: str) -> bool:
    return variant in ("static_graph", "full")


def _encode(feats: list[EpisodeFeatures], params: ModelParams):
    """Differentiable per-episode encodings shared by graph building and message passing."""
    p = params.tensors
    sizes = [f.frames.shape[0] for f in feats]
    raw_frames = np.concatenate([f.frames for f in feats])
    agg = temporal_aggregate(raw_frames, p["temporal.query"], p["temporal.key"], p["temporal.value"],
                             _block_mask(sizes))
    pool = np.zeros((len(feats), len(raw_frames)))
    start = 0
    for b, s in enumerate(sizes):
        pool[b, start:start + s] = 1.0 / s
        start += s
    d_v = raw_frames.shape[1]
    obj_raw = [o[2] for f in feats for o in f.objects]
    obj = np.array(obj_raw) if obj_raw else np.zeros((0, d_v))
    text = np.stack([f.text for f in feats])
    W_v, W_t = p["fusion.W_v"], p["fusion.W_t"]
    proj_frames = agg @ W_v.T
    proj_objects = tn.Tensor(obj) @ W_v.T
    proj_text = tn.Tensor(text) @ W_t.T
    fused, _ = fuse(tn.Tensor(pool) @ agg, text, W_v, W_t, p["fusion.a"])
    return agg, proj_frames, proj_objects, proj_text, fused, sizes


def _source_rows(graph: MultimodalGraph, b: int, feats: EpisodeFeatures, offsets: dict[str, int]) -> list[int]:
    obj_index = {(t, name): k for k, (t, name, _) in enumerate(feats.objects)}
    rows = []
    for node in graph.nodes:
        if node.kind == NodeKind.FRAME:
            rows.append(offsets["frame"] + node.frame_index)
        elif node.kind == NodeKind.OBJECT:
            rows.append(offsets["object"] + obj_index[(node.frame_index, node.region_id)])
        elif node.kind == NodeKind.TEXT:
            rows.append(offsets["text"] + b)
        else:
            rows.append(offsets["fusion"] + b)
    return rows


def add_fusion_node(graph: MultimodalGraph, feature: np.ndarray, shared_text: np.ndarray,
                    shared_frames: np.ndarray) -> int:
    """Attach the fusion node to the text node and every frame node."""
    fid = graph.add_node(Node(NodeKind.FUSION, np.asarray(feature, dtype=np.float64).copy()))
    for k in graph.nodes_of(NodeKind.TEXT):
        graph.add_edge(EdgeKind.SEMANTIC, k, fid, _cos(shared_text, feature))
    for pos, k in enumerate(graph.nodes_of(NodeKind.FRAME)):
        graph.add_edge(EdgeKind.SEMANTIC, k, fid, _cos(shared_frames[pos], feature))
    return fid


def build_episode_graphs(feats: list[EpisodeFeatures], params: ModelParams, variant: str,
                         adapt: bool | None = None) -> list[MultimodalGraph]:
    """Graphs for a batch under the current parameters (no gradient tracking)."""
    agg, pf, po, pt, fused, sizes = _encode(feats, params)
    cfg = params.config
    with_text = uses_text_node(variant)
    if adapt is None:
        adapt = variant == "full"
    W_v, W_t = params["fusion.W_v"].data, params["fusion.W_t"].data
    graphs = []
    f0 = o0 = 0
    for b, f in enumerate(feats):
        t_count, n_obj = sizes[b], len(f.objects)
        frames_agg = agg.data[f0:f0 + t_count]
        g = build_graph(frames_agg, f.objects, f.text if with_text else None,
                        cfg.graph_config(with_text), W_v, W_t)
        if with_text:
            add_fusion_node(g, fused.data[b], pt.data[b], pf.data[f0:f0 + t_count])
        if adapt:
            shared = np.concatenate([pf.data, po.data, pt.data, fused.data])
            offsets = {"frame": f0, "object": len(pf.data) + o0,
                       "text": len(pf.data) + len(po.data), "fusion": len(pf.data) + len(po.data) + len(feats)}
            h0 = shared[_source_rows(g, b, f, offsets)]
            ap = AdaptParams.of(params)
            refine_edges(g, h0, ap)
            adapt_topology(g, h0, ap)
        graphs.append(g)
        f0 += t_count
        o0 += n_obj
    return graphs


def forward(feats: list[EpisodeFeatures], params: ModelParams, variant: str | None = None,
            graphs: list[MultimodalGraph] | None = None) -> ForwardResult:
    """Logits (B x K) for a batch of episodes.

    When ``graphs`` is given the topology is taken as-is (in the given node
    order); otherwise it is built from the current parameters, and adapted
    for the ``full`` variant.
    """
    variant = variant or params.variant
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if graphs is None:
        graphs = build_episode_graphs(feats, params, variant)
    if len(graphs) != len(feats):
        raise ValueError("one graph per episode required")
    cfg = params.config
    p = params.tensors
    agg, pf, po, pt, fused, sizes = _encode(feats, params)
    shared = tn.concat([pf, po, pt, fused])
    n_f, n_o = pf.shape[0], po.shape[0]
    offsets = {"frame": 0, "object": n_f, "text": n_f + n_o, "fusion": n_f + n_o + len(feats)}
    rows = []
    f0 = o0 = 0
    for b, (g, f) in enumerate(zip(graphs, feats)):
        local = dict(offsets, frame=f0, object=n_f + o0)
        rows.extend(_source_rows(g, b, f, local))
        f0 += sizes[b]
        o0 += len(f.objects)
    H = shared[np.array(rows, dtype=np.intp)]
    masks = _union_dense(graphs)
    dynamic = variant == "full"
    adapt = AdaptParams.of(params)
    hidden = [H]
    w = None
    for layer in range(cfg.layers):
        if dynamic:
            w = edge_weights(H, masks, adapt)
            _store_weights(graphs, w.data)
        elif cfg.weighted_messages:
            w = masks["weight"]
        H = gat_layer(H, masks, LayerParams.of(params, layer), cfg.leaky_slope,
                      w if cfg.weighted_messages else None)
        hidden.append(H)

    pool = np.zeros((len(graphs), H.shape[0]))
    start = 0
    for b, g in enumerate(graphs):
        pool[b, start:start + g.num_nodes] = 1.0 / g.num_nodes
        start += g.num_nodes
    readout = tn.Tensor(pool) @ H
    if variant == "plus_text":
        readout = tn.concat([readout, pt], axis=1)
    logits = readout @ p["classifier.W"] + p["classifier.b"]
    return ForwardResult(logits, graphs, hidden)


def _store_weights(graphs: list[MultimodalGraph], w: np.ndarray) -> None:
    start = 0
    for g in graphs:
        for e in g.edges:
            if e.active:
                e.weight = float(w[start + e.i, start + e.j])
        start += g.num_nodes


def predict(feats: list[EpisodeFeatures], params: ModelParams, batch_size: int = 32) -> np.ndarray:
    out = []
    for s in range(0, len(feats), batch_size):
        out.append(forward(feats[s:s + batch_size], params).logits.data)
    return np.concatenate(out) if out else np.zeros((0, params.num_classes))
