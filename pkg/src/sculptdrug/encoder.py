"""Spatial condition-aware network producing clean-ligand predictions.

Pipeline: node embeddings -> boundary-awareness layers over the unified
surface+ligand graph -> k-means++ virtual atoms -> global dual-stream
attention with adaptive edge pruning -> distance-binned local refinement ->
coordinate and type heads.

Feature streams consume only invariants (hidden states, edge one-hots, RBF
distances); coordinates move exclusively along attention-weighted relative
vectors, which makes the predicted positions E(3)-equivariant and the type
probabilities invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ValidationError
from .geometry import (
    EDGE_TYPE_COUNT,
    LocalEdgeSet,
    RbfConfig,
    UnifiedGraph,
    VirtualAtomSet,
    build_local_edges,
    build_unified_graph,
    kmeans_pp,
    rbf_expand_tape,
)
from .io import AtomVocabulary, ProteinPocket, SurfaceGraph
from .numerics import MlpSpec, ParameterStore, Tensor, ensure_mlp_params, mlp_forward

NODE_LIGAND = "ligand"
NODE_PROTEIN = "protein_atom"
NODE_SURFACE = "surface_vertex"
NODE_VIRTUAL = "virtual_atom"

GLOBAL_EDGE_CLASSES = 5  # lig->lig, lig->virt, virt->lig, virt->virt, self
LOCAL_EDGE_CLASSES = 3  # distance bins


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int = 128
    heads: int = 16
    bab_layers: int = 2
    global_layers: int = 2
    local_layers: int = 9
    tau: float = 0.05
    cluster_divisor: int = 8
    knn_k: int = 8
    rbf: RbfConfig = RbfConfig()
    time_dim: int = 16

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValidationError("tau must lie in (0, 1)")
        if min(self.bab_layers, self.global_layers, self.local_layers) < 1:
            raise ValidationError("all layer counts must be at least 1")
        if self.hidden % self.heads != 0:
            raise ValidationError("hidden width must be divisible by the head count")
        if self.time_dim % 2 != 0:
            raise ValidationError("time embedding width must be even")


@dataclass
class NodeState:
    """Per-node hidden features and coordinates plus an update mask.

    ``mobile`` marks the rows whose coordinates a layer may move; frozen rows
    (surface vertices, protein atoms, virtual atoms) pass through untouched.
    """

    h: Tensor
    x: Tensor
    mobile: np.ndarray  # (N, 1) 0/1


@dataclass(frozen=True)
class ScaOutput:
    positions: Tensor  # (N_m, 3) predicted clean coordinates
    type_probs: Tensor  # (N_m, K) rows on the simplex

    def __post_init__(self):
        if not np.all(np.isfinite(self.positions.data)):
            raise ValidationError("predicted coordinates must be finite")
        sums = self.type_probs.data.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValidationError("type probability rows must sum to 1")


def time_features(t: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of t in [0, 1]; injective on the endpoints."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(400.0), half))
    angles = freqs * t
    return np.concatenate([np.sin(angles), np.cos(angles)])


def _bab_specs(idx: int, cfg: EncoderConfig) -> dict[str, MlpSpec]:
    d, g = cfg.hidden, cfg.rbf.size
    edge_w = 2 * d + EDGE_TYPE_COUNT * g
    return {
        "q": MlpSpec(f"bab{idx}/f_q", (d, d, d)),
        # key outputs only feed attention logits; their final bias shifts a
        # whole softmax segment uniformly and would be a dead parameter
        "k": MlpSpec(f"bab{idx}/f_k", (edge_w, d, d), final_bias=False),
        "v": MlpSpec(f"bab{idx}/f_v", (edge_w, d, 1), zero_init_last=True, final_activation="tanh"),
        "h": MlpSpec(f"bab{idx}/f_h", (edge_w, d, d), final_init_gain=0.1, final_activation="tanh"),
    }


def _stream_specs(prefix: str, cfg: EncoderConfig, edge_classes: int) -> dict[str, MlpSpec]:
    d, g = cfg.hidden, cfg.rbf.size
    edge_w = 2 * d + edge_classes + g  # receiver state, sender state, class, distance
    return {
        "hq": MlpSpec(f"{prefix}/hq", (d, d)),
        "hk": MlpSpec(f"{prefix}/hk", (edge_w, d, d), final_bias=False),  # keys: see _bab_specs
        "hv": MlpSpec(f"{prefix}/hv", (edge_w, d, d), final_init_gain=0.1, final_activation="tanh"),
        "xq": MlpSpec(f"{prefix}/xq", (d, d)),
        "xk": MlpSpec(f"{prefix}/xk", (edge_w, d, d), final_bias=False),
        "xg": MlpSpec(f"{prefix}/xg", (edge_w, d, cfg.heads), zero_init_last=True, final_activation="tanh"),
    }


def _vagg_specs(cfg: EncoderConfig) -> dict[str, MlpSpec]:
    d, g = cfg.hidden, cfg.rbf.size
    return {
        # the weight head feeds a per-cluster softmax, so a final bias is dead
        "weight": MlpSpec("vagg/weight", (d + g, d, 1), final_bias=False),
        "feat": MlpSpec("vagg/feat", (d + g, d, d)),
    }


def init_encoder_params(
    store: ParameterStore, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator
) -> None:
    """Create every encoder parameter that is not already in the store."""
    d = cfg.hidden
    for spec in (
        MlpSpec("embed/ligand_type", (vocab_size, d)),
        MlpSpec("embed/time", (cfg.time_dim, d)),
        MlpSpec("embed/surface", (4, d)),
        MlpSpec("head/type", (d, d, vocab_size)),
    ):
        ensure_mlp_params(store, spec, rng)
    if "embed/protein_table" not in store:
        bound = math.sqrt(6.0 / d)
        store.create("embed/protein_table", rng.uniform(-bound, bound, size=(vocab_size, d)))
    for idx in range(cfg.bab_layers):
        for spec in _bab_specs(idx, cfg).values():
            ensure_mlp_params(store, spec, rng)
    for spec in _vagg_specs(cfg).values():
        ensure_mlp_params(store, spec, rng)
    for idx in range(cfg.global_layers):
        for spec in _stream_specs(f"global{idx}", cfg, GLOBAL_EDGE_CLASSES).values():
            ensure_mlp_params(store, spec, rng)
    for idx in range(cfg.local_layers):
        for spec in _stream_specs(f"local{idx}", cfg, LOCAL_EDGE_CLASSES).values():
            ensure_mlp_params(store, spec, rng)


def embed_nodes(
    store: ParameterStore,
    cfg: EncoderConfig,
    kind: str,
    features,
    t: float | None = None,
) -> Tensor:
    """Initial hidden states for one node kind.

    Ligand rows embed the type-probability rows plus a shared time embedding;
    protein atoms look up an element embedding table; surface vertices embed
    their 4-feature vectors.
    """
    if kind == NODE_LIGAND:
        theta = np.asarray(features, dtype=np.float64)
        if theta.ndim != 2:
            raise ValidationError("ligand embedding expects (N, K) probability rows")
        if np.any(np.abs(theta.sum(axis=1) - 1.0) > 1e-6):
            raise ValidationError("type parameter rows must sum to 1")
        if t is None or not 0.0 <= t <= 1.0:
            raise ValidationError("ligand embedding needs t in [0, 1]")
        base = mlp_forward(store, nm.constant(theta), MlpSpec("embed/ligand_type", (theta.shape[1], cfg.hidden)))
        clock = mlp_forward(
            store,
            nm.constant(time_features(t, cfg.time_dim)[None, :]),
            MlpSpec("embed/time", (cfg.time_dim, cfg.hidden)),
        )
        return nm.add(base, clock)  # same clock row broadcast onto every atom
    if kind == NODE_PROTEIN:
        idx = np.asarray(features, dtype=np.int64)
        return nm.gather_rows(store["embed/protein_table"], idx)
    if kind == NODE_SURFACE:
        feats = np.asarray(features, dtype=np.float64)
        return mlp_forward(store, nm.constant(feats), MlpSpec("embed/surface", (4, cfg.hidden)))
    raise ValidationError(f"unknown node kind '{kind}'")


def boundary_awareness_layer(
    store: ParameterStore,
    cfg: EncoderConfig,
    layer_index: int,
    graph: UnifiedGraph,
    state: NodeState,
) -> NodeState:
    """One attention pass over the unified graph; moves only mobile rows.

    Edge features are node-pair states plus the flattened outer product of
    the 6-way edge one-hot with the RBF-encoded distance.
    """
    specs = _bab_specs(layer_index, cfg)
    src, dst = graph.src, graph.dst
    n = state.h.data.shape[0]
    e = src.shape[0]

    dist = nm.edge_distances(state.x, src, dst)
    phi = rbf_expand_tape(dist, cfg.rbf)
    onehot = graph.type_onehot()
    blocks = [nm.mul(phi, nm.constant(onehot[:, c : c + 1])) for c in range(EDGE_TYPE_COUNT)]
    hn = nm.rms_norm(state.h)  # pre-norm: the residual stream itself stays raw
    e_tilde = nm.concat([nm.gather_rows(hn, dst), nm.gather_rows(hn, src)] + blocks, axis=1)

    q = mlp_forward(store, hn, specs["q"])
    logits = nm.mul(
        nm.tensor_sum(nm.mul(nm.gather_rows(q, dst), mlp_forward(store, e_tilde, specs["k"])), axis=1),
        nm.constant(1.0 / math.sqrt(cfg.hidden)),
    )
    alpha = nm.reshape(nm.segment_softmax(logits, dst, n), (e, 1))

    h_msg = nm.mul(alpha, mlp_forward(store, e_tilde, specs["h"]))
    h_new = nm.add(state.h, nm.mul(nm.segment_sum(h_msg, dst, n), nm.constant(state.mobile)))

    gate = mlp_forward(store, e_tilde, specs["v"])
    rel = nm.sub(nm.gather_rows(state.x, src), nm.gather_rows(state.x, dst))
    shift = nm.segment_sum(nm.mul(nm.mul(alpha, gate), rel), dst, n)
    x_new = nm.add(state.x, nm.mul(shift, nm.constant(state.mobile)))
    return NodeState(h_new, x_new, state.mobile)


def build_virtual_atoms(
    store: ParameterStore,
    cfg: EncoderConfig,
    protein_h: Tensor,
    protein_positions: np.ndarray,
    clusters: VirtualAtomSet,
) -> Tensor:
    """Aggregate per-cluster features with distance-aware softmax weights."""
    assign = clusters.assignments
    if assign.shape[0] != protein_h.data.shape[0]:
        raise ValidationError("cluster assignments must cover all pocket atoms")
    counts = np.bincount(assign, minlength=clusters.size)
    if np.any(counts == 0):
        raise ValidationError("empty virtual-atom cluster")
    specs = _vagg_specs(cfg)
    dist = np.sqrt(((protein_positions - clusters.centroids[assign]) ** 2).sum(axis=1))
    phi = nm.constant(np.exp(-((dist[:, None] - cfg.rbf.center_array()) ** 2) / (2.0 * cfg.rbf.gamma**2)))
    pair = nm.concat([nm.rms_norm(protein_h), phi], axis=1)
    logits = mlp_forward(store, pair, specs["weight"])
    weights = nm.segment_softmax(logits, assign, clusters.size)
    feats = mlp_forward(store, pair, specs["feat"])
    return nm.segment_sum(nm.mul(weights, feats), assign, clusters.size)


@dataclass(frozen=True)
class AttentionEdges:
    """Directed edges with a per-edge class one-hot; self edges never pruned."""

    src: np.ndarray
    dst: np.ndarray
    class_onehot: np.ndarray
    is_self: np.ndarray

    def subset(self, keep: np.ndarray) -> "AttentionEdges":
        return AttentionEdges(self.src[keep], self.dst[keep], self.class_onehot[keep], self.is_self[keep])


def complete_attention_edges(n_ligand: int, n_virtual: int) -> AttentionEdges:
    """All ordered ligand/virtual pairs plus per-node self edges."""
    n = n_ligand + n_virtual
    src, dst = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    src, dst = src.reshape(-1), dst.reshape(-1)
    is_self = src == dst
    kinds = (np.arange(n) >= n_ligand).astype(np.int64)  # 0 ligand, 1 virtual
    classes = np.where(is_self, 4, kinds[src] * 2 + kinds[dst])
    onehot = np.zeros((n * n, GLOBAL_EDGE_CLASSES))
    onehot[np.arange(n * n), classes] = 1.0
    return AttentionEdges(src, dst, onehot, is_self)


def _dual_stream_layer(
    store: ParameterStore,
    cfg: EncoderConfig,
    prefix: str,
    edge_classes: int,
    state: NodeState,
    edges: AttentionEdges,
    update_h_mask: np.ndarray,
) -> tuple[NodeState, np.ndarray]:
    """Shared global/local machinery; returns per-edge per-head attention."""
    specs = _stream_specs(prefix, cfg, edge_classes)
    src, dst = edges.src, edges.dst
    n = state.h.data.shape[0]
    e = src.shape[0]
    heads, dh = cfg.heads, cfg.hidden // cfg.heads
    scale = nm.constant(1.0 / math.sqrt(dh))

    def per_head_attention(h_nodes: Tensor, q_spec, k_spec):
        hn = nm.rms_norm(h_nodes)  # pre-norm copy; residuals accumulate raw
        dist = nm.edge_distances(state.x, src, dst)
        phi = rbf_expand_tape(dist, cfg.rbf)
        edge_in = nm.concat(
            [nm.gather_rows(hn, dst), nm.gather_rows(hn, src), nm.constant(edges.class_onehot), phi],
            axis=1,
        )
        q_e = nm.gather_rows(mlp_forward(store, hn, q_spec), dst)
        k_e = mlp_forward(store, edge_in, k_spec)
        prod = nm.reshape(nm.mul(q_e, k_e), (e * heads, dh))
        logits = nm.reshape(nm.mul(nm.tensor_sum(prod, axis=1), scale), (e, heads))
        seg_ids = dst[:, None] * heads + np.arange(heads)[None, :]  # per-head segments
        flat = nm.reshape(logits, (e * heads,))
        alpha = nm.reshape(nm.segment_softmax(flat, seg_ids.reshape(-1), n * heads), (e, heads))
        return alpha, edge_in

    alpha_h, edge_in = per_head_attention(state.h, specs["hq"], specs["hk"])
    values = mlp_forward(store, edge_in, specs["hv"])
    weighted = nm.reshape(
        nm.mul(nm.reshape(alpha_h, (e * heads, 1)), nm.reshape(values, (e * heads, dh))),
        (e, cfg.hidden),
    )
    h_new = nm.add(state.h, nm.mul(nm.segment_sum(weighted, dst, n), nm.constant(update_h_mask)))

    alpha_x, edge_in_x = per_head_attention(h_new, specs["xq"], specs["xk"])
    gates = mlp_forward(store, edge_in_x, specs["xg"])
    # head-mean keeps the per-edge coefficient in [-1, 1]
    coeff = nm.mean(nm.mul(alpha_x, gates), axis=1, keepdims=True)
    rel = nm.sub(nm.gather_rows(state.x, dst), nm.gather_rows(state.x, src))
    shift = nm.segment_sum(nm.mul(coeff, rel), dst, n)
    x_new = nm.add(state.x, nm.mul(shift, nm.constant(state.mobile)))
    return NodeState(h_new, x_new, state.mobile), alpha_h.data


def global_attention_layer(
    store: ParameterStore,
    cfg: EncoderConfig,
    layer_index: int,
    state: NodeState,
    edges: AttentionEdges,
) -> tuple[NodeState, np.ndarray]:
    """Dual-stream attention over ligand+virtual nodes; all features update."""
    mask = np.ones((state.h.data.shape[0], 1))
    return _dual_stream_layer(store, cfg, f"global{layer_index}", GLOBAL_EDGE_CLASSES, state, edges, mask)


def adaptive_edge_select(scores: np.ndarray, tau: float, is_self: np.ndarray | None = None) -> np.ndarray:
    """Keep mask: head-mean attention strictly above tau; self edges survive."""
    keep = scores.mean(axis=1) > tau
    if is_self is not None:
        keep = keep | is_self
    return keep


def local_edges_to_attention(local: LocalEdgeSet) -> AttentionEdges:
    """Ligand-receiving local edges as attention edges with bin one-hots."""
    ligand_dst = local.dst < local.n_ligand
    onehot = local.bin_onehot()[ligand_dst]
    return AttentionEdges(
        local.src[ligand_dst],
        local.dst[ligand_dst],
        onehot,
        np.zeros(int(ligand_dst.sum()), dtype=bool),
    )


def local_refinement_layer(
    store: ParameterStore,
    cfg: EncoderConfig,
    layer_index: int,
    state: NodeState,
    edges: AttentionEdges,
) -> NodeState:
    """Dual-stream attention along distance-binned edges; protein rows frozen."""
    new_state, _ = _dual_stream_layer(
        store, cfg, f"local{layer_index}", LOCAL_EDGE_CLASSES, state, edges, state.mobile
    )
    return new_state


def sca_forward(
    mu: np.ndarray,
    theta_v: np.ndarray,
    pocket: ProteinPocket,
    surface: SurfaceGraph,
    t: float,
    store: ParameterStore,
    cfg: EncoderConfig,
    vocabulary: AtomVocabulary,
    cluster_seed: int = 0,
) -> ScaOutput:
    """Full forward pass from flow parameters to (positions, type rows)."""
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.asarray(theta_v, dtype=np.float64)
    if mu.ndim != 2 or mu.shape[1] != 3:
        raise ValidationError("mu must have shape (N_m, 3)")
    if theta.shape[0] != mu.shape[0]:
        raise ValidationError("theta rows must match mu")
    if not np.all(np.isfinite(mu)):
        raise ValidationError("mu must be finite")
    n_lig = mu.shape[0]
    n_surf = surface.size

    h_lig = embed_nodes(store, cfg, NODE_LIGAND, theta, t)
    h_surf = embed_nodes(store, cfg, NODE_SURFACE, surface.features())
    prot_idx = np.array([vocabulary.index(el) for el in pocket.elements()], dtype=np.int64)
    h_prot = embed_nodes(store, cfg, NODE_PROTEIN, prot_idx)

    # boundary awareness over the unified surface+ligand graph
    k = min(cfg.knn_k, n_surf + n_lig - 1)
    graph = build_unified_graph(surface, mu, k)
    mobile = np.concatenate([np.zeros((n_surf, 1)), np.ones((n_lig, 1))])
    state = NodeState(
        nm.concat([h_surf, h_lig], axis=0),
        nm.constant(np.vstack([surface.positions(), mu])),
        mobile,
    )
    for layer in range(cfg.bab_layers):
        state = boundary_awareness_layer(store, cfg, layer, graph, state)
    lig_rows = np.arange(n_surf, n_surf + n_lig)
    h_cur = nm.gather_rows(state.h, lig_rows)
    x_cur = nm.gather_rows(state.x, lig_rows)

    # global stage over ligand + virtual atoms
    n_clusters = max(1, math.ceil(pocket.size / cfg.cluster_divisor))
    clusters = kmeans_pp(pocket.positions(), n_clusters, seed=cluster_seed)
    h_virtual = build_virtual_atoms(store, cfg, h_prot, pocket.positions(), clusters)
    state = NodeState(
        nm.concat([h_cur, h_virtual], axis=0),
        nm.concat([x_cur, nm.constant(clusters.centroids)], axis=0),
        np.concatenate([np.ones((n_lig, 1)), np.zeros((clusters.size, 1))]),
    )
    edges = complete_attention_edges(n_lig, clusters.size)
    for layer in range(cfg.global_layers):
        state, scores = global_attention_layer(store, cfg, layer, state, edges)
        if layer == 0 and cfg.global_layers > 1:
            edges = edges.subset(adaptive_edge_select(scores, cfg.tau, edges.is_self))
    lig_rows = np.arange(n_lig)
    h_cur = nm.gather_rows(state.h, lig_rows)
    x_cur = nm.gather_rows(state.x, lig_rows)

    # local refinement against protein atoms, edges rebuilt once
    local = build_local_edges(x_cur.data, pocket.positions())
    attn_edges = local_edges_to_attention(local)
    state = NodeState(
        nm.concat([h_cur, h_prot], axis=0),
        nm.concat([x_cur, nm.constant(pocket.positions())], axis=0),
        np.concatenate([np.ones((n_lig, 1)), np.zeros((pocket.size, 1))]),
    )
    for layer in range(cfg.local_layers):
        state = local_refinement_layer(store, cfg, layer, state, attn_edges)

    x_hat = nm.gather_rows(state.x, lig_rows)
    logits = mlp_forward(
        store,
        nm.rms_norm(nm.gather_rows(state.h, lig_rows)),
        MlpSpec("head/type", (cfg.hidden, cfg.hidden, vocabulary.size)),
    )
    return ScaOutput(x_hat, nm.softmax_rows(logits))
