"""Geometric preprocessing: RBF encodings, k-NN graphs, k-means++ virtual
atoms, pocket residue selection, approximate solvent-excluded surfaces with
curvature/biochemical features, typed edge construction, and clash counting.

Everything here is a pure function over immutable inputs; randomized
operations take an explicit seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ValidationError
from .io import AtomVocabulary, Ligand, ProteinPocket, SurfaceGraph, SurfaceVertex

# Bondi van der Waals radii (Angstrom); 'other' falls back to carbon.
VDW_RADII = {
    "C": 1.70,
    "N": 1.55,
    "O": 1.52,
    "F": 1.47,
    "P": 1.80,
    "S": 1.80,
    "Cl": 1.75,
    "Br": 1.85,
    "other": 1.70,
}

# Kyte-Doolittle hydropathy, rescaled by /4.5 into [-1, 1] at lookup time.
KYTE_DOOLITTLE = {
    "ALA": 1.8, "ARG": -4.5, "ASN": -3.5, "ASP": -3.5, "CYS": 2.5,
    "GLN": -3.5, "GLU": -3.5, "GLY": -0.4, "HIS": -3.2, "ILE": 4.5,
    "LEU": 3.8, "LYS": -3.9, "MET": 1.9, "PHE": 2.8, "PRO": -1.6,
    "SER": -0.8, "THR": -0.7, "TRP": -0.9, "TYR": -1.3, "VAL": 4.2,
}

POLAR_RESIDUES = frozenset(
    {"ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "HIS", "LYS", "SER", "THR", "TYR"}
)
NEGATIVE_RESIDUES = frozenset({"ASP", "GLU"})
POSITIVE_RESIDUES = frozenset({"LYS", "ARG", "HIS"})

LOCAL_EDGE_THRESHOLDS = (2.7, 3.4, 5.0)

# Unified-graph edge taxonomy: the one-hot index of each directed edge kind,
# named source-to-target.
EDGE_SS_MESH = 0
EDGE_SS_KNN = 1
EDGE_SL_KNN = 2  # surface -> ligand
EDGE_LS_KNN = 3  # ligand -> surface
EDGE_LL_KNN = 4
EDGE_SELF = 5
EDGE_TYPE_COUNT = 6

KIND_SURFACE = 0
KIND_LIGAND = 1


def element_radius(element: str) -> float:
    return VDW_RADII.get(element, VDW_RADII["other"])


@dataclass(frozen=True)
class RbfConfig:
    """Gaussian radial basis centers (Angstrom) and shared width."""

    centers: tuple[float, ...] = tuple(float(i) * 0.625 for i in range(16))
    gamma: float = 0.3125

    def __post_init__(self):
        if len(self.centers) < 1:
            raise ValidationError("RBF needs at least one center")
        if any(b <= a for a, b in zip(self.centers, self.centers[1:])):
            raise ValidationError("RBF centers must be strictly increasing")
        if self.gamma <= 0:
            raise ValidationError("RBF width must be positive")

    @property
    def size(self) -> int:
        return len(self.centers)

    def center_array(self) -> np.ndarray:
        return np.array(self.centers, dtype=np.float64)


def rbf_expand(distance, config: RbfConfig) -> np.ndarray:
    """exp(-(d - c_k)^2 / (2 gamma^2)) per center; components in (0, 1]."""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d < 0):
        raise ValidationError("distance must be non-negative")
    diff = d[..., None] - config.center_array()
    return np.exp(-(diff**2) / (2.0 * config.gamma**2))


def rbf_expand_tape(distances: nm.Tensor, config: RbfConfig) -> nm.Tensor:
    """Tape-recorded RBF expansion of per-edge distances, shape (E, g)."""
    n = distances.data.shape[0]
    diff = nm.sub(nm.reshape(distances, (n, 1)), nm.constant(config.center_array()[None, :]))
    scaled = nm.mul(nm.square(diff), nm.constant(-1.0 / (2.0 * config.gamma**2)))
    return nm.exp(scaled)


def knn_edges(points: np.ndarray, k: int) -> np.ndarray:
    """Directed (node -> neighbor) pairs; ties broken by lower index.

    Returns an (N*k, 2) int array: each node has exactly k outgoing edges.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k >= n:
        raise ValidationError(f"k={k} must be smaller than the number of points {n}")
    if k < 1:
        raise ValidationError("k must be at least 1")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    idx = np.arange(n)
    edges = np.empty((n * k, 2), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((idx, dist[i]))[:k]
        edges[i * k : (i + 1) * k, 0] = i
        edges[i * k : (i + 1) * k, 1] = order
    return edges


@dataclass(frozen=True)
class VirtualAtomSet:
    """k-means++ centroids over pocket atoms with the atom -> cluster map."""

    centroids: np.ndarray  # (K, 3)
    assignments: np.ndarray  # (N,) int

    @property
    def size(self) -> int:
        return self.centroids.shape[0]


def _inertia(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    return float(((points - centroids[assign]) ** 2).sum())


def kmeans_pp(
    points: np.ndarray,
    n_clusters: int,
    seed: int,
    max_iters: int = 100,
    inertia_log: list | None = None,
) -> VirtualAtomSet:
    """D^2-weighted seeding then Lloyd iterations to an assignment fixpoint.

    Deterministic given ``seed``. Clusters never end up empty: a cluster that
    loses all members is relocated to the point farthest from its centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= n_clusters <= n:
        raise ValidationError(f"cluster count {n_clusters} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(n_clusters - 1):
        total = d2.sum()
        if total <= 0.0:
            candidate = int(rng.integers(n))
        else:
            cum = np.cumsum(d2 / total)
            candidate = int(np.searchsorted(cum, rng.random(), side="right"))
            candidate = min(candidate, n - 1)
        chosen.append(candidate)
        d2 = np.minimum(d2, ((pts - pts[candidate]) ** 2).sum(axis=1))
    centroids = pts[chosen].copy()

    def assign_step(cents):
        dists = ((pts[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        return dists.argmin(axis=1)

    assign = assign_step(centroids)
    last_inertia = math.inf
    for _ in range(max_iters):
        for c in range(n_clusters):
            if not np.any(assign == c):
                residual = ((pts - centroids[assign]) ** 2).sum(axis=1)
                assign[int(residual.argmax())] = c
        for c in range(n_clusters):
            centroids[c] = pts[assign == c].mean(axis=0)
        current = _inertia(pts, centroids, assign)
        if current > last_inertia + 1e-9 * max(1.0, last_inertia):
            raise AssertionError("k-means inertia increased across a Lloyd iteration")
        if inertia_log is not None:
            inertia_log.append(current)
        last_inertia = current
        new_assign = assign_step(centroids)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return VirtualAtomSet(centroids, assign)


def select_pocket_residues(protein: ProteinPocket, ligand: Ligand, cutoff: float = 10.0) -> ProteinPocket:
    """Keep whole residues with any atom within ``cutoff`` of any ligand atom."""
    ppos = protein.positions()
    lpos = ligand.positions
    dist = np.sqrt(((ppos[:, None, :] - lpos[None, :, :]) ** 2).sum(axis=2))
    atom_min = dist.min(axis=1)
    keep_ids = set()
    for atom, dmin in zip(protein.atoms, atom_min):
        if dmin <= cutoff:
            keep_ids.add(atom.residue_id)
    kept = tuple(a for a in protein.atoms if a.residue_id in keep_ids)
    if not kept:
        raise ValidationError("no residues within cutoff")
    return ProteinPocket(kept)


def fibonacci_sphere(samples: int) -> np.ndarray:
    """Deterministic near-uniform unit-sphere points."""
    i = np.arange(samples, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / samples
    r = np.sqrt(np.clip(1.0 - z**2, 0.0, None))
    theta = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def approximate_ses(
    pocket: ProteinPocket,
    ligand: Ligand | None = None,
    probe_radius: float = 1.4,
    samples_per_atom: int = 64,
    retain_radius: float = 5.0,
    mesh_k: int = 3,
) -> SurfaceGraph:
    """Sphere-sampled stand-in for a solvent-excluded surface.

    Candidate points are sampled on each atom's probe-inflated sphere, points
    buried inside any other atom's inflated sphere are dropped, and (when a
    ligand is given) only points within ``retain_radius`` of a ligand atom are
    retained. Mesh edges come from a k-NN graph over the survivors. Features
    are left zeroed; fill them with :func:`surface_features`.
    """
    centers = pocket.positions()
    inflated = np.array([element_radius(el) + probe_radius for el in pocket.elements()])
    unit = fibonacci_sphere(samples_per_atom)
    points = (centers[:, None, :] + inflated[:, None, None] * unit[None, :, :]).reshape(-1, 3)
    owner = np.repeat(np.arange(pocket.size), samples_per_atom)

    dist = np.sqrt(((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
    dist[np.arange(points.shape[0]), owner] = np.inf
    buried = np.any(dist < inflated[None, :] - 1e-9, axis=1)
    survivors = points[~buried]

    if survivors.size:
        survivors = np.unique(survivors, axis=0)  # coincident atoms sample identical points
    if ligand is not None and survivors.size:
        ldist = np.sqrt(((survivors[:, None, :] - ligand.positions[None, :, :]) ** 2).sum(axis=2))
        survivors = survivors[ldist.min(axis=1) <= retain_radius]
    if survivors.shape[0] == 0:
        raise ValidationError("zero surviving surface vertices")

    m = survivors.shape[0]
    edges: tuple[tuple[int, int], ...] = ()
    k = min(mesh_k, m - 1)
    if k >= 1:
        pairs = knn_edges(survivors, k)
        undirected = {(min(a, b), max(a, b)) for a, b in pairs}
        edges = tuple(sorted(undirected))
    vertices = tuple(SurfaceVertex(p, np.zeros(4)) for p in survivors)
    return SurfaceGraph(vertices, edges)


def _residue_feature(residue_name: str) -> tuple[float, float, float]:
    name = residue_name.upper()
    hyd = KYTE_DOOLITTLE.get(name, 0.0) / 4.5
    pol = 1.0 if name in POLAR_RESIDUES else 0.0
    chg = -1.0 if name in NEGATIVE_RESIDUES else (1.0 if name in POSITIVE_RESIDUES else 0.0)
    return hyd, pol, chg


def _two_hop_neighbors(n_vertices: int, mesh_edges) -> list[np.ndarray]:
    adj: list[set[int]] = [set() for _ in range(n_vertices)]
    for i, j in mesh_edges:
        adj[i].add(j)
        adj[j].add(i)
    hoods = []
    for v in range(n_vertices):
        hood = set(adj[v])
        for u in adj[v]:
            hood.update(adj[u])
        hood.discard(v)
        hoods.append(np.array(sorted(hood), dtype=np.int64))
    return hoods


def _shape_index_at(rel: np.ndarray, outward: np.ndarray) -> float:
    """Shape index from a quadric fit of neighbor offsets ``rel``."""
    cov = rel.T @ rel
    _, vecs = np.linalg.eigh(cov)
    normal = vecs[:, 0]
    if normal @ outward < 0:
        normal = -normal
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(normal)))] = 1.0
    t1 = np.cross(normal, axis)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    u = rel @ t1
    w = rel @ t2
    h = rel @ normal
    design = np.stack([u**2, u * w, w**2, u, w, np.ones_like(u)], axis=1)
    coef, *_ = np.linalg.lstsq(design, h, rcond=None)
    a, b, c, d, e, _ = coef
    s = math.sqrt(1.0 + d * d + e * e)
    first = np.array([[1.0 + d * d, d * e], [d * e, 1.0 + e * e]])
    second = np.array([[2.0 * a, b], [b, 2.0 * c]]) / s
    shape_op = np.linalg.solve(first, second)
    k1, k2 = np.sort(np.real(np.linalg.eigvals(shape_op)))
    if abs(k2 - k1) < 1e-6:
        return 0.0
    return (2.0 / math.pi) * math.atan2(k1 + k2, k2 - k1)


def surface_features(surface: SurfaceGraph, pocket: ProteinPocket) -> tuple[SurfaceGraph, int]:
    """Fill shape index (quadric-fit curvature) and nearest-residue features.

    Returns the annotated graph and the count of vertices that fell back to a
    zero shape index for lack of fit neighbors.
    """
    positions = surface.positions()
    centers = pocket.positions()
    hoods = _two_hop_neighbors(surface.size, surface.mesh_edges)
    dist = np.sqrt(((positions[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
    nearest_atom = dist.argmin(axis=1)

    vertices = []
    fallbacks = 0
    for v in range(surface.size):
        hood = hoods[v]
        if hood.size < 5:
            shape = 0.0
            fallbacks += 1
        else:
            rel = positions[hood] - positions[v]
            outward = positions[v] - centers[nearest_atom[v]]
            shape = _shape_index_at(rel, outward)
        residue = pocket.atoms[int(nearest_atom[v])].residue_name
        hyd, pol, chg = _residue_feature(residue)
        vertices.append(SurfaceVertex(positions[v], np.array([shape, hyd, pol, chg])))
    return SurfaceGraph(tuple(vertices), surface.mesh_edges), fallbacks


@dataclass(frozen=True)
class UnifiedGraph:
    """Surface vertices then ligand atoms, with typed directed edges.

    An edge (src, dst) carries a message from src into dst's neighborhood;
    k-NN edges are stored so that dst's sources are dst's nearest neighbors.
    """

    node_positions: np.ndarray  # (N, 3)
    node_kind: np.ndarray  # (N,) KIND_SURFACE / KIND_LIGAND
    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray
    edge_type: np.ndarray
    n_surface: int
    n_ligand: int

    @property
    def edge_count(self) -> int:
        return self.src.shape[0]

    def type_onehot(self) -> np.ndarray:
        hot = np.zeros((self.edge_count, EDGE_TYPE_COUNT))
        hot[np.arange(self.edge_count), self.edge_type] = 1.0
        return hot


def build_unified_graph(surface: SurfaceGraph, ligand_positions: np.ndarray, k: int) -> UnifiedGraph:
    """Mesh edges plus k-NN edges over surface+ligand nodes, plus self-loops.

    Pairs connected by both the mesh and k-NN keep the mesh label.
    """
    lig = np.asarray(ligand_positions, dtype=np.float64)
    if lig.ndim != 2 or lig.shape[1] != 3 or not np.all(np.isfinite(lig)):
        raise ValidationError("ligand positions must be a finite (N, 3) array")
    spos = surface.positions()
    ns, nl = spos.shape[0], lig.shape[0]
    pos = np.vstack([spos, lig]) if nl else spos
    kind = np.concatenate([np.zeros(ns, dtype=np.int64), np.ones(nl, dtype=np.int64)])
    n = ns + nl

    typed: dict[tuple[int, int], int] = {}
    for i, j in surface.mesh_edges:
        typed[(i, j)] = EDGE_SS_MESH
        typed[(j, i)] = EDGE_SS_MESH
    if k >= n:
        raise ValidationError(f"k={k} must be smaller than the node count {n}")
    for node, neighbor in knn_edges(pos, k):
        key = (int(neighbor), int(node))  # message neighbor -> node
        if key in typed:
            continue
        s_kind, d_kind = kind[key[0]], kind[key[1]]
        if s_kind == KIND_SURFACE and d_kind == KIND_SURFACE:
            typed[key] = EDGE_SS_KNN
        elif s_kind == KIND_SURFACE:
            typed[key] = EDGE_SL_KNN
        elif d_kind == KIND_SURFACE:
            typed[key] = EDGE_LS_KNN
        else:
            typed[key] = EDGE_LL_KNN
    for node in range(n):
        typed[(node, node)] = EDGE_SELF

    keys = sorted(typed)
    src = np.array([a for a, _ in keys], dtype=np.int64)
    dst = np.array([b for _, b in keys], dtype=np.int64)
    etype = np.array([typed[key] for key in keys], dtype=np.int64)
    dist = np.sqrt(((pos[src] - pos[dst]) ** 2).sum(axis=1))
    return UnifiedGraph(pos, kind, src, dst, dist, etype, ns, nl)


@dataclass(frozen=True)
class LocalEdgeSet:
    """Distance-binned edges among ligand (first) and protein atoms.

    Node indices: ligand atoms occupy [0, n_ligand), protein atoms follow.
    Every edge is ligand-incident; bins are exclusive:
    bin 0 <= 2.7 A < bin 1 <= 3.4 A < bin 2 <= 5.0 A.
    """

    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray
    bin_index: np.ndarray
    n_ligand: int
    n_protein: int
    thresholds: tuple[float, ...] = LOCAL_EDGE_THRESHOLDS

    @property
    def edge_count(self) -> int:
        return self.src.shape[0]

    def bin_onehot(self) -> np.ndarray:
        hot = np.zeros((self.edge_count, len(self.thresholds)))
        hot[np.arange(self.edge_count), self.bin_index] = 1.0
        return hot


def build_local_edges(
    ligand_positions: np.ndarray,
    pocket_positions: np.ndarray,
    thresholds: tuple[float, ...] = LOCAL_EDGE_THRESHOLDS,
) -> LocalEdgeSet:
    """All ligand-incident ordered pairs within the largest threshold."""
    lig = np.asarray(ligand_positions, dtype=np.float64)
    prot = np.asarray(pocket_positions, dtype=np.float64)
    if not (np.all(np.isfinite(lig)) and np.all(np.isfinite(prot))):
        raise ValidationError("positions must be finite")
    nl, npz = lig.shape[0], prot.shape[0]
    pos = np.vstack([lig, prot]) if npz else lig
    n = nl + npz
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    cut = thresholds[-1]
    srcs, dsts, dists, bins = [], [], [], []
    edges = np.array(thresholds)
    for i in range(n):
        for j in range(n):
            if i == j or (i >= nl and j >= nl):
                continue
            d = dist[i, j]
            if d > cut:
                continue
            srcs.append(i)
            dsts.append(j)
            dists.append(d)
            bins.append(int(np.searchsorted(edges, d, side="left")))
    return LocalEdgeSet(
        np.array(srcs, dtype=np.int64),
        np.array(dsts, dtype=np.int64),
        np.array(dists, dtype=np.float64),
        np.array(bins, dtype=np.int64),
        nl,
        npz,
        tuple(thresholds),
    )


def count_clashes(
    ligand: Ligand,
    pocket: ProteinPocket,
    vocabulary: AtomVocabulary | None = None,
    radii: dict[str, float] | None = None,
    tolerance: float = 0.5,
) -> int:
    """Ligand-protein pairs closer than r_i + r_j - tolerance."""
    vocab = vocabulary or AtomVocabulary()
    table = radii or VDW_RADII
    fallback = table.get("other")
    lig_radii = []
    for t in ligand.types:
        symbol = vocab.symbols[int(t)]
        r = table.get(symbol, fallback)
        if r is None:
            raise ValidationError(f"no van der Waals radius for element '{symbol}'")
        lig_radii.append(r)
    prot_radii = []
    for el in pocket.elements():
        r = table.get(el, fallback)
        if r is None:
            raise ValidationError(f"no van der Waals radius for element '{el}'")
        prot_radii.append(r)
    lr = np.array(lig_radii)[:, None]
    pr = np.array(prot_radii)[None, :]
    dist = np.sqrt(((ligand.positions[:, None, :] - pocket.positions()[None, :, :]) ** 2).sum(axis=2))
    return int(np.sum(dist < lr + pr - tolerance))
