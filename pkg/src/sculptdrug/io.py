"""Domain types and file persistence: pockets, surfaces, ligands, checkpoints.

Formats
-------
Pocket  : JSON ``{"atoms": [{"el","x","y","z","res_id","res_name"}, ...]}``
Surface : JSON ``{"vertices": [{"x","y","z","si","hyd","pol","chg"}, ...],
          "edges": [[i, j], ...]}``; the four feature keys are optional and
          can be filled in later by the geometry module.
Ligand  : plain text; line 1 is the atom count, then one ``EL x y z`` line
          per atom with 6 decimal places.
Checkpoint : little-endian binary; magic ``SCLP``, u32 version, u32 tensor
          count, then per tensor u16 name length, name bytes, u8 rank,
          u64 dims, f64 payload.

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ParseError, ValidationError

CHECKPOINT_MAGIC = b"SCLP"
CHECKPOINT_VERSION = 1

DEFAULT_ELEMENTS = ("C", "N", "O", "F", "P", "S", "Cl", "Br", "other")


@dataclass(frozen=True)
class AtomVocabulary:
    """Ordered element symbols with a trailing catch-all class."""

    symbols: tuple[str, ...] = DEFAULT_ELEMENTS

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValidationError("vocabulary symbols must be unique")
        if not self.symbols or self.symbols[-1] != "other":
            raise ValidationError("vocabulary must end with an 'other' class")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def other_index(self) -> int:
        return len(self.symbols) - 1

    def index(self, symbol: str) -> int:
        """Index of ``symbol``, falling back to the 'other' class."""
        try:
            return self.symbols.index(symbol)
        except ValueError:
            return self.other_index

    def knows(self, symbol: str) -> bool:
        return symbol in self.symbols


@dataclass(frozen=True)
class Atom3D:
    element: str
    position: np.ndarray  # (3,) float64, Angstrom

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        if pos.shape != (3,):
            raise ValidationError("atom position must be a 3-vector")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("atom position components must be finite")
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class PocketAtom:
    atom: Atom3D
    residue_id: int
    residue_name: str


@dataclass(frozen=True)
class ProteinPocket:
    atoms: tuple[PocketAtom, ...]

    def __post_init__(self):
        if len(self.atoms) < 1:
            raise ValidationError("pocket must contain at least one atom")

    @property
    def size(self) -> int:
        return len(self.atoms)

    def positions(self) -> np.ndarray:
        return np.array([a.atom.position for a in self.atoms], dtype=np.float64)

    def elements(self) -> list[str]:
        return [a.atom.element for a in self.atoms]

    def residue_ids(self) -> np.ndarray:
        return np.array([a.residue_id for a in self.atoms], dtype=np.int64)

    def translated(self, shift: np.ndarray) -> "ProteinPocket":
        return self.transformed(np.eye(3), shift)

    def transformed(self, rot: np.ndarray, shift: np.ndarray) -> "ProteinPocket":
        moved = tuple(
            PocketAtom(Atom3D(a.atom.element, rot @ a.atom.position + shift), a.residue_id, a.residue_name)
            for a in self.atoms
        )
        return ProteinPocket(moved)


@dataclass(frozen=True)
class SurfaceVertex:
    position: np.ndarray  # (3,)
    feature: np.ndarray  # (4,) shape index, hydrophobicity, polarity, charge

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        feat = np.asarray(self.feature, dtype=np.float64)
        if pos.shape != (3,) or feat.shape != (4,):
            raise ValidationError("surface vertex needs a 3-vector position and 4-vector feature")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(feat))):
            raise ValidationError("surface vertex values must be finite")
        if not -1.0 - 1e-9 <= feat[0] <= 1.0 + 1e-9:
            raise ValidationError("shape index must lie in [-1, 1]")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "feature", feat)


@dataclass(frozen=True)
class SurfaceGraph:
    vertices: tuple[SurfaceVertex, ...]
    mesh_edges: tuple[tuple[int, int], ...]  # undirected, stored once

    def __post_init__(self):
        n = len(self.vertices)
        seen = set()
        for i, j in self.mesh_edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ValidationError("edge index out of range")
            if i == j:
                raise ValidationError("self-loop mesh edge")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValidationError("duplicate mesh edge")
            seen.add(key)

    @property
    def size(self) -> int:
        return len(self.vertices)

    def positions(self) -> np.ndarray:
        return np.array([v.position for v in self.vertices], dtype=np.float64)

    def features(self) -> np.ndarray:
        return np.array([v.feature for v in self.vertices], dtype=np.float64)

    def transformed(self, rot: np.ndarray, shift: np.ndarray) -> "SurfaceGraph":
        moved = tuple(SurfaceVertex(rot @ v.position + shift, v.feature) for v in self.vertices)
        return SurfaceGraph(moved, self.mesh_edges)


@dataclass(frozen=True)
class Ligand:
    positions: np.ndarray  # (N, 3) float64, Angstrom
    types: np.ndarray  # (N,) int64 vocabulary indices

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        typ = np.asarray(self.types, dtype=np.int64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValidationError("ligand positions must be an (N, 3) array with N >= 1")
        if typ.shape != (pos.shape[0],):
            raise ValidationError("ligand types must align with positions")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("ligand positions must be finite")
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if np.any(dist == 0.0):
            raise ValidationError("duplicate atom position")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "types", typ)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    def transformed(self, rot: np.ndarray, shift: np.ndarray) -> "Ligand":
        return Ligand(self.positions @ rot.T + shift, self.types)


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to resume or sample from a training run."""

    version: int
    config: dict
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    seed: int
    step: int
    ligand_size_counts: dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class LoadedComplex:
    pocket: ProteinPocket
    surface: SurfaceGraph
    ligand: Ligand | None
    unknown_elements: int  # atoms mapped to the 'other' class while loading


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ParseError(f"{where}: missing field '{key}'")
    return obj[key]


def _load_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def load_pocket(path: str | Path) -> ProteinPocket:
    doc = _load_json(path)
    raw_atoms = _require(doc, "atoms", str(path))
    atoms = []
    for idx, rec in enumerate(raw_atoms):
        where = f"{path}: atom {idx}"
        el = str(_require(rec, "el", where))
        pos = [_require(rec, k, where) for k in ("x", "y", "z")]
        rid = _require(rec, "res_id", where)
        rname = str(_require(rec, "res_name", where))
        try:
            atoms.append(PocketAtom(Atom3D(el, np.array(pos, dtype=np.float64)), int(rid), rname))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where}: {exc}") from exc
    return ProteinPocket(tuple(atoms))


def load_surface(path: str | Path) -> SurfaceGraph:
    doc = _load_json(path)
    raw_vertices = _require(doc, "vertices", str(path))
    vertices = []
    for idx, rec in enumerate(raw_vertices):
        where = f"{path}: vertex {idx}"
        pos = [_require(rec, k, where) for k in ("x", "y", "z")]
        feat = [rec.get("si", 0.0), rec.get("hyd", 0.0), rec.get("pol", 0.0), rec.get("chg", 0.0)]
        vertices.append(SurfaceVertex(np.array(pos, dtype=np.float64), np.array(feat, dtype=np.float64)))
    edges = []
    for idx, pair in enumerate(doc.get("edges", [])):
        if len(pair) != 2:
            raise ParseError(f"{path}: edge {idx} is not a pair")
        edges.append((int(pair[0]), int(pair[1])))
    return SurfaceGraph(tuple(vertices), tuple(edges))


def write_pocket(pocket: ProteinPocket, path: str | Path) -> None:
    doc = {
        "atoms": [
            {
                "el": a.atom.element,
                "x": float(a.atom.position[0]),
                "y": float(a.atom.position[1]),
                "z": float(a.atom.position[2]),
                "res_id": int(a.residue_id),
                "res_name": a.residue_name,
            }
            for a in pocket.atoms
        ]
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_surface(surface: SurfaceGraph, path: str | Path) -> None:
    doc = {
        "vertices": [
            {
                "x": float(v.position[0]),
                "y": float(v.position[1]),
                "z": float(v.position[2]),
                "si": float(v.feature[0]),
                "hyd": float(v.feature[1]),
                "pol": float(v.feature[2]),
                "chg": float(v.feature[3]),
            }
            for v in surface.vertices
        ],
        "edges": [[int(i), int(j)] for i, j in surface.mesh_edges],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_ligand(path: str | Path, vocabulary: AtomVocabulary) -> tuple[Ligand, int]:
    """Parse a ligand file; returns the ligand and the unknown-element count."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise ParseError(f"{path}: empty file")
    try:
        count = int(lines[0].strip())
    except ValueError as exc:
        raise ParseError(f"{path}: line 1: expected atom count") from exc
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ParseError(f"{path}: expected {count} atom lines, found {len(body)}")
    positions = np.zeros((count, 3), dtype=np.float64)
    types = np.zeros(count, dtype=np.int64)
    unknown = 0
    for idx, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 4:
            raise ParseError(f"{path}: line {idx + 2}: expected 'EL x y z'")
        el = parts[0]
        try:
            positions[idx] = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}: line {idx + 2}: bad coordinate") from exc
        if not vocabulary.knows(el):
            unknown += 1
        types[idx] = vocabulary.index(el)
    return Ligand(positions, types), unknown


def write_ligand(ligand: Ligand, vocabulary: AtomVocabulary, path: str | Path) -> None:
    if np.any(ligand.types < 0) or np.any(ligand.types >= vocabulary.size):
        raise ValidationError("ligand type index outside vocabulary")
    lines = [str(ligand.size)]
    for idx in range(ligand.size):
        el = vocabulary.symbols[ligand.types[idx]]
        x, y, z = ligand.positions[idx]
        lines.append(f"{el} {x:.6f} {y:.6f} {z:.6f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_complex(
    pocket_path: str | Path,
    surface_path: str | Path,
    ligand_path: str | Path | None = None,
    vocabulary: AtomVocabulary | None = None,
) -> LoadedComplex:
    """Load and cross-validate a pocket/surface(/ligand) triple."""
    vocab = vocabulary or AtomVocabulary()
    pocket = load_pocket(pocket_path)
    surface = load_surface(surface_path)
    unknown = sum(1 for el in pocket.elements() if not vocab.knows(el))
    ligand = None
    if ligand_path is not None:
        ligand, lig_unknown = load_ligand(ligand_path, vocab)
        unknown += lig_unknown
    return LoadedComplex(pocket, surface, ligand, unknown)


# -- checkpoint wire format ---------------------------------------------------

def _pack_tensor(fh, name: str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    raw_name = name.encode("utf-8")
    if len(raw_name) > 0xFFFF:
        raise CheckpointError(f"tensor name too long: {name}")
    fh.write(struct.pack("<H", len(raw_name)))
    fh.write(raw_name)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint payload")
    return buf


def _unpack_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    dims = [struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(fh, count * 8)
    arr = np.frombuffer(payload, dtype="<f8").copy().reshape(dims)
    return name, arr


def _text_to_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _tensor_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.float64).astype(np.uint8)).decode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    named: list[tuple[str, np.ndarray]] = []
    named.append(("meta/config_json", _text_to_tensor(json.dumps(ckpt.config, sort_keys=True))))
    named.append(("meta/seed", np.array([float(ckpt.seed)])))
    named.append(("meta/step", np.array([float(ckpt.step)])))
    if ckpt.ligand_size_counts:
        sizes = sorted(ckpt.ligand_size_counts)
        named.append(("meta/ligand_sizes", np.array(sizes, dtype=np.float64)))
        named.append(("meta/ligand_size_counts", np.array([ckpt.ligand_size_counts[s] for s in sizes], dtype=np.float64)))
    for prefix, group in (("param", ckpt.params), ("ema", ckpt.ema), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name in sorted(group):
            named.append((f"{prefix}/{name}", group[name]))
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor '{name}' contains non-finite values; refusing to save")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(named)))
        for name, arr in named:
            _pack_tensor(fh, name, arr)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = dict(_unpack_tensor(fh) for _ in range(count))
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "ema": {}, "adam_m": {}, "adam_v": {}}
    config: dict = {}
    seed = 0
    step = 0
    size_counts: dict[int, int] = {}
    sizes = tensors.pop("meta/ligand_sizes", None)
    counts = tensors.pop("meta/ligand_size_counts", None)
    if sizes is not None and counts is not None:
        size_counts = {int(s): int(c) for s, c in zip(sizes, counts)}
    for name, arr in tensors.items():
        if name == "meta/config_json":
            config = json.loads(_tensor_to_text(arr))
        elif name == "meta/seed":
            seed = int(arr[0])
        elif name == "meta/step":
            step = int(arr[0])
        else:
            prefix, _, rest = name.partition("/")
            if prefix not in groups or not rest:
                raise CheckpointError(f"unknown tensor group in '{name}'")
            groups[prefix][rest] = arr
    return Checkpoint(
        version=version,
        config=config,
        params=groups["param"],
        ema=groups["ema"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        seed=seed,
        step=step,
        ligand_size_counts=size_counts,
    )


def rigid_motion(rng: np.random.Generator, max_shift: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    """Random rotation (QR-orthogonalized, det +1) and translation."""
    mat = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(mat)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    shift = rng.uniform(-max_shift, max_shift, size=3)
    return q, shift
