"""Structural-plausibility and affinity-aggregation metrics.

Distance histograms use fixed uniform bins (C-C pairs: 100 bins on [0, 2] A;
all-atom pairs: 120 bins on [0, 12] A; bond-length classes: 100 bins on
[0.8, 2.0] A) and Jensen-Shannon divergences use base-2 logarithms so values
land in [0, 1]. Docking energies are ingested, never computed; positive
energies are treated as invalid and excluded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .io import AtomVocabulary, Ligand

CC_BINS = (0.0, 2.0, 100)
ALL_BINS = (0.0, 12.0, 120)
BOND_BINS = (0.8, 2.0, 100)

BOND_CLASSES = ("C-C", "C=C", "C:C", "C-N", "C=N", "C:N", "C-O", "C=O")

# single-bond covalent radii (Angstrom) for the distance-based bond fallback
COVALENT_RADII = {
    "C": 0.76, "N": 0.71, "O": 0.66, "F": 0.57, "P": 1.07, "S": 1.05,
    "Cl": 1.02, "Br": 1.20, "other": 0.76,
}
BOND_FALLBACK_FACTOR = 1.7


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray  # strictly increasing, uniform
    masses: np.ndarray  # normalized to 1

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        masses = np.asarray(self.masses, dtype=np.float64)
        if edges.ndim != 1 or edges.size != masses.size + 1:
            raise ValidationError("histogram needs len(edges) == len(masses) + 1")
        if np.any(np.diff(edges) <= 0):
            raise ValidationError("histogram edges must be strictly increasing")
        if np.any(masses < 0):
            raise ValidationError("histogram masses must be non-negative")
        total = masses.sum()
        if total <= 0:
            raise ValidationError("histogram has no mass")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "masses", masses / total)


def histogram_from_values(values: np.ndarray, lo: float, hi: float, bins: int) -> Histogram:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(lo, hi))
    if counts.sum() == 0:
        raise ValidationError("no pairs in range")
    return Histogram(edges, counts.astype(np.float64))


def jsd(p: Histogram, q: Histogram) -> float:
    """Jensen-Shannon divergence with base-2 logs; symmetric, in [0, 1]."""
    if p.edges.shape != q.edges.shape or not np.allclose(p.edges, q.edges, atol=1e-12):
        raise ValidationError("histograms must share bin edges")

    def half_kl(a: np.ndarray, m: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / m[mask])))

    m = 0.5 * (p.masses + q.masses)
    return 0.5 * half_kl(p.masses, m) + 0.5 * half_kl(q.masses, m)


def _pair_distances(ligand: Ligand, element_pair: tuple[str, str] | None, vocab: AtomVocabulary) -> np.ndarray:
    pos = ligand.positions
    n = pos.shape[0]
    if n < 2:
        return np.empty(0)
    iu, ju = np.triu_indices(n, k=1)
    dist = np.sqrt(((pos[iu] - pos[ju]) ** 2).sum(axis=1))
    if element_pair is None:
        return dist
    symbols = np.array([vocab.symbols[t] for t in ligand.types])
    a, b = element_pair
    mask = ((symbols[iu] == a) & (symbols[ju] == b)) | ((symbols[iu] == b) & (symbols[ju] == a))
    return dist[mask]


def distance_histograms(
    molecules: list[Ligand], mode: str, vocabulary: AtomVocabulary | None = None
) -> Histogram:
    """Pooled pairwise-distance histogram: 'cc2' (C-C <= 2 A) or 'all12'."""
    vocab = vocabulary or AtomVocabulary()
    if mode == "cc2":
        lo, hi, bins = CC_BINS
        pair = ("C", "C")
    elif mode == "all12":
        lo, hi, bins = ALL_BINS
        pair = None
    else:
        raise ValidationError(f"unknown histogram mode '{mode}'")
    pooled = []
    for mol in molecules:
        d = _pair_distances(mol, pair, vocab)
        pooled.append(d[d <= hi])
    values = np.concatenate(pooled) if pooled else np.empty(0)
    if values.size == 0:
        raise ValidationError("no pairs in range")
    return histogram_from_values(values, lo, hi, bins)


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    bond_class: str  # one of BOND_CLASSES

    def __post_init__(self):
        if self.bond_class not in BOND_CLASSES:
            raise ValidationError(f"unknown bond class '{self.bond_class}'")


def infer_single_bonds(ligand: Ligand, vocabulary: AtomVocabulary | None = None) -> list[Bond]:
    """Distance-based fallback tagging pairs below 1.7x the covalent sum.

    Only generic single bonds between C/N/O partners are produced; ligand
    files carry no bond orders, so aromatic/double classes stay empty.
    """
    vocab = vocabulary or AtomVocabulary()
    symbols = [vocab.symbols[t] for t in ligand.types]
    bonds = []
    for i in range(ligand.size):
        for j in range(i + 1, ligand.size):
            si, sj = symbols[i], symbols[j]
            pair = tuple(sorted((si, sj)))
            if pair not in {("C", "C"), ("C", "N"), ("C", "O")}:
                continue
            cutoff = BOND_FALLBACK_FACTOR * (
                COVALENT_RADII.get(si, COVALENT_RADII["other"])
                + COVALENT_RADII.get(sj, COVALENT_RADII["other"])
            )
            d = float(np.linalg.norm(ligand.positions[i] - ligand.positions[j]))
            if d < cutoff:
                other = si if sj == "C" else sj
                cls = "C-C" if pair == ("C", "C") else f"C-{other}"
                bonds.append(Bond(i, j, cls))
    return bonds


def bond_length_profile(
    molecules: list[tuple[Ligand, list[Bond]]]
) -> dict[str, Histogram]:
    """Per-class bond-length histograms over one molecule pool."""
    lo, hi, bins = BOND_BINS
    per_class: dict[str, list[float]] = {cls: [] for cls in BOND_CLASSES}
    for ligand, bonds in molecules:
        for bond in bonds:
            d = float(np.linalg.norm(ligand.positions[bond.i] - ligand.positions[bond.j]))
            per_class[bond.bond_class].append(d)
    profile = {}
    for cls, values in per_class.items():
        arr = np.asarray(values)
        arr = arr[(arr >= lo) & (arr <= hi)]
        if arr.size:
            profile[cls] = histogram_from_values(arr, lo, hi, bins)
    return profile


def aggregate_bond_jsd(generated: dict[str, Histogram], reference: dict[str, Histogram]) -> float | None:
    """Mean per-class JSD; a class present on one side only contributes 1."""
    scores = []
    for cls in BOND_CLASSES:
        in_gen, in_ref = cls in generated, cls in reference
        if not in_gen and not in_ref:
            continue
        if in_gen and in_ref:
            scores.append(jsd(generated[cls], reference[cls]))
        else:
            scores.append(1.0)
    if not scores:
        return None
    return float(np.mean(scores))


@dataclass(frozen=True)
class EnergyTable:
    """Per-pocket reference energy and generated-ligand energies (kcal/mol)."""

    reference: dict[str, float]
    generated: dict[str, tuple[float, ...]]

    def valid_generated(self, pocket_id: str) -> list[float]:
        # positive docking energies are invalid by convention
        return [e for e in self.generated.get(pocket_id, ()) if e <= 0.0]


def load_energy_table(path) -> EnergyTable:
    reference: dict[str, float] = {}
    generated: dict[str, list[float]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"pocket_id", "role", "energy"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ParseError(f"{path}: expected header 'pocket_id,role,energy'")
        for row_no, row in enumerate(reader, start=2):
            pocket = row["pocket_id"]
            role = row["role"]
            try:
                energy = float(row["energy"])
            except ValueError as exc:
                raise ParseError(f"{path}: line {row_no}: bad energy value") from exc
            if not math.isfinite(energy):
                raise ParseError(f"{path}: line {row_no}: energy must be finite")
            if role == "ref":
                reference[pocket] = energy
            elif role == "gen":
                generated.setdefault(pocket, []).append(energy)
            else:
                raise ParseError(f"{path}: line {row_no}: role must be 'ref' or 'gen'")
    return EnergyTable(reference, {k: tuple(v) for k, v in generated.items()})


@dataclass(frozen=True)
class AffinitySummary:
    evina: float
    imp_pct: float
    mpbg_pct: float


def affinity_aggregate(table: EnergyTable) -> AffinitySummary:
    """Evina (pooled mean), IMP% (beat-the-reference rate), MPBG% (mean
    per-pocket relative gain, positive when generated beats the reference)."""
    pooled: list[float] = []
    improved = 0
    gains = []
    for pocket_id, ref in table.reference.items():
        valid = table.valid_generated(pocket_id)
        if not valid:
            continue
        pooled.extend(valid)
        improved += sum(1 for e in valid if e < ref)
        mean_gen = float(np.mean(valid))
        gains.append((mean_gen - ref) / ref)
    if not pooled:
        raise ValidationError("no valid generated energies")
    return AffinitySummary(
        evina=float(np.mean(pooled)),
        imp_pct=100.0 * improved / len(pooled),
        mpbg_pct=100.0 * float(np.mean(gains)),
    )
