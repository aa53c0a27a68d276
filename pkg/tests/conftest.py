import math

import numpy as np
import pytest
from hypothesis import settings

from sculptdrug.io import (
    Atom3D,
    AtomVocabulary,
    Ligand,
    LoadedComplex,
    PocketAtom,
    ProteinPocket,
    SurfaceGraph,
    SurfaceVertex,
)

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")

RESIDUE_CYCLE = ("ALA", "ILE", "SER", "GLY", "LEU", "VAL", "ASP", "LYS")


def make_pocket(n_residues=3, atoms_per_residue=4, seed=0, radius=5.5, center=(0.0, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=float)
    atoms = []
    for rid in range(1, n_residues + 1):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        anchor = center + direction * radius
        for k in range(atoms_per_residue):
            offset = rng.normal(scale=0.9, size=3)
            element = ("C", "N", "O", "C")[k % 4]
            atoms.append(
                PocketAtom(Atom3D(element, anchor + offset), rid, RESIDUE_CYCLE[(rid - 1) % len(RESIDUE_CYCLE)])
            )
    return ProteinPocket(tuple(atoms))


def make_ligand(n_atoms=5, seed=0, spread=1.8, center=(0.0, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    positions = rng.normal(scale=spread, size=(n_atoms, 3)) + np.asarray(center, dtype=float)
    types = rng.integers(0, 8, size=n_atoms)  # skip the trailing 'other' class
    return Ligand(positions, types.astype(np.int64))


def make_surface(n_vertices=12, seed=0, radius=3.0, center=(0.0, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    verts = []
    for _ in range(n_vertices):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        feature = np.array(
            [rng.uniform(-1, 1), rng.uniform(-1, 1), float(rng.integers(0, 2)), float(rng.integers(-1, 2))]
        )
        verts.append(SurfaceVertex(np.asarray(center) + direction * radius, feature))
    edges = tuple((i, (i + 1) % n_vertices) for i in range(n_vertices - 1))
    return SurfaceGraph(tuple(verts), edges)


def make_complex(seed=0, n_ligand=4, n_residues=3, n_vertices=10):
    ligand = make_ligand(n_ligand, seed=seed)
    pocket = make_pocket(n_residues, seed=seed + 1, center=ligand.positions.mean(axis=0))
    surface = make_surface(n_vertices, seed=seed + 2, center=ligand.positions.mean(axis=0))
    return LoadedComplex(pocket, surface, ligand, 0)


@pytest.fixture
def vocabulary():
    return AtomVocabulary()


@pytest.fixture
def toy_complex():
    return make_complex(seed=3)


def random_rotation(seed):
    rng = np.random.default_rng(seed)
    mat = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(mat)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    assert math.isclose(abs(np.linalg.det(q)), 1.0, rel_tol=1e-9)
    return q
