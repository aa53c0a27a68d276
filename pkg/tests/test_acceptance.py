"""Acceptance suite: one test per exit criterion, each printing a PASS line.

The reference-scale headline numbers require cluster-scale training and an
external docking engine; acceptance is therefore property-based plus
scaled-down end-to-end runs, with every tolerance pinned here.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from sculptdrug import bfn, geometry, metrics
from sculptdrug.cli import RunConfig, _item_rng, build_toy_complex, main
from sculptdrug.encoder import EncoderConfig, ScaOutput, init_encoder_params, sca_forward
from sculptdrug.io import (
    AtomVocabulary,
    Ligand,
    load_ligand,
    rigid_motion,
    write_ligand,
    write_pocket,
    write_surface,
)
from sculptdrug.numerics import ParameterStore, Tensor, finite_diff_check

from conftest import make_complex, make_ligand, make_pocket


def report(criterion: str, started: float):
    print(f"ACCEPTANCE PASS [{criterion}] ({time.time() - started:.1f}s)")


SMALL_RBF = {"centers": [0.0, 1.25, 2.5, 3.75, 5.0, 6.25, 7.5, 8.75], "gamma": 0.625}

TOY_ENCODER = {
    "hidden": 16,
    "heads": 4,
    "bab_layers": 1,
    "global_layers": 2,
    "local_layers": 2,
    "knn_k": 3,
    "time_dim": 8,
    "rbf": SMALL_RBF,
}

OVERFIT_ENCODER = {
    "hidden": 64,
    "heads": 8,
    "bab_layers": 2,
    "global_layers": 2,
    "local_layers": 6,
    "knn_k": 6,
    "time_dim": 16,
    "rbf": SMALL_RBF,
}


def test_criterion_1_schedule_identities():
    """gamma(0)=0, gamma(1)=1-sigma1^2, sum(alpha)=beta1; 1e-12."""
    started = time.time()
    _, gamma0 = bfn.schedule_continuous(0.0, 0.03)
    _, gamma1 = bfn.schedule_continuous(1.0, 0.03)
    assert abs(gamma0) < 1e-12
    assert abs(gamma1 - 0.9991) < 1e-12
    for n in (1, 10, 1000):
        total = sum(bfn.schedule_discrete(1.5, n, i=i)[1] for i in range(1, n + 1))
        assert abs(total - 1.5) < 1e-12
    beta, gamma = bfn.schedule_continuous(0.5, 0.03)
    assert abs(beta / (1.0 + beta) - gamma) < 1e-12
    assert time.time() - started < 1.0
    report("1: schedule identities", started)


def test_criterion_2_oracle_zero_loss():
    """Ground-truth stub network gives exactly zero loss on every draw."""
    started = time.time()
    cx = make_complex(seed=21, n_ligand=5)
    com = cx.pocket.positions().mean(axis=0)
    x_star = cx.ligand.positions - com
    onehot = np.eye(9)[cx.ligand.types]

    def oracle(mu, theta, pocket, surface, t):
        return ScaOutput(Tensor(x_star.copy()), Tensor(onehot.copy()))

    store = ParameterStore()
    schedule = bfn.NoiseSchedule(steps=100)
    vocab = AtomVocabulary()
    cfg = EncoderConfig()
    for trial in range(100):
        rng = np.random.default_rng(trial)
        breakdown = bfn.discrete_time_loss(cx, store, cfg, vocab, schedule, rng, network=oracle)
        assert breakdown.total.item() == 0.0
    assert time.time() - started < 5.0
    report("2: oracle-zero loss", started)


def test_criterion_3_gradient_fidelity():
    """Finite differences through sca_forward + discrete_time_loss < 1e-4."""
    started = time.time()
    config = RunConfig.from_dict({"schedule": {"steps": 4}, "encoder": TOY_ENCODER})
    cx = build_toy_complex(0)  # 3 ligand atoms, 5 pocket atoms
    store = ParameterStore()
    init_encoder_params(store, config.encoder, config.vocabulary.size, _item_rng(0, 1))

    def loss_fn():
        rng = _item_rng(0, 2)
        return bfn.discrete_time_loss(
            cx, store, config.encoder, config.vocabulary, config.schedule, rng
        ).total

    result = finite_diff_check(store, loss_fn, h=1e-6, entries_per_tensor=4)
    assert result.max_rel_error < 1e-4, f"worst {result.max_rel_error} in {result.worst_param}"
    assert time.time() - started < 60.0
    report("3: gradient fidelity", started)


def test_criterion_4_e3_equivariance():
    """20 random rigid motions: coordinates < 1e-6 A, types < 1e-9."""
    started = time.time()
    config = RunConfig.from_dict({"encoder": TOY_ENCODER})
    cx = make_complex(seed=4, n_ligand=4)
    store = ParameterStore()
    init_encoder_params(store, config.encoder, config.vocabulary.size, _item_rng(1, 1))
    # wake the zero-initialized coordinate gates so positions genuinely move
    wake = _item_rng(1, 2)
    for name, tensor in store.items():
        if np.all(tensor.data == 0.0) and name.endswith("w1"):
            tensor.data = wake.normal(scale=0.1, size=tensor.data.shape)

    rng = _item_rng(1, 3)
    mu = rng.normal(scale=1.5, size=(4, 3)) + cx.pocket.positions().mean(axis=0)
    theta = np.abs(rng.normal(size=(4, 9))) + 0.1
    theta /= theta.sum(axis=1, keepdims=True)
    vocab = config.vocabulary
    base = sca_forward(mu, theta, cx.pocket, cx.surface, 0.4, store, config.encoder, vocab)
    moved_any = np.abs(base.positions.data - mu).max()
    assert moved_any > 1e-3, "equivariance test must exercise live coordinate updates"
    for trial in range(20):
        rot, shift = rigid_motion(_item_rng(2, trial))
        out = sca_forward(
            mu @ rot.T + shift,
            theta,
            cx.pocket.transformed(rot, shift),
            cx.surface.transformed(rot, shift),
            0.4,
            store,
            config.encoder,
            vocab,
        )
        x_dev = np.abs(out.positions.data - (base.positions.data @ rot.T + shift)).max()
        v_dev = np.abs(out.type_probs.data - base.type_probs.data).max()
        assert x_dev < 1e-6, f"trial {trial}: coordinate deviation {x_dev}"
        assert v_dev < 1e-9, f"trial {trial}: type deviation {v_dev}"
    assert time.time() - started < 60.0
    report("4: E(3) equivariance", started)


def test_criterion_5_sampler_convergence():
    """Oracle-stub sampling: mean per-atom error < 0.1 A, types 100%."""
    started = time.time()
    cx = make_complex(seed=5, n_ligand=4)
    com = cx.pocket.positions().mean(axis=0)
    x_star = cx.ligand.positions - com
    onehot = np.eye(9)[cx.ligand.types]
    final_mus = []

    def oracle(mu, theta, pocket, surface, t):
        if t == 1.0:
            final_mus.append(np.array(mu))
        return ScaOutput(Tensor(x_star.copy()), Tensor(onehot.copy()))

    store = ParameterStore()
    schedule = bfn.NoiseSchedule(sigma1=0.03, beta1=1.5, steps=100)
    vocab = AtomVocabulary()
    errors = []
    for run in range(100):
        rng = np.random.default_rng(run)
        ligand = bfn.sample_ligand(
            cx.pocket, cx.surface, 4, 100, store, EncoderConfig(), vocab, schedule, rng, network=oracle
        )
        assert np.array_equal(ligand.types, cx.ligand.types)
        errors.append(np.linalg.norm(final_mus[-1] - 0.9991 * x_star, axis=1).mean())
    assert np.mean(errors) < 0.1, f"mean flow error {np.mean(errors)}"
    assert time.time() - started < 120.0
    report("5: sampler convergence", started)


@pytest.mark.slow
def test_criterion_6_overfit_run(tmp_path):
    """2000-step overfit on one toy complex, then sampling recovers it."""
    started = time.time()
    rng = np.random.default_rng(11)
    lig_pos = np.array(
        [
            [0.0, 0.0, 0.0], [1.45, 0.2, -0.1], [2.2, 1.4, 0.3], [1.5, 2.6, 0.6],
            [0.1, 2.5, 0.4], [-0.6, 1.2, 0.1], [3.6, 1.5, 0.5], [-2.0, 1.1, -0.2],
        ]
    )
    types = np.array([0, 0, 0, 1, 0, 0, 2, 3])  # C5 N O F
    ligand = Ligand(lig_pos, types)
    vocab = AtomVocabulary()
    pocket = make_pocket(n_residues=6, atoms_per_residue=4, seed=11, radius=5.5,
                         center=lig_pos.mean(axis=0))
    assert ligand.size <= 10 and pocket.size <= 60

    write_pocket(pocket, tmp_path / "toy.pocket.json")
    write_ligand(ligand, vocab, tmp_path / "toy.ligand.txt")
    rc = main([
        "surface", "--pocket", str(tmp_path / "toy.pocket.json"),
        "--ligand", str(tmp_path / "toy.ligand.txt"),
        "--out", str(tmp_path / "toy.surface.json"), "--samples", "32",
    ])
    assert rc == 0

    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({
        "seed": 0,
        "schedule": {"steps": 100},
        "optimizer": {"batch_size": 1, "epochs": 1},
        "encoder": OVERFIT_ENCODER,
    }))
    rc = main([
        "train", "--data", str(tmp_path), "--config", str(config_path),
        "--out", str(tmp_path / "run"), "--steps", "2000", "--save-every", "0",
    ])
    assert rc == 0

    rows = (tmp_path / "run" / "loss.csv").read_text().splitlines()[1:]
    totals = np.array([float(r.split(",")[3]) for r in rows])
    assert totals.size == 2000
    smoothed = totals[0]
    for value in totals:
        smoothed = 0.98 * smoothed + 0.02 * value
    first_mean = totals[:100].mean()
    assert smoothed < 0.2 * first_mean, f"smoothed {smoothed:.2f} vs first-100 mean {first_mean:.2f}"

    rc = main([
        "sample", "--ckpt", str(tmp_path / "run" / "checkpoint.sclp"),
        "--pocket", str(tmp_path / "toy.pocket.json"),
        "--surface", str(tmp_path / "toy.surface.json"),
        "--n-atoms", "8", "--steps", "100", "--count", "10", "--seed", "123",
        "--out-dir", str(tmp_path / "samples"),
    ])
    assert rc == 0
    good_pos = good_typ = 0
    for idx in range(10):
        sample, _ = load_ligand(tmp_path / "samples" / f"sample_{idx:03d}.ligand.txt", vocab)
        cost = np.linalg.norm(sample.positions[:, None, :] - ligand.positions[None, :, :], axis=2)
        rows_idx, cols_idx = linear_sum_assignment(cost)
        good_pos += cost[rows_idx, cols_idx].mean() < 1.0
        good_typ += np.array_equal(np.sort(sample.types), np.sort(ligand.types))
    assert good_pos >= 8, f"only {good_pos}/10 samples within 1.0 A"
    assert good_typ >= 8, f"only {good_typ}/10 samples with the right type multiset"
    assert time.time() - started < 1800.0
    report("6: overfit + sampling", started)


def test_criterion_7_metric_oracles():
    """Metric values match brute-force recomputation on random instances."""
    started = time.time()
    rng = np.random.default_rng(70)
    vocab = AtomVocabulary()

    # worked example from the affinity contract
    summary = metrics.affinity_aggregate(
        metrics.EnergyTable(reference={"p": -6.0}, generated={"p": (-7.0, -5.0, -6.0)})
    )
    assert abs(summary.evina + 6.0) < 1e-9
    assert abs(summary.imp_pct - 100.0 / 3.0) < 1e-9
    assert abs(summary.mpbg_pct) < 1e-9

    cases = 0
    while cases < 1000:
        # jsd vs direct summation
        p_mass = rng.uniform(0, 1, size=12) + 1e-9
        q_mass = rng.uniform(0, 1, size=12) + 1e-9
        edges = np.linspace(0, 1, 13)
        p = metrics.Histogram(edges, p_mass)
        q = metrics.Histogram(edges, q_mass)
        m = 0.5 * (p.masses + q.masses)
        direct = 0.5 * np.sum(p.masses * np.log2(p.masses / m)) + 0.5 * np.sum(
            q.masses * np.log2(q.masses / m)
        )
        assert abs(metrics.jsd(p, q) - direct) < 1e-9
        cases += 1

        # pooled distance histogram vs brute force
        if cases % 10 == 0:
            pool = [make_ligand(5, seed=int(rng.integers(1 << 30)), spread=3.0) for _ in range(3)]
            hist = metrics.distance_histograms(pool, "all12", vocab)
            values = []
            for mol in pool:
                for i in range(mol.size):
                    for j in range(i + 1, mol.size):
                        d = np.linalg.norm(mol.positions[i] - mol.positions[j])
                        if d <= 12.0:
                            values.append(d)
            counts, _ = np.histogram(values, bins=120, range=(0, 12))
            assert np.abs(hist.masses - counts / counts.sum()).max() < 1e-9
            cases += 1

        # clash counts vs brute force
        if cases % 25 == 0:
            ligand = make_ligand(6, seed=int(rng.integers(1 << 30)), spread=2.5)
            pocket = make_pocket(2, seed=int(rng.integers(1 << 30)), radius=2.0,
                                 center=ligand.positions.mean(axis=0))
            expected = 0
            for i in range(ligand.size):
                ri = geometry.VDW_RADII[vocab.symbols[ligand.types[i]]]
                for atom in pocket.atoms:
                    rj = geometry.VDW_RADII.get(atom.atom.element, 1.70)
                    if np.linalg.norm(ligand.positions[i] - atom.atom.position) < ri + rj - 0.5:
                        expected += 1
            assert geometry.count_clashes(ligand, pocket, vocab) == expected
            cases += 1

        # affinity aggregation vs independent recomputation
        if cases % 50 == 0:
            reference = {f"p{k}": -float(rng.uniform(4, 9)) for k in range(4)}
            generated = {
                f"p{k}": tuple(-float(rng.uniform(2, 10)) for _ in range(int(rng.integers(1, 5))))
                for k in range(4)
            }
            got = metrics.affinity_aggregate(metrics.EnergyTable(reference, generated))
            pooled, improved, gains = [], 0, []
            for pid, ref in reference.items():
                valid = [e for e in generated[pid] if e <= 0]
                pooled.extend(valid)
                improved += sum(e < ref for e in valid)
                gains.append((np.mean(valid) - ref) / ref)
            assert abs(got.evina - np.mean(pooled)) < 1e-9
            assert abs(got.imp_pct - 100 * improved / len(pooled)) < 1e-9
            assert abs(got.mpbg_pct - 100 * np.mean(gains)) < 1e-9
            cases += 1
    assert time.time() - started < 60.0
    report("7: metric oracles", started)


def test_criterion_8_geometry_oracles():
    """knn/local-edge/residue-selection/kmeans checks on 200 instances each."""
    started = time.time()
    rng = np.random.default_rng(80)

    for case in range(200):
        points = rng.normal(scale=4.0, size=(rng.integers(6, 16), 3))
        k = int(rng.integers(1, min(5, points.shape[0] - 1) + 1))
        edges = {tuple(e) for e in geometry.knn_edges(points, k)}
        expected = set()
        for i in range(points.shape[0]):
            order = sorted(
                (np.linalg.norm(points[i] - points[j]), j)
                for j in range(points.shape[0])
                if j != i
            )
            expected.update((i, j) for _, j in order[:k])
        assert edges == expected

    for case in range(200):
        lig = rng.normal(scale=2.0, size=(4, 3))
        prot = rng.normal(scale=3.0, size=(6, 3))
        local = geometry.build_local_edges(lig, prot)
        got = {(s, d): b for s, d, b in zip(local.src, local.dst, local.bin_index)}
        pos = np.vstack([lig, prot])
        expected = {}
        for i in range(10):
            for j in range(10):
                if i == j or (i >= 4 and j >= 4):
                    continue
                d = np.linalg.norm(pos[i] - pos[j])
                if d > 5.0:
                    continue
                expected[(i, j)] = 0 if d <= 2.7 else (1 if d <= 3.4 else 2)
        assert got == expected

    for case in range(200):
        protein = make_pocket(n_residues=6, atoms_per_residue=3,
                              seed=int(rng.integers(1 << 30)), radius=8.0)
        ligand = make_ligand(3, seed=int(rng.integers(1 << 30)))
        expected_ids = {
            atom.residue_id
            for atom in protein.atoms
            if np.linalg.norm(ligand.positions - atom.atom.position, axis=1).min() <= 10.0
        }
        if not expected_ids:
            continue
        kept = geometry.select_pocket_residues(protein, ligand, cutoff=10.0)
        assert {a.residue_id for a in kept.atoms} == expected_ids

    for case in range(200):
        points = rng.normal(scale=5.0, size=(20, 3))
        log: list = []
        geometry.kmeans_pp(points, 4, seed=case, inertia_log=log)
        assert all(b <= a + 1e-9 for a, b in zip(log, log[1:]))
    assert time.time() - started < 60.0
    report("8: geometry oracles", started)


def test_criterion_9_command_determinism(tmp_path):
    """Each command repeated with the same seed is byte-identical."""
    started = time.time()
    cx = make_complex(seed=90, n_ligand=3, n_residues=3, n_vertices=8)
    vocab = AtomVocabulary()
    write_pocket(cx.pocket, tmp_path / "d.pocket.json")
    write_ligand(cx.ligand, vocab, tmp_path / "d.ligand.txt")
    write_surface(cx.surface, tmp_path / "d.surface.json")
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({
        "schedule": {"steps": 10},
        "optimizer": {"batch_size": 1, "epochs": 1},
        "encoder": TOY_ENCODER,
    }))

    surface_args = [
        "surface", "--pocket", str(tmp_path / "d.pocket.json"),
        "--ligand", str(tmp_path / "d.ligand.txt"), "--samples", "16",
    ]
    assert main(surface_args + ["--out", str(tmp_path / "s1.json")]) == 0
    assert main(surface_args + ["--out", str(tmp_path / "s2.json")]) == 0
    assert (tmp_path / "s1.json").read_bytes() == (tmp_path / "s2.json").read_bytes()

    train_args = [
        "train", "--data", str(tmp_path), "--config", str(config_path), "--steps", "4",
    ]
    assert main(train_args + ["--out", str(tmp_path / "t1")]) == 0
    assert main(train_args + ["--out", str(tmp_path / "t2")]) == 0
    assert (tmp_path / "t1" / "loss.csv").read_bytes() == (tmp_path / "t2" / "loss.csv").read_bytes()
    assert (
        (tmp_path / "t1" / "checkpoint.sclp").read_bytes()
        == (tmp_path / "t2" / "checkpoint.sclp").read_bytes()
    )

    sample_args = [
        "sample", "--ckpt", str(tmp_path / "t1" / "checkpoint.sclp"),
        "--pocket", str(tmp_path / "d.pocket.json"),
        "--surface", str(tmp_path / "d.surface.json"),
        "--count", "2", "--steps", "4", "--seed", "3",
    ]
    assert main(sample_args + ["--out-dir", str(tmp_path / "g1")]) == 0
    assert main(sample_args + ["--out-dir", str(tmp_path / "g2")]) == 0
    for name in ("sample_000.ligand.txt", "sample_001.ligand.txt", "manifest.json"):
        assert (tmp_path / "g1" / name).read_bytes() == (tmp_path / "g2" / name).read_bytes()

    eval_args = [
        "eval", "--gen-dir", str(tmp_path / "g1"), "--ref-dir", str(tmp_path / "g2"),
        "--pocket", str(tmp_path / "d.pocket.json"),
    ]
    assert main(eval_args + ["--out", str(tmp_path / "r1.json")]) == 0
    assert main(eval_args + ["--out", str(tmp_path / "r2.json")]) == 0
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
    assert time.time() - started < 300.0
    report("9: command determinism", started)
