"""Command-line entry point: surface, train, sample, eval, gradcheck.

Run configuration mirrors the JSON schema in ``RunConfig``; every default is
the reference setting (sigma1 0.03, beta1 1.5, 1000 loss steps, Adam lr 0.005
with betas 0.95/0.999, batch 32, EMA 0.999, hidden 128 with 16 heads,
tau 0.05, cluster divisor 8, 2/2/9 layers). Sampling defaults to 100 steps
for desk-scale runs. The environment variable SCULPT_SEED overrides --seed.

Exit codes: 0 ok, 1 internal/numeric failure, 2 input/validation failure.
Execution is single-threaded, so identical seeds give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bfn, geometry, metrics
from .encoder import EncoderConfig, init_encoder_params
from .errors import ParseError, SculptDrugError, ValidationError
from .geometry import RbfConfig, count_clashes
from .io import (
    AtomVocabulary,
    Checkpoint,
    Ligand,
    LoadedComplex,
    load_checkpoint,
    load_complex,
    load_ligand,
    load_pocket,
    save_checkpoint,
    write_ligand,
    write_surface,
)
from .numerics import (
    OptimizerConfig,
    ParameterStore,
    adam_step,
    clip_gradients,
    ema_update,
    finite_diff_check,
    reverse_gradients,
)

POCKET_SUFFIX = ".pocket.json"
SURFACE_SUFFIX = ".surface.json"
LIGAND_SUFFIX = ".ligand.txt"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    sampler_steps: int = 100
    schedule: bfn.NoiseSchedule = bfn.NoiseSchedule()
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 26
    encoder: EncoderConfig = EncoderConfig()
    vocabulary: AtomVocabulary = AtomVocabulary()

    def to_dict(self) -> dict:
        enc = self.encoder
        return {
            "seed": self.seed,
            "sampler_steps": self.sampler_steps,
            "schedule": {
                "sigma1": self.schedule.sigma1,
                "beta1": self.schedule.beta1,
                "steps": self.schedule.steps,
                "variant": self.schedule.variant,
            },
            "optimizer": {
                "learning_rate": self.optimizer.learning_rate,
                "beta1": self.optimizer.beta1,
                "beta2": self.optimizer.beta2,
                "epsilon": self.optimizer.epsilon,
                "ema_decay": self.optimizer.ema_decay,
                "batch_size": self.optimizer.batch_size,
                "grad_clip": self.optimizer.grad_clip,
                "epochs": self.epochs,
            },
            "encoder": {
                "hidden": enc.hidden,
                "heads": enc.heads,
                "bab_layers": enc.bab_layers,
                "global_layers": enc.global_layers,
                "local_layers": enc.local_layers,
                "tau": enc.tau,
                "cluster_divisor": enc.cluster_divisor,
                "knn_k": enc.knn_k,
                "time_dim": enc.time_dim,
                "rbf": {"centers": list(enc.rbf.centers), "gamma": enc.rbf.gamma},
            },
            "vocabulary": list(self.vocabulary.symbols),
        }

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        base = RunConfig().to_dict()
        for key, value in doc.items():
            if key not in base:
                raise ValidationError(f"unknown config key '{key}'")
            if isinstance(base[key], dict):
                for sub, sub_value in value.items():
                    if sub not in base[key]:
                        raise ValidationError(f"unknown config key '{key}.{sub}'")
                    base[key][sub] = sub_value
            else:
                base[key] = value
        sched = base["schedule"]
        opt = base["optimizer"]
        enc = base["encoder"]
        rbf = enc["rbf"]
        return RunConfig(
            seed=int(base["seed"]),
            sampler_steps=int(base["sampler_steps"]),
            schedule=bfn.NoiseSchedule(
                sigma1=float(sched["sigma1"]),
                beta1=float(sched["beta1"]),
                steps=int(sched["steps"]),
                variant=str(sched["variant"]),
            ),
            optimizer=OptimizerConfig(
                learning_rate=float(opt["learning_rate"]),
                beta1=float(opt["beta1"]),
                beta2=float(opt["beta2"]),
                epsilon=float(opt["epsilon"]),
                ema_decay=float(opt["ema_decay"]),
                batch_size=int(opt["batch_size"]),
                grad_clip=None if opt["grad_clip"] is None else float(opt["grad_clip"]),
            ),
            epochs=int(opt["epochs"]),
            encoder=EncoderConfig(
                hidden=int(enc["hidden"]),
                heads=int(enc["heads"]),
                bab_layers=int(enc["bab_layers"]),
                global_layers=int(enc["global_layers"]),
                local_layers=int(enc["local_layers"]),
                tau=float(enc["tau"]),
                cluster_divisor=int(enc["cluster_divisor"]),
                knn_k=int(enc["knn_k"]),
                time_dim=int(enc["time_dim"]),
                rbf=RbfConfig(centers=tuple(float(c) for c in rbf["centers"]), gamma=float(rbf["gamma"])),
            ),
            vocabulary=AtomVocabulary(tuple(base["vocabulary"])),
        )

    @staticmethod
    def load(path: str | Path | None) -> "RunConfig":
        if path is None:
            return RunConfig()
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: invalid JSON: {exc.msg}") from exc
        return RunConfig.from_dict(doc)


def _resolve_seed(args) -> int:
    env = os.environ.get("SCULPT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ValidationError("SCULPT_SEED must be an integer") from exc
    return args.seed


def _item_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


# -- surface ------------------------------------------------------------------

def cmd_surface(args) -> int:
    vocab = AtomVocabulary()
    protein = load_pocket(args.pocket)
    ligand, _ = load_ligand(args.ligand, vocab)
    pocket = geometry.select_pocket_residues(protein, ligand, cutoff=args.cutoff)
    raw = geometry.approximate_ses(
        pocket, ligand, probe_radius=args.probe, samples_per_atom=args.samples
    )
    surface, fallbacks = geometry.surface_features(raw, pocket)
    write_surface(surface, args.out)
    print(
        f"surface: {surface.size} vertices, {len(surface.mesh_edges)} mesh edges"
        + (f", {fallbacks} flat-fallback vertices" if fallbacks else "")
    )
    return 0


# -- training -----------------------------------------------------------------

def _scan_data_dir(data_dir: Path, vocab: AtomVocabulary) -> list[LoadedComplex]:
    stems = sorted(p.name[: -len(POCKET_SUFFIX)] for p in data_dir.glob(f"*{POCKET_SUFFIX}"))
    complexes = []
    for stem in stems:
        pocket = data_dir / f"{stem}{POCKET_SUFFIX}"
        surface = data_dir / f"{stem}{SURFACE_SUFFIX}"
        ligand = data_dir / f"{stem}{LIGAND_SUFFIX}"
        if not (surface.exists() and ligand.exists()):
            continue
        complexes.append(load_complex(pocket, surface, ligand, vocab))
    if not complexes:
        raise ValidationError(f"no (pocket, surface, ligand) triples in {data_dir}")
    return complexes


def _store_to_checkpoint(
    store: ParameterStore, config: RunConfig, step: int, size_counts: dict[int, int]
) -> Checkpoint:
    return Checkpoint(
        version=1,
        config=config.to_dict(),
        params=store.state_arrays(),
        ema={k: v.copy() for k, v in store.ema.items()},
        adam_m={k: v.copy() for k, v in store.adam_m.items()},
        adam_v={k: v.copy() for k, v in store.adam_v.items()},
        seed=config.seed,
        step=step,
        ligand_size_counts=size_counts,
    )


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    if os.environ.get("SCULPT_SEED") is not None or args.seed is not None:
        if args.seed is None:
            args.seed = config.seed
        config = RunConfig.from_dict({**config.to_dict(), "seed": _resolve_seed(args)})
    vocab = config.vocabulary
    complexes = _scan_data_dir(Path(args.data), vocab)
    size_counts: dict[int, int] = {}
    for cx in complexes:
        size_counts[cx.ligand.size] = size_counts.get(cx.ligand.size, 0) + 1

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.sclp"
    log_path = out_dir / "loss.csv"

    store = ParameterStore()
    init_encoder_params(store, config.encoder, vocab.size, _item_rng(config.seed, 0))
    start_step = 0
    if args.resume:
        previous = load_checkpoint(args.resume)
        store.load_state(previous.params, previous.ema, previous.adam_m, previous.adam_v)
        start_step = previous.step

    batch = min(config.optimizer.batch_size, len(complexes))
    total_steps = args.steps
    if total_steps is None:
        total_steps = config.epochs * math.ceil(len(complexes) / batch)

    log_exists = log_path.exists() and args.resume
    log_file = open(log_path, "a" if log_exists else "w", newline="", encoding="utf-8")
    writer = csv.writer(log_file)
    if not log_exists:
        writer.writerow(["step", "loss_x", "loss_v", "total"])

    try:
        for local_step in range(total_steps):
            step = start_step + local_step + 1
            sum_x = sum_v = 0.0
            batch_total = None
            for item in range(batch):
                cx = complexes[((step - 1) * batch + item) % len(complexes)]
                rng = _item_rng(config.seed, step, item)
                breakdown = bfn.discrete_time_loss(
                    cx, store, config.encoder, vocab, config.schedule, rng
                )
                sum_x += breakdown.loss_x.item()
                sum_v += breakdown.loss_v.item()
                batch_total = breakdown.total if batch_total is None else batch_total + breakdown.total
            mean_total = batch_total * (1.0 / batch)
            total_value = mean_total.item()
            if not math.isfinite(total_value):
                print(f"step {step}: non-finite loss; aborting with last checkpoint retained", file=sys.stderr)
                return 1
            reverse_gradients(mean_total, store)
            if config.optimizer.grad_clip is not None:
                clip_gradients(store, config.optimizer.grad_clip)
            adam_step(store, config.optimizer, step)
            ema_update(store, config.optimizer.ema_decay)
            writer.writerow([step, f"{sum_x / batch:.10g}", f"{sum_v / batch:.10g}", f"{total_value:.10g}"])
            if args.save_every and step % args.save_every == 0:
                save_checkpoint(_store_to_checkpoint(store, config, step, size_counts), ckpt_path)
    finally:
        log_file.close()

    save_checkpoint(_store_to_checkpoint(store, config, start_step + total_steps, size_counts), ckpt_path)
    print(f"trained {total_steps} steps -> {ckpt_path}")
    return 0


# -- sampling -------------------------------------------------------------------

def cmd_sample(args) -> int:
    if args.n_atoms is not None and args.n_atoms < 1:
        raise ValidationError("--n-atoms must be at least 1")
    if args.count < 1:
        raise ValidationError("--count must be at least 1")
    ckpt = load_checkpoint(args.ckpt)
    config = RunConfig.from_dict(ckpt.config)
    vocab = config.vocabulary
    seed = _resolve_seed(args)
    steps = args.steps or config.sampler_steps

    pocket = load_pocket(args.pocket)
    cx = load_complex(args.pocket, args.surface, None, vocab)
    surface = cx.surface

    store = ParameterStore()
    store.load_state(ckpt.params, ckpt.ema, ckpt.adam_m, ckpt.adam_v)
    sampler_store = store.ema_copy()  # sample with EMA weights

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    entries = []
    try:
        for index in range(args.count):
            rng = _item_rng(seed, index)
            if args.n_atoms is not None:
                n_atoms = args.n_atoms
            else:
                n_atoms = _draw_ligand_size(ckpt.ligand_size_counts, rng)
            ligand = bfn.sample_ligand(
                pocket, surface, n_atoms, steps, sampler_store, config.encoder, vocab, config.schedule, rng
            )
            path = out_dir / f"sample_{index:03d}{LIGAND_SUFFIX}"
            write_ligand(ligand, vocab, path)
            written.append(path)
            entries.append(
                {
                    "file": path.name,
                    "n_atoms": int(ligand.size),
                    "clashes": count_clashes(ligand, pocket, vocab),
                }
            )
        manifest = {"seed": seed, "steps": steps, "count": args.count, "ligands": entries}
        manifest_path = out_dir / "manifest.json"
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")
        written.append(manifest_path)
    except Exception:
        for path in written:  # partial outputs are removed on failure
            path.unlink(missing_ok=True)
        raise
    print(f"wrote {args.count} ligands to {out_dir}")
    return 0


def _draw_ligand_size(size_counts: dict[int, int], rng: np.random.Generator) -> int:
    if not size_counts:
        raise ValidationError("checkpoint carries no ligand-size histogram; pass --n-atoms")
    sizes = sorted(size_counts)
    weights = np.array([size_counts[s] for s in sizes], dtype=np.float64)
    probs = weights / weights.sum()
    return int(rng.choice(np.array(sizes), p=probs))


# -- evaluation -----------------------------------------------------------------

def _load_pool(directory: Path, vocab: AtomVocabulary) -> list[Ligand]:
    files = sorted(directory.glob(f"*{LIGAND_SUFFIX}")) or sorted(directory.glob("*.txt"))
    pool = []
    for path in files:
        ligand, _ = load_ligand(path, vocab)
        pool.append(ligand)
    return pool


def cmd_eval(args) -> int:
    vocab = AtomVocabulary()
    generated = _load_pool(Path(args.gen_dir), vocab)
    if not generated:
        raise ValidationError(f"no ligands in {args.gen_dir}")
    reference = _load_pool(Path(args.ref_dir), vocab) if args.ref_dir else []

    report: dict = {"generated": len(generated), "reference": len(reference)}
    if reference:

        def pool_jsd(mode: str, label: str):
            try:
                return metrics.jsd(
                    metrics.distance_histograms(generated, mode, vocab),
                    metrics.distance_histograms(reference, mode, vocab),
                )
            except ValidationError as exc:
                print(f"warning: {label}: {exc}; field is null", file=sys.stderr)
                return None

        report["jsd_cc_2A"] = pool_jsd("cc2", "jsd_cc_2A")
        report["jsd_all_12A"] = pool_jsd("all12", "jsd_all_12A")
        gen_profile = metrics.bond_length_profile(
            [(mol, metrics.infer_single_bonds(mol, vocab)) for mol in generated]
        )
        ref_profile = metrics.bond_length_profile(
            [(mol, metrics.infer_single_bonds(mol, vocab)) for mol in reference]
        )
        report["jsd_bl"] = metrics.aggregate_bond_jsd(gen_profile, ref_profile)
    else:
        print("warning: missing reference pool; JSD fields are null", file=sys.stderr)
        report["jsd_cc_2A"] = report["jsd_all_12A"] = report["jsd_bl"] = None

    if args.pocket:
        pocket = load_pocket(args.pocket)
        clashes = [count_clashes(mol, pocket, vocab) for mol in generated]
        report["mean_clashes"] = float(np.mean(clashes))
    else:
        report["mean_clashes"] = None

    if args.energies:
        table = metrics.load_energy_table(args.energies)
        summary = metrics.affinity_aggregate(table)
        report["evina"] = summary.evina
        report["imp_pct"] = summary.imp_pct
        report["mpbg_pct"] = summary.mpbg_pct
    else:
        report["evina"] = report["imp_pct"] = report["mpbg_pct"] = None

    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"report -> {args.out}")
    return 0


# -- gradient check ---------------------------------------------------------------

def _gradcheck_config() -> RunConfig:
    # reduced widths keep the finite-difference sweep under a minute
    return RunConfig.from_dict(
        {
            "schedule": {"steps": 4},
            "encoder": {
                "hidden": 16,
                "heads": 4,
                "bab_layers": 1,
                "global_layers": 2,
                "local_layers": 2,
                "knn_k": 3,
                "time_dim": 8,
                "rbf": {"centers": [0.0, 1.25, 2.5, 3.75, 5.0, 6.25, 7.5, 8.75], "gamma": 0.625},
            },
        }
    )


def build_toy_complex(seed: int = 0) -> LoadedComplex:
    """3-atom ligand inside a 5-atom single-residue pocket with a small surface."""
    from .io import Atom3D, PocketAtom, ProteinPocket, SurfaceGraph, SurfaceVertex

    rng = _item_rng(seed, 99)
    lig_pos = np.array([[0.0, 0.0, 0.0], [1.45, 0.1, -0.2], [0.4, 1.3, 0.5]])
    lig = Ligand(lig_pos, np.array([0, 1, 2]))
    shells = np.array(
        [[3.4, 0.4, 0.2], [-3.1, 0.6, -0.5], [0.3, 3.5, -0.4], [0.2, -3.2, 0.8], [0.5, 0.3, 3.6]]
    )
    atoms = tuple(
        PocketAtom(Atom3D("C" if k % 2 == 0 else "N", shells[k]), 1, "ALA") for k in range(5)
    )
    pocket = ProteinPocket(atoms)
    verts = []
    for k in range(6):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        verts.append(SurfaceVertex(direction * 2.4, rng.uniform(-0.5, 0.5, size=4)))
    edges = tuple((k, (k + 1) % 6) for k in range(5))
    surface = SurfaceGraph(tuple(verts), edges)
    return LoadedComplex(pocket, surface, lig, 0)


def cmd_gradcheck(args) -> int:
    config = RunConfig.load(args.config) if args.config else _gradcheck_config()
    seed = _resolve_seed(args)
    vocab = config.vocabulary
    cx = build_toy_complex(seed)
    store = ParameterStore()
    init_encoder_params(store, config.encoder, vocab.size, _item_rng(seed, 1))

    def loss_fn():
        rng = _item_rng(seed, 2)
        return bfn.discrete_time_loss(cx, store, config.encoder, vocab, config.schedule, rng).total

    report = finite_diff_check(store, loss_fn, h=1e-6, entries_per_tensor=args.entries)
    print(f"worst relative error {report.max_rel_error:.3e} in '{report.worst_param}'")
    passed = report.max_rel_error < 1e-4
    print("gradcheck PASS" if passed else "gradcheck FAIL")
    return 0 if passed else 1


# -- argument wiring ---------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sculptdrug", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_surface = sub.add_parser("surface", help="build a featurized pocket surface")
    p_surface.add_argument("--pocket", required=True)
    p_surface.add_argument("--ligand", required=True)
    p_surface.add_argument("--out", required=True)
    p_surface.add_argument("--probe", type=float, default=1.4)
    p_surface.add_argument("--samples", type=int, default=64)
    p_surface.add_argument("--cutoff", type=float, default=10.0)
    p_surface.add_argument("--seed", type=int, default=0)
    p_surface.set_defaults(func=cmd_surface)

    p_train = sub.add_parser("train", help="train on (pocket, surface, ligand) triples")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--resume", default=None)
    p_train.add_argument("--steps", type=int, default=None, help="override epoch-derived step count")
    p_train.add_argument("--save-every", type=int, default=500)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="generate ligands from a checkpoint")
    p_sample.add_argument("--ckpt", required=True)
    p_sample.add_argument("--pocket", required=True)
    p_sample.add_argument("--surface", required=True)
    p_sample.add_argument("--n-atoms", type=int, default=None)
    p_sample.add_argument("--steps", type=int, default=None)
    p_sample.add_argument("--count", type=int, default=1)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out-dir", required=True)
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("eval", help="structural and affinity metrics report")
    p_eval.add_argument("--gen-dir", required=True)
    p_eval.add_argument("--ref-dir", default=None)
    p_eval.add_argument("--energies", default=None)
    p_eval.add_argument("--pocket", default=None)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check through the loss")
    p_grad.add_argument("--config", default=None)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--entries", type=int, default=4, help="probed entries per tensor")
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SculptDrugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
