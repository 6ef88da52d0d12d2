"""Command-line entry point: structure file I/O, run configs, subcommands.

Subcommands: madelung, check, fit, bench, make-dataset.  Exit codes follow
the convention 0 = success, 1 = a check or computation failed, 2 = usage
error (bad flags, unknown config keys, malformed files).

Structure file format (text, one or more frames per file)::

    <atom count>
    key=value key=value ...          # e.g. Lattice="9 floats", Energy=-1.25
    <token> <x> <y> <z> [charge]     # one line per atom

The leading atom token is a species index when it parses as an integer, a
bare charge when it parses as a float, and the placeholder ``X`` when the
atom carries neither.  All floats serialize via repr so a parse/serialize
round trip is exact.
"""

import argparse
import concurrent.futures
import csv
import functools
import json
import shlex
import sys
import time

import numpy as np

from . import backends, model, oracle
from .errors import ConfigError, EwaldMPError, StructureParseError
from .geometry import (
    Cell,
    Structure,
    enumerate_index_frequencies,
    reciprocal_basis,
    voxel_grid,
)
from .nn_core import finite_difference_check
from .structure_factor import phase_table, structure_factor

# ---------------------------------------------------------------------------
# structure file I/O


def _format_float(x):
    return repr(float(x))


def _atom_token(species, charge):
    if species is not None:
        return str(int(species))
    if charge is not None:
        return _format_float(charge)
    return "X"


def serialize_structure(structure, energy=None, extra_meta=None):
    """Render one structure as a frame in the text format."""
    lines = [str(structure.n_atoms)]
    meta = []
    if structure.cell is not None:
        flat = " ".join(_format_float(v) for v in structure.cell.rows.reshape(-1))
        meta.append(f'Lattice="{flat}"')
    if energy is not None:
        meta.append(f"Energy={_format_float(energy)}")
    for key, value in (extra_meta or {}).items():
        meta.append(f"{key}={value}")
    lines.append(" ".join(meta))
    species = structure.species
    charges = structure.charges
    for a in range(structure.n_atoms):
        tok = _atom_token(
            None if species is None else species[a],
            None if charges is None else charges[a],
        )
        row = [tok] + [_format_float(v) for v in structure.positions[a]]
        # the charge column is only needed when the token already spent on
        # the species index
        if species is not None and charges is not None:
            row.append(_format_float(charges[a]))
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def serialize_structures(records):
    """records: iterable of (structure, energy-or-None) pairs."""
    return "".join(serialize_structure(s, energy=e) for s, e in records)


def _parse_meta(text, lineno):
    try:
        tokens = shlex.split(text, comments=False, posix=True)
    except ValueError as exc:
        raise StructureParseError(f"line {lineno}: {exc}") from None
    meta = {}
    for tok in tokens:
        if "=" not in tok:
            raise StructureParseError(
                f"line {lineno}: metadata token {tok!r} is not key=value"
            )
        key, value = tok.split("=", 1)
        if key in meta:
            raise StructureParseError(f"line {lineno}: duplicate metadata key {key!r}")
        meta[key] = value
    return meta


def _parse_atom_line(text, lineno):
    parts = text.split()
    if len(parts) not in (4, 5):
        raise StructureParseError(
            f"line {lineno}: expected 'token x y z [charge]', got {len(parts)} fields"
        )
    tok = parts[0]
    species = charge = None
    if tok != "X":
        try:
            value = int(tok)
        except ValueError:
            try:
                charge = float(tok)
            except ValueError:
                raise StructureParseError(
                    f"line {lineno}: atom token {tok!r} is neither species, "
                    "charge, nor 'X'"
                ) from None
        else:
            # species indexes are non-negative; a bare negative integer can
            # only mean a charge
            if value >= 0:
                species = value
            else:
                charge = float(value)
    try:
        xyz = [float(v) for v in parts[1:4]]
    except ValueError:
        raise StructureParseError(f"line {lineno}: bad coordinate triple") from None
    if len(parts) == 5:
        if species is None:
            raise StructureParseError(
                f"line {lineno}: a charge column needs a species token"
            )
        try:
            charge = float(parts[4])
        except ValueError:
            raise StructureParseError(f"line {lineno}: bad charge column") from None
    return species, charge, xyz


def parse_structures(text):
    """Parse every frame in ``text``; returns a list of (structure, energy,
    extra_meta) triples.  Errors carry 1-based line numbers."""
    lines = text.splitlines()
    frames = []
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        lineno = pos + 1
        try:
            count = int(lines[pos].strip())
        except ValueError:
            raise StructureParseError(
                f"line {lineno}: expected an atom count, got {lines[pos]!r}"
            ) from None
        if count < 0:
            raise StructureParseError(f"line {lineno}: negative atom count")
        if pos + 1 >= len(lines):
            raise StructureParseError(f"line {lineno + 1}: missing metadata line")
        meta = _parse_meta(lines[pos + 1], lineno + 1)
        if pos + 2 + count > len(lines):
            raise StructureParseError(
                f"line {len(lines)}: frame declares {count} atoms but the "
                "file ends early"
            )
        species, charges, positions = [], [], []
        any_species = any_charge = False
        for a in range(count):
            sp, ch, xyz = _parse_atom_line(lines[pos + 2 + a], lineno + 2 + a)
            species.append(sp)
            charges.append(ch)
            positions.append(xyz)
            any_species = any_species or sp is not None
            any_charge = any_charge or ch is not None
        if any_species and any(sp is None for sp in species):
            raise StructureParseError(
                f"line {lineno}: frame mixes species and species-free atoms"
            )
        if any_charge and any(ch is None for ch in charges):
            raise StructureParseError(
                f"line {lineno}: frame mixes charged and chargeless atoms"
            )

        cell = None
        if "Lattice" in meta:
            values = meta.pop("Lattice").split()
            if len(values) != 9:
                raise StructureParseError(
                    f"line {lineno + 1}: Lattice needs 9 floats, got {len(values)}"
                )
            cell = Cell(rows=np.array([float(v) for v in values]).reshape(3, 3))
        energy = None
        if "Energy" in meta:
            try:
                energy = float(meta.pop("Energy"))
            except ValueError:
                raise StructureParseError(
                    f"line {lineno + 1}: Energy is not a float"
                ) from None
        structure = Structure(
            positions=np.array(positions).reshape(count, 3),
            species=np.array(species, dtype=np.int64) if any_species else None,
            charges=np.array(charges, dtype=np.float64) if any_charge else None,
            cell=cell,
        )
        frames.append((structure, energy, meta))
        pos += 2 + count
    return frames


def read_structures(path):
    with open(path) as fh:
        return parse_structures(fh.read())


# ---------------------------------------------------------------------------
# run configuration

_TRAIN_KEYS = {
    "epochs": int,
    "lr": float,
    "weight_decay": float,
    "batch_size": int,
    "val_fraction": float,
}


def parse_run_config(text):
    """Flat key=value lines; # comments; unknown keys rejected."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in mapping:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        mapping[key] = value
    return mapping


def split_run_config(mapping):
    """Partition a flat mapping into (model_config, train_kwargs).

    Model keys are delegated to the model's own parser; training keys are
    the optimizer loop's knobs.  Anything else is unknown and rejected.
    """
    model_keys = {k: v for k, v in mapping.items() if k not in _TRAIN_KEYS}
    train_kwargs = {}
    for key, parser in _TRAIN_KEYS.items():
        if key in mapping:
            try:
                train_kwargs[key] = parser(mapping[key])
            except ValueError:
                raise ConfigError(f"bad value {mapping[key]!r} for {key}") from None
    config = model.config_from_mapping(model_keys)
    return config, train_kwargs


def echo_config(mapping, out):
    """Reproducibility header: every effective setting, one line each."""
    for key in sorted(mapping):
        print(f"# {key} = {mapping[key]}", file=out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_madelung(args, out):
    start = time.perf_counter()
    value = oracle.madelung_constant(args.crystal, method=args.method)
    elapsed = time.perf_counter() - start
    settings = {
        "crystal": args.crystal,
        "method": args.method,
        "backend": backends.active_name(),
    }
    echo_config(settings, out)
    print(f"madelung constant ({args.crystal}): {value:.10f}", file=out)
    print("crystal,method,constant,seconds", file=out)
    print(f"{args.crystal},{args.method},{value!r},{elapsed:.3f}", file=out)
    return 0


def _check_sf_equivalence(n, nk, seed):
    """Fast path vs pairwise double loop, periodic and aperiodic."""
    rng = np.random.default_rng(seed)
    cases, max_error = 0, 0.0

    side = max(6.0, float(n) ** (1.0 / 3.0) * 2.2)
    s = Structure(
        positions=rng.uniform(0, side, (n, 3)),
        species=rng.integers(0, 2, n),
        cell=Cell.cubic(side),
    )
    counts = (1, 1, 5) if nk >= 98 else (1, 1, 1)
    freqs = enumerate_index_frequencies(reciprocal_basis(s.cell), *counts)
    table = phase_table(s, freqs)
    h = rng.normal(size=(n, 4))
    phi = rng.normal(size=(freqs.n_unique, 4))[freqs.unique_slot]
    fast = model.long_range_messages(structure_factor(h, table), table, phi)
    slow = model.pairwise_long_range_messages(table, phi, h)
    max_error = max(max_error, float(np.max(np.abs(fast - slow))))
    cases += 1

    # the analytic statement that the messages are real
    phases = np.exp(1j * (freqs.kvecs @ s.positions.T))
    messages = phases.T @ (phi * (phases.conj() @ h.astype(complex)))
    max_error = max(max_error, float(np.max(np.abs(messages.imag))))
    cases += 1

    s_a = Structure(positions=rng.uniform(0, side, (n, 3)))
    freqs_a = voxel_grid(0.9, 0.3)
    table_a = phase_table(s_a, freqs_a)
    phi_a = rng.normal(size=(freqs_a.n_unique, 4))[freqs_a.unique_slot]
    fast_a = model.long_range_messages(
        structure_factor(h, table_a), table_a, phi_a
    )
    slow_a = model.pairwise_long_range_messages(table_a, phi_a, h)
    max_error = max(max_error, float(np.max(np.abs(fast_a - slow_a))))
    cases += 1

    return cases, max_error, max_error <= 1e-10


def _check_gradcheck(n, nk, seed):
    del nk
    cases, max_error = 0, 0.0
    for cfg in (
        model.ModelConfig(
            f_width=8, n_blocks=2, c_x=3.0, n_hidden=1, n_down=3, n_rbf_x=8,
            lattice_counts=(1, 1, 2), n_species=2, seed=seed,
        ),
        model.ModelConfig(
            f_width=8, n_blocks=2, c_x=3.0, n_hidden=1, n_down=3, n_rbf_x=8,
            n_rbf_k=6, k_cutoff=0.8, delta=0.4, n_species=2, seed=seed,
        ),
    ):
        m = model.EwaldModel(cfg)
        rng = np.random.default_rng(seed)
        if cfg.periodic_mode:
            s = Structure(
                positions=rng.uniform(0, 6.0, (n, 3)),
                species=rng.integers(0, 2, n),
                cell=Cell.cubic(6.0),
            )
        else:
            s = Structure(
                positions=rng.uniform(0, 6.0, (n, 3)),
                species=rng.integers(0, 2, n),
            )
        desc = m.precompute(s)
        worst, report = finite_difference_check(
            lambda: m.forward_descriptors(desc),
            m.store.params(),
            max_entries=4,
            rng=np.random.default_rng(seed + 1),
        )
        cases += len(report)
        max_error = max(max_error, worst)
    return cases, max_error, max_error <= 1e-5


def _check_identity(n, nk, seed):
    del n, nk
    rng = np.random.default_rng(seed)
    s = Structure(
        positions=rng.uniform(0, 10.0, (8, 3)),
        species=rng.integers(0, 2, 8),
        cell=Cell.cubic(10.0),
    )
    h = rng.normal(size=(8, 3))
    cases, max_error = 0, 0.0
    previous = None
    monotone = True
    for c_k in (4.0, 6.0, 8.0):
        report = oracle.gaussian_kernel_identity_check(s, h, sigma=0.85, k_cutoff=c_k)
        if previous is not None:
            monotone = monotone and report.max_abs_diff < previous
        previous = report.max_abs_diff
        cases += 1
    max_error = previous  # the finest sweep point
    return cases, max_error, monotone and max_error <= 1e-8


def _check_invariance(n, nk, seed):
    del nk
    rng = np.random.default_rng(seed)
    cases, max_error = 0, 0.0

    cfg = model.ModelConfig(
        f_width=8, n_blocks=2, c_x=3.0, n_hidden=1, n_down=3, n_rbf_x=8,
        lattice_counts=(1, 1, 2), n_species=2, seed=seed,
    )
    m = model.EwaldModel(cfg)
    s = Structure(
        positions=rng.uniform(0, 6.0, (n, 3)),
        species=rng.integers(0, 2, n),
        cell=Cell.cubic(6.0),
    )
    e = m.energy(s)
    shifted = s.replace(positions=s.positions + s.cell.rows[0] - 2 * s.cell.rows[2])
    max_error = max(max_error, abs(m.energy(shifted) - e) / 1e-9)
    cases += 1
    perm = rng.permutation(n)
    permuted = s.replace(positions=s.positions[perm], species=s.species[perm])
    max_error = max(max_error, abs(m.energy(permuted) - e) / 1e-9)
    cases += 1

    cfg_a = model.ModelConfig(
        f_width=8, n_blocks=2, c_x=3.0, n_hidden=1, n_down=3, n_rbf_x=8,
        n_rbf_k=6, k_cutoff=0.8, delta=0.4, n_species=2, seed=seed,
    )
    m_a = model.EwaldModel(cfg_a)
    s_a = Structure(
        positions=rng.uniform(0, 6.0, (n, 3)), species=rng.integers(0, 2, n)
    )
    e_a = m_a.energy(s_a)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    moved = s_a.replace(positions=s_a.positions @ q.T + rng.uniform(-4, 4, 3))
    max_error = max(max_error, abs(m_a.energy(moved) - e_a) / 1e-6)
    cases += 1

    # max_error is reported in units of each case's tolerance
    return cases, max_error, max_error <= 1.0


_CHECK_SUITES = {
    "sf-equivalence": _check_sf_equivalence,
    "gradcheck": _check_gradcheck,
    "identity": _check_identity,
    "invariance": _check_invariance,
}


def cmd_check(args, out):
    settings = {
        "suite": args.suite,
        "n": args.n,
        "nk": args.nk,
        "seed": args.seed,
        "backend": backends.active_name(),
    }
    echo_config(settings, out)
    cases, max_error, passed = _CHECK_SUITES[args.suite](args.n, args.nk, args.seed)
    print(
        json.dumps(
            {
                "suite": args.suite,
                "cases": cases,
                "max_error": max_error,
                "pass": bool(passed),
            }
        ),
        file=out,
    )
    return 0 if passed else 1


def cmd_fit(args, out):
    with open(args.config) as fh:
        mapping = parse_run_config(fh.read())
    config, train_kwargs = split_run_config(mapping)
    if args.mode is not None:
        config = model.config_from_mapping(
            {"use_ewald": "true" if args.mode == "ewald" else "false"}, base=config
        )
    frames = read_structures(args.dataset)
    dataset = []
    for structure, energy, _ in frames:
        if energy is None:
            raise ConfigError(f"{args.dataset}: every frame needs Energy= metadata")
        dataset.append((structure, energy))

    effective = dict(mapping)
    effective["use_ewald"] = "true" if config.use_ewald else "false"
    effective["dataset"] = args.dataset
    effective["backend"] = backends.active_name()
    echo_config(effective, out)

    result = model.train(
        config,
        dataset,
        checkpoint_path=args.checkpoint,
        metrics_path=args.metrics,
        log=functools.partial(print, file=out),
        **train_kwargs,
    )
    print(
        f"best val mae {result.best_val_mae:.6f} at epoch {result.best_epoch}",
        file=out,
    )
    return 0


def _bench_structure(n, seed):
    rng = np.random.default_rng(seed)
    side = float(np.cbrt(n)) * 2.2
    return Structure(
        positions=rng.uniform(0, side, (n, 3)),
        species=rng.integers(0, 2, n),
        cell=Cell.cubic(side),
    )


def _time_forward(m, desc, warmup, timed, repeats):
    for _ in range(warmup):
        m.forward_descriptors(desc)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(timed):
            m.forward_descriptors(desc)
        best = min(best, (time.perf_counter() - t0) / timed)
    return best


def cmd_bench(args, out):
    sizes = [int(tok) for tok in args.sizes.split(",") if tok]
    if not sizes or any(n <= 0 for n in sizes):
        raise ConfigError(f"bad --sizes list {args.sizes!r}")
    settings = {
        "sizes": ",".join(str(n) for n in sizes),
        "counts": args.counts,
        "f_width": args.f_width,
        "warmup": args.warmup,
        "timed": args.timed,
        "repeats": args.repeats,
        "seed": args.seed,
        "backend": backends.active_name(),
    }
    echo_config(settings, out)

    counts = tuple(int(c) for c in args.counts.split(","))
    cfg = model.ModelConfig(
        f_width=args.f_width,
        n_blocks=2,
        c_x=3.0,
        n_hidden=1,
        n_down=4,
        n_rbf_x=16,
        lattice_counts=counts,
        n_species=2,
        seed=args.seed,
    )
    m = model.EwaldModel(cfg)

    print("n_atoms,seconds_per_structure", file=out)
    times = []
    for n in sizes:
        desc = m.precompute(_bench_structure(n, args.seed))
        t = _time_forward(m, desc, args.warmup, args.timed, args.repeats)
        times.append(t)
        print(f"{n},{t:.6e}", file=out)
    if len(sizes) >= 2:
        exponent, _ = np.polyfit(np.log(sizes), np.log(times), 1)
        print(f"scaling exponent: {exponent:.3f}", file=out)

    if args.compare_backends:
        _bench_backends(out, args.seed)
    return 0


def _bench_backends(out, seed):
    """Kernel-level comparison of every available backend (min over 5 runs)."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 12.0, (256, 3))
    q = rng.choice([-1.0, 1.0], 256)
    cell = np.diag([12.0, 12.0, 12.0])
    kv = rng.normal(size=(128, 3))
    lam = np.stack(
        np.meshgrid(*[np.arange(-2, 3)] * 3, indexing="ij"), -1
    ).reshape(-1, 3)
    jobs = [
        ("trig_tables", (kv, pos)),
        ("screened_pair_energy", (pos, q, cell, 0.35, 10.0, (1, 1, 1))),
        ("pair_edges", (pos, cell, 6.0, (1, 1, 1))),
        ("lattice_pair_sums", (pos, q, cell, lam)),
    ]
    print("kernel,backend,seconds", file=out)
    for name, arguments in jobs:
        for backend_name in backends.available_backends():
            fn = getattr(backends.get_backend(backend_name), name)
            best = np.inf
            for _ in range(5):
                t0 = time.perf_counter()
                fn(*arguments)
                best = min(best, time.perf_counter() - t0)
            print(f"{name},{backend_name},{best:.6e}", file=out)


def cmd_make_dataset(args, out):
    lo, hi = (int(tok) for tok in args.n_atoms.split(","))
    settings = {
        "n_structures": args.n_structures,
        "n_atoms": f"{lo},{hi}",
        "box": args.box,
        "seed": args.seed,
        "min_separation": args.min_separation,
        "workers": args.workers,
        "out": args.out,
    }
    echo_config(settings, out)

    if args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(args.workers) as pool:
            records = oracle.make_synthetic_dataset(
                args.n_structures,
                (lo, hi),
                box=args.box,
                seed=args.seed,
                min_separation=args.min_separation,
                map_fn=pool.map,
            )
    else:
        records = oracle.make_synthetic_dataset(
            args.n_structures,
            (lo, hi),
            box=args.box,
            seed=args.seed,
            min_separation=args.min_separation,
        )

    with open(args.out, "w") as fh:
        fh.write(serialize_structures((r.structure, r.energy) for r in records))
    sidecar = args.out + ".csv"
    with open(sidecar, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index", "n_atoms", "net_charge", "energy", "e_long_range", "e_short_range"]
        )
        for index, r in enumerate(records):
            writer.writerow(
                [
                    index,
                    r.structure.n_atoms,
                    repr(float(np.sum(r.structure.charges))),
                    repr(r.energy),
                    repr(r.e_long_range),
                    repr(r.e_short_range),
                ]
            )
    print(f"wrote {len(records)} structures to {args.out} (+ {sidecar})", file=out)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ewaldmp",
        description="Fourier-space long-range message passing tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("madelung", help="Madelung constant of a reference crystal")
    p.add_argument("--crystal", required=True, choices=sorted(oracle.CRYSTALS))
    p.add_argument("--method", default="ewald", choices=["ewald", "direct"])
    p.set_defaults(run=cmd_madelung)

    p = sub.add_parser("check", help="run a property suite, report JSON")
    p.add_argument("--suite", required=True, choices=sorted(_CHECK_SUITES))
    p.add_argument("--n", type=int, default=16, help="atoms per test structure")
    p.add_argument("--nk", type=int, default=98, help="frequency budget")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_check)

    p = sub.add_parser("fit", help="train a model from a run config")
    p.add_argument("--config", required=True, help="flat key=value settings file")
    p.add_argument("--dataset", required=True, help="structure file with Energy=")
    p.add_argument("--mode", choices=["ewald", "baseline"], default=None)
    p.add_argument("--checkpoint", default=None, help="model output path")
    p.add_argument("--metrics", default=None, help="metrics CSV output path")
    p.set_defaults(run=cmd_fit)

    p = sub.add_parser("bench", help="forward-pass timing and scaling exponent")
    p.add_argument("--sizes", default="64,256,1024,4096", help="comma list of N")
    p.add_argument("--counts", default="2,2,2", help="fixed lattice counts")
    p.add_argument("--f-width", dest="f_width", type=int, default=32)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--timed", type=int, default=100)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--compare-backends",
        action="store_true",
        help="also time the raw kernels on every available backend",
    )
    p.set_defaults(run=cmd_bench)

    p = sub.add_parser("make-dataset", help="synthetic charged-cluster dataset")
    p.add_argument("--out", required=True, help="structure file to write")
    p.add_argument("--n-structures", dest="n_structures", type=int, default=2000)
    p.add_argument("--n-atoms", dest="n_atoms", default="16,32")
    p.add_argument("--box", type=float, default=12.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--min-separation", dest="min_separation", type=float, default=0.8
    )
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(run=cmd_make_dataset)

    return parser


def main(argv=None, out=None):
    out = out if out is not None else sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args, out)
    except (ConfigError, StructureParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EwaldMPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
