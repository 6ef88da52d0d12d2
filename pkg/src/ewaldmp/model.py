"""Ewald message-passing model: short-range continuous-filter convolutions
combined with Fourier-space long-range messages, plus target preprocessing
and a desk-scale training loop.

Per interaction block the embedding update is

    h <- (h + f_sr(M_sr) + f_lr(M_lr)) / sqrt(3)

with the long-range term dropped (and 1/sqrt(2) scaling) in baseline mode.
The frequency-space volume prefactor is absorbed into the learned filters,
so no explicit volume division appears in the model path; fixed-kernel
cross-checks reintroduce it explicitly.
"""

import csv
import math
import time
from dataclasses import dataclass, fields, replace

import numpy as np
import scipy.linalg

from . import nn_core as nn
from .errors import (
    ConfigError,
    EmptyBatchError,
    FilterModeError,
    RankDeficientFitError,
    ShapeError,
    TrainingDivergedError,
)
from .filters import (
    LatticeFilterBank,
    RadialBasis,
    RadialFilterBank,
    radial_basis_eval,
)
from .geometry import (
    Cell,
    enumerate_index_frequencies,
    neighbor_list,
    reciprocal_basis,
    voxel_grid,
)
from .structure_factor import (
    DAMPING_ATOMWISE,
    DAMPING_VARIANTS,
    phase_table,
    structure_factor,
)

SQRT2 = math.sqrt(2.0)
SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters; exactly one frequency mode must be configured.

    Periodic structures use the lattice-index mode (``lattice_counts``),
    aperiodic ones the voxel mode (``k_cutoff`` and ``delta`` together).
    """

    f_width: int = 128
    n_blocks: int = 4
    c_x: float = 6.0
    n_max: int = 50
    n_hidden: int = 3
    n_down: int = 8
    n_rbf_x: int = 50
    n_rbf_k: int = 128
    lattice_counts: tuple = None
    k_cutoff: float = None
    delta: float = None
    damping: str = DAMPING_ATOMWISE
    use_ewald: bool = True
    n_species: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.f_width < 1 or self.n_blocks < 1:
            raise ConfigError("f_width and n_blocks must be >= 1")
        if self.n_hidden < 0 or self.n_down < 1 or self.n_species < 1:
            raise ConfigError("n_hidden >= 0 and n_down, n_species >= 1 required")
        if self.c_x <= 0.0:
            raise ConfigError("c_x must be positive")
        if self.damping not in DAMPING_VARIANTS:
            raise ConfigError(f"unknown damping variant {self.damping!r}")
        lattice = self.lattice_counts is not None
        voxel = self.k_cutoff is not None or self.delta is not None
        if lattice and voxel:
            raise ConfigError("configure either lattice_counts or k_cutoff/delta, not both")
        if not lattice and not voxel:
            raise ConfigError("one frequency mode must be configured")
        if voxel and (self.k_cutoff is None or self.delta is None):
            raise ConfigError("the voxel mode needs both k_cutoff and delta")
        if lattice:
            counts = tuple(int(v) for v in self.lattice_counts)
            if len(counts) != 3 or min(counts) < 0:
                raise ConfigError("lattice_counts must be three non-negative integers")
            object.__setattr__(self, "lattice_counts", counts)

    @property
    def periodic_mode(self):
        return self.lattice_counts is not None


_META_NONE = "none"


def config_to_mapping(config):
    """Flat key=value-ready string mapping (checkpoint meta, config echo)."""
    out = {}
    for f in fields(ModelConfig):
        v = getattr(config, f.name)
        if v is None:
            out[f.name] = _META_NONE
        elif isinstance(v, bool):
            out[f.name] = "true" if v else "false"
        elif isinstance(v, tuple):
            out[f.name] = ",".join(str(x) for x in v)
        else:
            out[f.name] = str(v)
    return out


def _parse_bool(text):
    if text not in ("true", "false"):
        raise ConfigError(f"expected true/false, got {text!r}")
    return text == "true"


_FIELD_PARSERS = {
    "f_width": int,
    "n_blocks": int,
    "c_x": float,
    "n_max": lambda t: None if t == _META_NONE else int(t),
    "n_hidden": int,
    "n_down": int,
    "n_rbf_x": int,
    "n_rbf_k": int,
    "lattice_counts": lambda t: None
    if t == _META_NONE
    else tuple(int(v) for v in t.split(",")),
    "k_cutoff": lambda t: None if t == _META_NONE else float(t),
    "delta": lambda t: None if t == _META_NONE else float(t),
    "damping": str,
    "use_ewald": _parse_bool,
    "n_species": int,
    "seed": int,
}


def config_from_mapping(mapping, base=None):
    """Inverse of config_to_mapping; unknown keys raise ConfigError."""
    kwargs = {}
    for key, text in mapping.items():
        if key not in _FIELD_PARSERS:
            raise ConfigError(f"unknown model setting {key!r}")
        try:
            kwargs[key] = _FIELD_PARSERS[key](text)
        except (ValueError, TypeError):
            raise ConfigError(f"bad value {text!r} for {key}") from None
    if base is not None:
        return replace(base, **kwargs)
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# message operations


def short_range_messages(h, neighbors, block, basis_values=None):
    """Continuous-filter convolution: M_i = sum_{j in N(i)} h_j * filt(d_ij).

    ``basis_values`` optionally carries precomputed distance-basis rows for
    the neighbor list (they are geometry-only, so callers may cache them).
    """
    n_atoms = nn._as_value(h).shape[0]
    if neighbors.n_edges == 0:
        return nn.Var(np.zeros_like(nn._as_value(h)))
    if basis_values is None:
        basis_values = radial_basis_eval(block.basis, neighbors.dist)
    filt = block.filter2(block.filter1(basis_values))
    hj = nn.gather_rows(h, neighbors.j)
    return nn.segment_sum(nn.mul(hj, filt), neighbors.i, n_atoms)


def long_range_messages(sf, table, phi):
    """Frequency-sum messages from a structure factor (plain-array path).

    M_i = sum_n cos(k_n.x_i) Re(s_n) phi_n - sin(k_n.x_i) Im(s_n) phi_n,
    with any damping factors already folded into the phase table on both
    the gather and the scatter side.  The result is real by the +-k mirror
    symmetry of the frequency sets and filters.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim == 1:
        phi = phi[:, None]
    if phi.shape[0] != sf.re.shape[0] or phi.shape[1] not in (1, sf.re.shape[1]):
        raise ShapeError(f"filter shape {phi.shape} does not fit factor {sf.re.shape}")
    return table.cos.T @ (phi * sf.re) - table.sin.T @ (phi * sf.im)


def long_range_messages_graph(h, table, phi):
    """Differentiable twin of long_range_messages, from embeddings directly."""
    re = nn.matmul(table.cos, h)
    im_neg = nn.matmul(table.sin, h)
    gathered = nn.add(
        nn.matmul(table.cos.T, nn.mul(phi, re)),
        nn.matmul(table.sin.T, nn.mul(phi, im_neg)),
    )
    return gathered


def pairwise_long_range_messages(table, phi, h):
    """O(N^2 N_k) double loop over atom pairs; the auditable slow path.

    Expands the |s|^2 factorization back into explicit pair terms
    cos(k.x_i)cos(k.x_j) + sin(k.x_i)sin(k.x_j) so equivalence checks do not
    share the structure-factor shortcut with the fast path.
    """
    h = np.asarray(h, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim == 1:
        phi = phi[:, None]
    n_atoms = table.cos.shape[1]
    out = np.zeros((n_atoms, h.shape[1]))
    for i in range(n_atoms):
        for j in range(n_atoms):
            weight = (
                table.cos[:, i] * table.cos[:, j]
                + table.sin[:, i] * table.sin[:, j]
            )
            out[i] += (weight[:, None] * phi * h[j][None, :]).sum(axis=0)
    return out


def combine_update(h, m_sr, m_lr, f_sr, f_lr):
    """h' = (h + f_sr(M_sr) + f_lr(M_lr)) / sqrt(3); without the long-range
    term the skip uses 1/sqrt(2)."""
    if m_lr is None:
        return nn.scale(nn.add(h, f_sr(m_sr)), 1.0 / SQRT2)
    return nn.scale(nn.add_n([h, f_sr(m_sr), f_lr(m_lr)]), 1.0 / SQRT3)


def readout(h, layer1, layer2):
    """Atom-wise two-layer energy head, summed over atoms."""
    return nn.sum_all(layer2(layer1(h)))


# ---------------------------------------------------------------------------
# blocks


class ShortRangeBlock:
    """Distance-filtered convolution block plus its update layer."""

    def __init__(self, store, name, config):
        f = config.f_width
        self.basis = RadialBasis(config.n_rbf_x, config.c_x)
        self.filter1 = nn.DenseLayer(store, f"{name}.filter1", config.n_rbf_x, f)
        self.filter2 = nn.DenseLayer(store, f"{name}.filter2", f, f, activation="identity")
        self.update = nn.DenseLayer(store, f"{name}.update", f, f)


class EwaldBlock:
    """Per-block frequency filters (shared bottleneck) and update stack."""

    def __init__(self, store, name, config):
        f = config.f_width
        self.w_up = store.create(f"{name}.w_up", (f, config.n_down))
        self.update = nn.DenseLayer(store, f"{name}.update", f, f)
        self.residuals = [
            nn.ResidualBlock(store, f"{name}.res{r}", f) for r in range(config.n_hidden)
        ]

    def apply_update(self, m):
        out = self.update(m)
        for block in self.residuals:
            out = block(out)
        return out


@dataclass(frozen=True, eq=False)
class Descriptors:
    """Geometry-only per-structure constants, safe to cache across steps."""

    species: np.ndarray
    neighbors: "object"
    edge_basis: np.ndarray
    table: "object"
    freqs: "object"
    k_basis_values: np.ndarray
    n_atoms: int


class EwaldModel:
    """The full model; owns a ParamStore seeded from the config."""

    def __init__(self, config):
        self.config = config
        store = nn.ParamStore(config.seed)
        self.store = store
        f = config.f_width
        self.embedding = store.create("embedding", (config.n_species, f), init="normal")
        self.sr_blocks = [
            ShortRangeBlock(store, f"block{l}.sr", config)
            for l in range(config.n_blocks)
        ]
        self.k_basis = None
        self._n_unique = None
        if config.use_ewald:
            if config.periodic_mode:
                probe = enumerate_index_frequencies(
                    reciprocal_basis(Cell.cubic(1.0)), *config.lattice_counts
                )
                self._n_unique = probe.n_unique
                n_in = self._n_unique
            else:
                self.k_basis = RadialBasis(config.n_rbf_k, config.k_cutoff)
                n_in = config.n_rbf_k
            self.w_down = store.create("lr.w_down", (config.n_down, n_in))
            self.lr_blocks = [
                EwaldBlock(store, f"block{l}.lr", config)
                for l in range(config.n_blocks)
            ]
        else:
            self.w_down = None
            self.lr_blocks = []
        self.readout1 = nn.DenseLayer(store, "readout.d1", f, max(f // 2, 1))
        self.readout2 = nn.DenseLayer(
            store, "readout.d2", max(f // 2, 1), 1, activation="identity"
        )

    # -- frequency-filter plumbing

    def filter_bank(self, block_index):
        """The block's filter bank over the shared bottleneck."""
        if not self.config.use_ewald:
            raise FilterModeError("baseline model has no frequency filters")
        w_up = self.lr_blocks[block_index].w_up
        if self.config.periodic_mode:
            return LatticeFilterBank(w_up, self.w_down, self._n_unique)
        return RadialFilterBank(self.k_basis, w_up, self.w_down)

    def _filter_var(self, desc, block_index):
        # same numbers as filters.filter_values(self.filter_bank(l), freqs),
        # but reusing the cached basis/slot tables in the descriptors
        bank = self.filter_bank(block_index)
        if self.config.periodic_mode:
            return nn.gather_rows(bank.unique_values(), desc.freqs.unique_slot)
        return nn.linear(nn.linear(desc.k_basis_values, bank.w_down), bank.w_up)

    # -- geometry preprocessing

    def precompute(self, structure):
        """All parameter-independent tensors for one structure."""
        config = self.config
        if structure.species is None:
            raise ShapeError("structures must carry species ids")
        if np.any(structure.species >= config.n_species) or np.any(structure.species < 0):
            raise ShapeError(
                f"species ids must lie in [0, {config.n_species}) for this model"
            )
        neighbors = neighbor_list(structure, config.c_x, config.n_max)
        edge_basis = (
            radial_basis_eval(self.sr_blocks[0].basis, neighbors.dist)
            if neighbors.n_edges
            else np.zeros((0, config.n_rbf_x))
        )
        table = freqs = None
        k_basis_values = None
        if config.use_ewald:
            if config.periodic_mode:
                if not structure.periodic:
                    raise FilterModeError(
                        "lattice-mode model requires periodic structures"
                    )
                freqs = enumerate_index_frequencies(
                    reciprocal_basis(structure.cell), *config.lattice_counts
                )
            else:
                if structure.periodic:
                    raise FilterModeError("voxel-mode model requires aperiodic structures")
                freqs = voxel_grid(config.k_cutoff, config.delta)
                k_basis_values = radial_basis_eval(self.k_basis, freqs.norms())
            table = phase_table(structure, freqs, damping=config.damping)
        return Descriptors(
            species=np.asarray(structure.species, dtype=np.int64),
            neighbors=neighbors,
            edge_basis=edge_basis,
            table=table,
            freqs=freqs,
            k_basis_values=k_basis_values,
            n_atoms=structure.n_atoms,
        )

    # -- forward

    def forward(self, structure):
        """Total energy as a Var (autodiff root)."""
        return self.forward_descriptors(self.precompute(structure))

    def forward_descriptors(self, desc):
        h = nn.gather_rows(self.embedding, desc.species)
        for l in range(self.config.n_blocks):
            sr = self.sr_blocks[l]
            m_sr = short_range_messages(h, desc.neighbors, sr, desc.edge_basis)
            if self.config.use_ewald:
                phi = self._filter_var(desc, l)
                m_lr = long_range_messages_graph(h, desc.table, phi)
                h = combine_update(
                    h, m_sr, m_lr, sr.update, self.lr_blocks[l].apply_update
                )
            else:
                h = combine_update(h, m_sr, None, sr.update, None)
        return readout(h, self.readout1, self.readout2)

    def energy(self, structure):
        return float(self.forward(structure).value)

    # -- persistence

    def save(self, path):
        nn.save_params(path, self.store.get_values(), meta=config_to_mapping(self.config))

    @classmethod
    def load(cls, path):
        values, meta = nn.load_params(path)
        model = cls(config_from_mapping(meta))
        model.store.set_values(values)
        return model


# ---------------------------------------------------------------------------
# target preprocessing


@dataclass(frozen=True)
class ElementOffsetFit:
    """Least-squares per-species energy offsets: E ~ sum_Z C_Z N_Z + C_0."""

    coefficients: np.ndarray
    bias: float
    residuals: np.ndarray

    def _counts(self, structures):
        counts = np.zeros((len(structures), len(self.coefficients)))
        for r, s in enumerate(structures):
            for z in s.species:
                counts[r, int(z)] += 1.0
        return counts

    def apply(self, structures, energies):
        energies = np.asarray(energies, dtype=np.float64)
        return energies - self._counts(structures) @ self.coefficients - self.bias

    def invert(self, structures, energies):
        energies = np.asarray(energies, dtype=np.float64)
        return energies + self._counts(structures) @ self.coefficients + self.bias


def fit_element_offsets(structures, energies, n_species=None):
    """Fit per-species offsets and a bias by least squares.

    Rank deficiency of the design matrix (species counts plus a ones
    column) raises RankDeficientFitError naming the redundant columns.
    """
    if len(structures) == 0:
        raise EmptyBatchError("offset fit over an empty dataset")
    if n_species is None:
        n_species = 1 + max(int(np.max(s.species)) for s in structures)
    energies = np.asarray(energies, dtype=np.float64)
    design = np.zeros((len(structures), n_species + 1))
    design[:, n_species] = 1.0
    for r, s in enumerate(structures):
        for z in s.species:
            design[r, int(z)] += 1.0
    _, r_diag, pivots = scipy.linalg.qr(design, mode="economic", pivoting=True)[0:3]
    diag = np.abs(np.diag(r_diag))
    tol = max(design.shape) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < n_species + 1:
        redundant = sorted(int(p) for p in pivots[rank:])
        names = ["bias" if p == n_species else f"species {p}" for p in redundant]
        raise RankDeficientFitError(
            f"offset design matrix is rank deficient; redundant columns: {', '.join(names)}"
        )
    solution, _, _, _ = np.linalg.lstsq(design, energies, rcond=None)
    residuals = energies - design @ solution
    return ElementOffsetFit(
        coefficients=solution[:n_species], bias=float(solution[n_species]), residuals=residuals
    )


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True, eq=False)
class TrainResult:
    model: EwaldModel
    offsets: ElementOffsetFit
    best_val_mae: float
    best_epoch: int
    history: list


def _as_pairs(dataset):
    pairs = []
    for item in dataset:
        if hasattr(item, "structure"):
            pairs.append((item.structure, float(item.energy)))
        else:
            s, e = item
            pairs.append((s, float(e)))
    return pairs


def train(
    config,
    dataset,
    epochs=30,
    lr=1e-3,
    weight_decay=0.01,
    batch_size=8,
    val_fraction=0.1,
    checkpoint_path=None,
    metrics_path=None,
    log=None,
):
    """Energy-MAE training with Adam; returns the best-validation model.

    The dataset is split deterministically from the config seed.  Element
    offsets are fitted on the training split and shared with validation;
    reported MAEs live in offset-corrected target space (identical to raw
    MAE, as the correction is a per-structure constant).  A non-finite loss
    aborts with TrainingDivergedError.
    """
    pairs = _as_pairs(dataset)
    if len(pairs) < 2:
        raise EmptyBatchError("training needs at least two labeled structures")
    n_val = max(1, int(round(len(pairs) * val_fraction)))
    perm = nn._named_rng(config.seed, "split").permutation(len(pairs))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    structures = [p[0] for p in pairs]
    raw = np.array([p[1] for p in pairs])
    offsets = fit_element_offsets(
        [structures[i] for i in train_idx], raw[train_idx], n_species=config.n_species
    )
    targets = offsets.apply(structures, raw)

    model = EwaldModel(config)
    descs = [model.precompute(s) for s in structures]
    optimizer = nn.Adam(model.store.params(), lr=lr, weight_decay=weight_decay)

    history = []
    best_val, best_epoch, best_values = math.inf, -1, None
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = nn._named_rng(config.seed, f"epoch{epoch}").permutation(train_idx)
        abs_sum, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            batch = order[lo : lo + batch_size]
            model.store.zero_grad()
            preds = nn.stack_scalars(
                [model.forward_descriptors(descs[i]) for i in batch]
            )
            loss = nn.mae_loss(preds, targets[batch])
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch start {lo}"
                )
            nn.backward(loss)
            optimizer.step()
            abs_sum += float(loss.value) * len(batch)
            count += len(batch)
        train_mae = abs_sum / max(count, 1)
        val_err = [
            abs(float(model.forward_descriptors(descs[i]).value) - targets[i])
            for i in val_idx
        ]
        val_mae = float(np.mean(val_err))
        wall = time.perf_counter() - t0
        history.append((epoch, "train", train_mae, wall))
        history.append((epoch, "val", val_mae, wall))
        if log is not None:
            log(f"epoch {epoch:3d}  train {train_mae:.6f}  val {val_mae:.6f}  {wall:7.1f}s")
        if val_mae < best_val:
            best_val, best_epoch = val_mae, epoch
            best_values = model.store.get_values()
    if best_values is not None:
        model.store.set_values(best_values)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "split", "mae", "wall_time"])
            for row in history:
                writer.writerow([row[0], row[1], f"{row[2]:.10g}", f"{row[3]:.3f}"])
    return TrainResult(
        model=model,
        offsets=offsets,
        best_val_mae=best_val,
        best_epoch=best_epoch,
        history=history,
    )
