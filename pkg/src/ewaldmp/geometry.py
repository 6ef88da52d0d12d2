"""Supercell geometry: cells, reciprocal bases, frequency sets, frames,
neighbor lists.

Conventions used throughout the package:

* lattice vectors are the *rows* of a 3x3 matrix, positions are row vectors
  in Angstrom, so fractional coordinates satisfy ``x = f @ cell.rows``;
* the reciprocal basis satisfies ``w_i . v_j = 2 pi delta_ij`` (the 2 pi is
  in the basis, not in the phase factors);
* frequency sets are ordered lexicographically by integer index, and every
  frequency knows its mirror partner ``-k`` so conjugate symmetry can be
  exploited without searching.
"""

from dataclasses import dataclass, field

import numpy as np

from .backends import active as _kernels
from .errors import DegenerateCellError, ShapeError

VOLUME_EPS = 1e-9

PERIODIC_INDEX = "periodic-index"
RADIAL_CUTOFF = "radial-cutoff"
VOXEL_GRID = "voxel-grid"
AUXILIARY_SUPERCELL = "auxiliary-supercell"


@dataclass(frozen=True, eq=False)
class Cell:
    """Periodic supercell spanned by three lattice vectors (rows)."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.shape != (3, 3):
            raise ShapeError(f"cell matrix must be 3x3, got {rows.shape}")
        object.__setattr__(self, "rows", rows)
        vol = float(np.linalg.det(rows))
        if not np.isfinite(vol) or vol <= VOLUME_EPS:
            raise DegenerateCellError(
                f"cell volume {vol:.3e} is not positive (right-handed basis required)"
            )

    @classmethod
    def from_vectors(cls, v1, v2, v3):
        return cls(np.array([v1, v2, v3], dtype=np.float64))

    @classmethod
    def cubic(cls, a):
        return cls(np.eye(3) * float(a))

    @property
    def v1(self):
        return self.rows[0]

    @property
    def v2(self):
        return self.rows[1]

    @property
    def v3(self):
        return self.rows[2]

    @property
    def volume(self):
        return float(np.linalg.det(self.rows))

    def heights(self):
        """Distance between opposite cell faces along each lattice direction."""
        vol = self.volume
        cross = np.cross(self.rows[[1, 2, 0]], self.rows[[2, 0, 1]])
        return vol / np.linalg.norm(cross, axis=1)

    def fractional(self, positions):
        return np.asarray(positions, dtype=np.float64) @ np.linalg.inv(self.rows)


@dataclass(frozen=True, eq=False)
class ReciprocalBasis:
    """Dual basis rows w_i with w_i . v_j = 2 pi delta_ij."""

    rows: np.ndarray

    @property
    def w1(self):
        return self.rows[0]

    @property
    def w2(self):
        return self.rows[1]

    @property
    def w3(self):
        return self.rows[2]


def reciprocal_basis(cell):
    """Reciprocal basis of ``cell``; raises DegenerateCellError via Cell."""
    rows = 2.0 * np.pi * np.linalg.inv(cell.rows).T
    return ReciprocalBasis(rows=rows)


@dataclass(frozen=True, eq=False)
class Structure:
    """Atoms with positions, integer species, optional charges and cell."""

    positions: np.ndarray
    species: np.ndarray = None
    charges: np.ndarray = None
    cell: Cell = None

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ShapeError(f"positions must be (N, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ShapeError("positions contain non-finite values")
        n = pos.shape[0]
        species = self.species
        if species is None:
            species = np.zeros(n, dtype=np.int64)
        species = np.asarray(species, dtype=np.int64)
        if species.shape != (n,):
            raise ShapeError(f"species must be ({n},), got {species.shape}")
        charges = self.charges
        if charges is not None:
            charges = np.asarray(charges, dtype=np.float64)
            if charges.shape != (n,):
                raise ShapeError(f"charges must be ({n},), got {charges.shape}")
            if not np.all(np.isfinite(charges)):
                raise ShapeError("charges contain non-finite values")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "charges", charges)

    @property
    def n_atoms(self):
        return self.positions.shape[0]

    @property
    def periodic(self):
        return self.cell is not None

    def replace(self, **changes):
        kwargs = {
            "positions": self.positions,
            "species": self.species,
            "charges": self.charges,
            "cell": self.cell,
        }
        kwargs.update(changes)
        return Structure(**kwargs)


# ---------------------------------------------------------------------------
# frequency sets


@dataclass(frozen=True, eq=False)
class FrequencySet:
    """Discrete frequencies with mirror pairing and symmetry-unique slots.

    ``pair_index[n]`` is the position of ``-k_n`` (an involution; the origin,
    present only on voxel grids, is its own partner).  ``unique_slot[n]``
    maps each frequency to its {k, -k} class; classes are numbered by the
    lexicographic order of their representative index.
    """

    mode: str
    kvecs: np.ndarray
    indices: np.ndarray
    pair_index: np.ndarray
    unique_slot: np.ndarray
    n_unique: int
    origin_included: bool
    spacing: float = 0.0

    @property
    def n_freq(self):
        return self.kvecs.shape[0]

    def norms(self):
        return np.linalg.norm(self.kvecs, axis=1)


def _mirror_pairing(indices):
    lookup = {tuple(ix): pos for pos, ix in enumerate(indices)}
    n = len(indices)
    pair = np.empty(n, dtype=np.int64)
    canon = []
    for pos, ix in enumerate(indices):
        t = tuple(int(v) for v in ix)
        neg = tuple(-v for v in t)
        if neg not in lookup:
            raise ShapeError(f"frequency set is not mirror symmetric at index {t}")
        pair[pos] = lookup[neg]
        canon.append(max(t, neg))
    reps = sorted(set(canon))
    slot_of = {rep: s for s, rep in enumerate(reps)}
    slots = np.array([slot_of[c] for c in canon], dtype=np.int64)
    return pair, slots, len(reps)


def _build_set(mode, indices, kvecs, origin_included, spacing=0.0):
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    order = np.lexsort((indices[:, 2], indices[:, 1], indices[:, 0]))
    indices = indices[order]
    kvecs = np.asarray(kvecs, dtype=np.float64).reshape(-1, 3)[order]
    pair, slots, n_unique = _mirror_pairing(indices)
    return FrequencySet(
        mode=mode,
        kvecs=kvecs,
        indices=indices,
        pair_index=pair,
        unique_slot=slots,
        n_unique=n_unique,
        origin_included=origin_included,
        spacing=spacing,
    )


def _index_box(bounds):
    axes = [np.arange(-b, b + 1, dtype=np.int64) for b in bounds]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


def enumerate_index_frequencies(recip, n1, n2, n3):
    """All reciprocal-lattice points with index in the (n1, n2, n3) box,
    origin excluded."""
    if min(n1, n2, n3) < 0:
        raise ValueError("index bounds must be non-negative")
    idx = _index_box((n1, n2, n3))
    idx = idx[np.any(idx != 0, axis=1)]
    kvecs = idx.astype(np.float64) @ recip.rows
    return _build_set(PERIODIC_INDEX, idx, kvecs, origin_included=False)


def enumerate_radial_frequencies(recip, k_cutoff, mode=RADIAL_CUTOFF):
    """Reciprocal-lattice points with 0 < |k| strictly below ``k_cutoff``.

    The per-direction search bound follows from the reciprocal cell heights:
    |lambda_i| * h_i <= |k|, with h_i = 2 pi / |v_i|.
    """
    if k_cutoff <= 0:
        raise ValueError("k_cutoff must be positive")
    direct = 2.0 * np.pi * np.linalg.inv(recip.rows).T
    heights = 2.0 * np.pi / np.linalg.norm(direct, axis=1)
    bounds = np.floor(k_cutoff / heights).astype(int) + 1
    idx = _index_box(bounds)
    kvecs = idx.astype(np.float64) @ recip.rows
    norm2 = np.sum(kvecs * kvecs, axis=1)
    keep = (norm2 > 0.0) & (norm2 < k_cutoff * k_cutoff)
    return _build_set(mode, idx[keep], kvecs[keep], origin_included=False)


def voxel_grid(k_cutoff, delta):
    """Cubic voxel-center grid: k = lambda * delta with |k| <= k_cutoff,
    origin included."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if delta > k_cutoff * (1.0 + 1e-12):
        raise ValueError(f"voxel spacing {delta} exceeds k_cutoff {k_cutoff}")
    n = int(np.floor(k_cutoff / delta * (1.0 + 1e-12)))
    idx = _index_box((n, n, n))
    norm2 = np.sum(idx.astype(np.float64) ** 2, axis=1) * delta * delta
    keep = norm2 <= k_cutoff * k_cutoff * (1.0 + 1e-12)
    idx = idx[keep]
    kvecs = idx.astype(np.float64) * delta
    return _build_set(VOXEL_GRID, idx, kvecs, origin_included=True, spacing=delta)


# ---------------------------------------------------------------------------
# canonical frames


@dataclass(frozen=True, eq=False)
class Frame:
    """Orthonormal coordinate frame; columns of ``basis`` are the axes."""

    basis: np.ndarray
    origin: np.ndarray


def svd_frame(positions):
    """Canonical frame of an aperiodic structure.

    Origin is the centroid; axes are the right singular vectors of the
    centered position matrix, each flipped so its largest-magnitude
    component is positive.  For degenerate singular values the
    factorization output is kept as is, so frames of symmetric structures
    are deterministic but not rotation-equivariant.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    origin = pos.mean(axis=0)
    centered = pos - origin
    _, _, vt = np.linalg.svd(centered, full_matrices=True)
    basis = vt.T
    for c in range(3):
        col = basis[:, c]
        if col[np.argmax(np.abs(col))] < 0:
            basis[:, c] = -col
    return Frame(basis=basis, origin=origin)


def frame_coordinates(positions, frame):
    """Coordinates of ``positions`` expressed in ``frame``."""
    return (np.asarray(positions, dtype=np.float64) - frame.origin) @ frame.basis


# ---------------------------------------------------------------------------
# neighbor lists


@dataclass(frozen=True, eq=False)
class NeighborList:
    """Directed multigraph edges (i, j, shift) with their distances.

    Edge e connects center ``i[e]`` to the image of ``j[e]`` displaced by
    ``shift[e] @ cell.rows``; edges are sorted by (i, distance, j, shift).
    """

    i: np.ndarray
    j: np.ndarray
    shifts: np.ndarray
    dist: np.ndarray

    @property
    def n_edges(self):
        return self.i.shape[0]


def _shift_bounds(structure, cutoff):
    if not structure.periodic:
        return (0, 0, 0)
    heights = structure.cell.heights()
    frac = structure.cell.fractional(structure.positions)
    spread = frac.max(axis=0) - frac.min(axis=0) if structure.n_atoms else np.zeros(3)
    return tuple(int(np.floor(cutoff / h + s)) + 1 for h, s in zip(heights, spread))

def neighbor_list(structure, cutoff, max_neighbors=None):
    """All images within ``cutoff`` of each atom, optionally truncated to the
    ``max_neighbors`` nearest (ties broken by (distance, j, shift))."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    cell_rows = structure.cell.rows if structure.periodic else None
    bounds = _shift_bounds(structure, cutoff)
    i, j, shifts, dist = _kernels.pair_edges(
        structure.positions, cell_rows, float(cutoff), bounds
    )
    order = np.lexsort((shifts[:, 2], shifts[:, 1], shifts[:, 0], j, dist, i))
    i, j, shifts, dist = i[order], j[order], shifts[order], dist[order]
    if max_neighbors is not None and i.size:
        rank = np.arange(i.size) - np.searchsorted(i, i, side="left")
        keep = rank < int(max_neighbors)
        i, j, shifts, dist = i[keep], j[keep], shifts[keep], dist[keep]
    return NeighborList(i=i, j=j, shifts=shifts, dist=dist)
