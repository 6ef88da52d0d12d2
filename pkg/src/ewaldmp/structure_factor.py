"""Phase tables and structure-factor embeddings.

The structure factor generalizes the classical charge-weighted sum to
feature vectors: s_k = sum_j h_j exp(-i k.x_j), stored as a (re, im) pair
of (N_k x F) matrices.  In periodic mode the phases use absolute Cartesian
positions and reciprocal-lattice frequencies; in aperiodic (voxel) mode
positions are expressed in a canonical frame and each phase is damped by a
separable sinc factor arising from the finite voxel width.
"""

from dataclasses import dataclass

import numpy as np

from .backends import active as _kernels
from .errors import FilterModeError, ShapeError
from .geometry import (
    AUXILIARY_SUPERCELL,
    RADIAL_CUTOFF,
    VOXEL_GRID,
    Cell,
    enumerate_radial_frequencies,
    frame_coordinates,
    reciprocal_basis,
    svd_frame,
)

DAMPING_ATOMWISE = "atomwise"
DAMPING_FREQUENCYWISE = "frequencywise"
DAMPING_VARIANTS = (DAMPING_ATOMWISE, DAMPING_FREQUENCYWISE)


@dataclass(frozen=True, eq=False)
class PhaseTable:
    """cos/sin tables of shape (N_k, N_at) with damping already folded in.

    ``damp`` records the damping factors themselves (all ones when the
    frequency set needs none), so cos = damp * cos(k.x) elementwise.
    """

    cos: np.ndarray
    sin: np.ndarray
    damp: np.ndarray

    @property
    def n_freq(self):
        return self.cos.shape[0]

    @property
    def n_atoms(self):
        return self.cos.shape[1]


def phase_table(structure, freqs, frame=None, damping=DAMPING_ATOMWISE):
    """Build the (cos, sin, damp) tables for one structure.

    Voxel-grid frequency sets require an aperiodic structure; its positions
    are expressed in ``frame`` (the canonical SVD frame when omitted) and
    damped.  All other modes use raw Cartesian positions and no damping.
    """
    if damping not in DAMPING_VARIANTS:
        raise ValueError(f"unknown damping variant {damping!r}")
    if freqs.mode == VOXEL_GRID:
        if structure.periodic:
            raise FilterModeError("voxel-grid frequencies apply to aperiodic structures")
        if frame is None:
            frame = svd_frame(structure.positions)
        coords = frame_coordinates(structure.positions, frame)
        cos, sin = _kernels.trig_tables(freqs.kvecs, coords)
        if damping == DAMPING_ATOMWISE:
            damp = np.broadcast_to(
                _kernels.axis_damping(coords, freqs.spacing), cos.shape
            ).copy()
        else:
            damp = _kernels.axis_damping_literal(freqs.kvecs, coords, freqs.spacing)
        return PhaseTable(cos=cos * damp, sin=sin * damp, damp=damp)
    cos, sin = _kernels.trig_tables(freqs.kvecs, structure.positions)
    return PhaseTable(cos=cos, sin=sin, damp=np.ones_like(cos))


@dataclass(frozen=True, eq=False)
class StructureFactor:
    """Real and imaginary parts of s_k per feature channel, (N_k x F)."""

    re: np.ndarray
    im: np.ndarray

    @property
    def n_freq(self):
        return self.re.shape[0]


def structure_factor(embeddings, table):
    """Gather per-atom features into frequency space: s_k = sum_j h_j e^{-i k.x_j}."""
    h = np.asarray(embeddings, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != table.n_atoms:
        raise ShapeError(f"embeddings {h.shape} do not match {table.n_atoms} atoms")
    return StructureFactor(re=table.cos @ h, im=-(table.sin @ h))


@dataclass(frozen=True, eq=False)
class AuxiliarySupercell:
    """Cross-check discretizer: the structure wrapped in a padded cubic cell."""

    factor: StructureFactor
    freqs: "object"
    table: PhaseTable
    cell: Cell


def auxiliary_supercell_factor(structure, embeddings, padding, k_cutoff):
    """Embed an aperiodic structure in a cubic cell of side extent + 2*padding
    and evaluate the periodic structure-factor path on it.

    The resulting frequency set is the wrapping cell's reciprocal lattice
    below ``k_cutoff`` (plus the origin's pairing conventions of the radial
    enumeration, i.e. origin excluded); positions are centered in the
    canonical frame so results are comparable with the voxel path.
    """
    if structure.periodic:
        raise FilterModeError("auxiliary supercell wrapping applies to aperiodic structures")
    frame = svd_frame(structure.positions)
    coords = frame_coordinates(structure.positions, frame)
    extent = float(np.max(coords.max(axis=0) - coords.min(axis=0))) if coords.size else 0.0
    side = extent + 2.0 * float(padding)
    cell = Cell.cubic(side)
    freqs = enumerate_radial_frequencies(
        reciprocal_basis(cell), k_cutoff, mode=AUXILIARY_SUPERCELL
    )
    cos, sin = _kernels.trig_tables(freqs.kvecs, coords)
    table = PhaseTable(cos=cos, sin=sin, damp=np.ones_like(cos))
    return AuxiliarySupercell(
        factor=structure_factor(embeddings, table),
        freqs=freqs,
        table=table,
        cell=cell,
    )
