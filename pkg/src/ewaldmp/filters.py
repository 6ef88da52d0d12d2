"""Learnable frequency filters.

Two banks exist, matched to how the frequency set was built:

* ``RadialFilterBank`` -- filters are a function of |k| only, expanded in a
  Gaussian radial basis and passed through a low-rank bottleneck
  ``phi = psi(|k|) @ W_down^T @ W_up^T``.  Rotation invariant by
  construction; used with radial-cutoff, voxel-grid and
  auxiliary-supercell frequency sets.
* ``LatticeFilterBank`` -- one weight vector per symmetry-unique lattice
  index, stored as the same low-rank factorization and read out through
  the index map, so phi(k) = phi(-k) holds bit for bit.  Used with
  periodic-index frequency sets only.

Weights may be plain arrays or autodiff ``Var`` leaves; evaluation goes
through nn_core ops either way and returns a ``Var``.
"""

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .errors import FilterModeError, ShapeError
from .geometry import AUXILIARY_SUPERCELL, PERIODIC_INDEX, RADIAL_CUTOFF, VOXEL_GRID

RADIAL_MODES = (RADIAL_CUTOFF, VOXEL_GRID, AUXILIARY_SUPERCELL)


@dataclass(frozen=True)
class RadialBasis:
    """Gaussian bumps with equally spaced centers on [0, c_max].

    The width follows the spacing: gamma = 1 / (2 * spacing^2), so each
    basis function decays to exp(-1/2) at its neighbor's center.
    """

    count: int
    c_max: float

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("radial basis needs at least two centers")
        if self.c_max <= 0:
            raise ValueError("c_max must be positive")

    @property
    def spacing(self):
        return self.c_max / (self.count - 1)

    @property
    def gamma(self):
        return 1.0 / (2.0 * self.spacing**2)

    @property
    def centers(self):
        return np.linspace(0.0, self.c_max, self.count)


def radial_basis_eval(basis, r):
    """Evaluate the basis at radii r: out[n, m] = exp(-gamma (r_n - mu_m)^2)."""
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    diff = r[:, None] - basis.centers[None, :]
    return np.exp(-basis.gamma * diff * diff)


class RadialFilterBank:
    """Low-rank radial filters: values depend on |k| only."""

    def __init__(self, basis, w_up, w_down):
        self.basis = basis
        self.w_up = w_up
        self.w_down = w_down
        if nn._as_value(w_down).shape[1] != basis.count:
            raise ShapeError("W_down columns must match the radial basis size")
        if nn._as_value(w_up).shape[1] != nn._as_value(w_down).shape[0]:
            raise ShapeError("W_up inner dimension must match W_down rows")

    def values_at_norms(self, norms):
        psi = radial_basis_eval(self.basis, norms)
        return nn.linear(nn.linear(nn.Var(psi), self.w_down), self.w_up)


class LatticeFilterBank:
    """One filter weight per symmetry-unique lattice index (shared +-k)."""

    def __init__(self, w_up, w_down, n_unique):
        self.w_up = w_up
        self.w_down = w_down
        self.n_unique = int(n_unique)
        if nn._as_value(w_down).shape[1] != self.n_unique:
            raise ShapeError("W_down columns must match the unique index count")
        if nn._as_value(w_up).shape[1] != nn._as_value(w_down).shape[0]:
            raise ShapeError("W_up inner dimension must match W_down rows")

    def unique_values(self):
        down = self.w_down if isinstance(self.w_down, nn.Var) else nn.Var(self.w_down)
        up = self.w_up if isinstance(self.w_up, nn.Var) else nn.Var(self.w_up)
        return nn.matmul(nn.transpose(down), nn.transpose(up))


def filter_values(bank, freqs):
    """Filter matrix phi of shape (N_k, F) for a frequency set.

    Bank and frequency-set modes must match; see the module docstring.
    """
    if isinstance(bank, RadialFilterBank):
        if freqs.mode not in RADIAL_MODES:
            raise FilterModeError(
                f"radial filter bank cannot serve {freqs.mode!r} frequencies"
            )
        return bank.values_at_norms(freqs.norms())
    if isinstance(bank, LatticeFilterBank):
        if freqs.mode != PERIODIC_INDEX:
            raise FilterModeError(
                f"lattice filter bank cannot serve {freqs.mode!r} frequencies"
            )
        if freqs.n_unique != bank.n_unique:
            raise ShapeError(
                f"bank holds {bank.n_unique} unique weights, set has {freqs.n_unique}"
            )
        return nn.gather_rows(bank.unique_values(), freqs.unique_slot)
    raise TypeError(f"unknown filter bank type {type(bank).__name__}")
