"""Compiled-backend wrapper: input normalization around ``_fastcore``.

The extension wants C-contiguous float64/int64 buffers and concrete cell
matrices; this shim converts, substitutes the aperiodic zero-shift scan
(cell None), and keeps return conventions identical to ``reference``.
"""

import numpy as np

from . import _fastcore

NAME = _fastcore.NAME


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def trig_tables(kvecs, coords):
    return _fastcore.trig_tables(_c64(kvecs), _c64(coords))


def axis_damping(coords, delta):
    return _fastcore.axis_damping(_c64(coords), float(delta))


def axis_damping_literal(kvecs, coords, delta):
    return _fastcore.axis_damping_literal(_c64(kvecs), _c64(coords), float(delta))


def _cell_and_bounds(cell_rows, bounds):
    if cell_rows is None:
        return np.zeros((3, 3)), (0, 0, 0)
    return _c64(cell_rows), tuple(int(b) for b in bounds)


def pair_edges(positions, cell_rows, cutoff, bounds):
    cell, (bx, by, bz) = _cell_and_bounds(cell_rows, bounds)
    return _fastcore.pair_edges(_c64(positions), cell, float(cutoff), bx, by, bz)


def screened_pair_energy(positions, charges, cell_rows, alpha, cutoff, bounds):
    cell, (bx, by, bz) = _cell_and_bounds(cell_rows, bounds)
    return _fastcore.screened_pair_energy(
        _c64(positions), _c64(charges), cell, float(alpha), float(cutoff), bx, by, bz
    )


def lattice_pair_sums(positions, charges, cell_rows, lambdas):
    lam = np.ascontiguousarray(lambdas, dtype=np.int64)
    return _fastcore.lattice_pair_sums(
        _c64(positions), _c64(charges), _c64(cell_rows), lam
    )
