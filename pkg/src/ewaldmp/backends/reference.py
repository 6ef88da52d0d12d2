"""NumPy implementations of the kernel primitives.

These are the leaf reductions shared by the geometry, structure-factor and
oracle layers.  A compiled twin lives in ``_fastcore.pyx``; both expose the
same signatures and are interchangeable (see ``ewaldmp.backends``).  Matrix
products are deliberately excluded from this boundary: those already run in
compiled BLAS either way.
"""

import numpy as np
from scipy.special import erfc

NAME = "python"

# Pair blocks are processed in chunks of this many center atoms so the
# transient (chunk, N, 3) displacement arrays stay bounded.
_CHUNK = 256


def trig_tables(kvecs, coords):
    """Return cos(k.x) and sin(k.x) tables of shape (N_k, N_at)."""
    phase = kvecs @ coords.T
    return np.cos(phase), np.sin(phase)


def axis_damping(coords, delta):
    """Per-atom damping: product over axes of sinc(x_c * delta / 2)."""
    u = 0.5 * delta * coords
    return np.prod(np.sinc(u / np.pi), axis=1)


def axis_damping_literal(kvecs, coords, delta):
    """Per-(frequency, atom) damping: product over axes of sinc(k_c x_c delta / 2)."""
    u = 0.5 * delta * kvecs[:, None, :] * coords[None, :, :]
    return np.prod(np.sinc(u / np.pi), axis=2)


def _shift_grid(bounds):
    bx, by, bz = (int(b) for b in bounds)
    ax = np.arange(-bx, bx + 1, dtype=np.int64)
    ay = np.arange(-by, by + 1, dtype=np.int64)
    az = np.arange(-bz, bz + 1, dtype=np.int64)
    grid = np.stack(np.meshgrid(ax, ay, az, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


def pair_edges(positions, cell_rows, cutoff, bounds):
    """Enumerate ordered pair edges (i, j, shift) with 0 < distance < cutoff.

    ``cell_rows`` is the 3x3 matrix with lattice vectors as rows, or None for
    an aperiodic structure (then only the zero shift is scanned).  Returns
    (i, j, shifts, dists) in no particular order.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if cell_rows is None:
        shifts = np.zeros((1, 3), dtype=np.int64)
        translations = np.zeros((1, 3), dtype=np.float64)
    else:
        shifts = _shift_grid(bounds)
        translations = shifts.astype(np.float64) @ np.asarray(cell_rows, dtype=np.float64)

    out_i, out_j, out_s, out_d = [], [], [], []
    for s_row, t in zip(shifts, translations):
        for lo in range(0, n, _CHUNK):
            hi = min(lo + _CHUNK, n)
            disp = pos[lo:hi, None, :] - pos[None, :, :] - t[None, None, :]
            dist = np.sqrt(np.sum(disp * disp, axis=2))
            ii, jj = np.nonzero((dist > 0.0) & (dist < cutoff))
            if ii.size:
                out_i.append(ii + lo)
                out_j.append(jj)
                out_s.append(np.broadcast_to(s_row, (ii.size, 3)))
                out_d.append(dist[ii, jj])
    if not out_i:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros((0, 3), dtype=np.int64), np.zeros(0)
    return (
        np.concatenate(out_i).astype(np.int64),
        np.concatenate(out_j).astype(np.int64),
        np.concatenate(out_s).astype(np.int64),
        np.concatenate(out_d),
    )


def screened_pair_energy(positions, charges, cell_rows, alpha, cutoff, bounds):
    """Real-space Ewald part: 0.5 * sum over images of q_i q_j erfc(alpha r) / r."""
    pos = np.asarray(positions, dtype=np.float64)
    q = np.asarray(charges, dtype=np.float64)
    n = pos.shape[0]
    shifts = _shift_grid(bounds) if cell_rows is not None else np.zeros((1, 3), np.int64)
    cell = np.asarray(cell_rows, dtype=np.float64) if cell_rows is not None else np.zeros((3, 3))
    qq = q[:, None] * q[None, :]
    total = 0.0
    for s_row in shifts:
        t = s_row.astype(np.float64) @ cell
        for lo in range(0, n, _CHUNK):
            hi = min(lo + _CHUNK, n)
            disp = pos[lo:hi, None, :] - pos[None, :, :] - t[None, None, :]
            dist = np.sqrt(np.sum(disp * disp, axis=2))
            mask = (dist > 0.0) & (dist < cutoff)
            if mask.any():
                d = dist[mask]
                total += 0.5 * np.sum(qq[lo:hi, :][mask] * erfc(alpha * d) / d)
    return float(total)


def lattice_pair_sums(positions, charges, cell_rows, lambdas):
    """Per-image pair sums S(t) = 0.5 * sum_ij q_i q_j / |x_i - x_j - t|.

    ``lambdas`` is an (M, 3) integer array of image indices; the i == j term
    is excluded for the zero image.  Returns an (M,) array.
    """
    pos = np.asarray(positions, dtype=np.float64)
    q = np.asarray(charges, dtype=np.float64)
    lam = np.asarray(lambdas, dtype=np.int64)
    cell = np.asarray(cell_rows, dtype=np.float64)
    qq = q[:, None] * q[None, :]
    out = np.zeros(lam.shape[0])
    block = max(1, _CHUNK * _CHUNK // max(1, pos.shape[0] ** 2))
    for lo in range(0, lam.shape[0], block):
        t = lam[lo : lo + block].astype(np.float64) @ cell
        disp = pos[None, :, None, :] - pos[None, None, :, :] - t[:, None, None, :]
        dist = np.sqrt(np.sum(disp * disp, axis=3))
        with np.errstate(divide="ignore"):
            inv = np.where(dist > 0.0, 1.0 / np.where(dist > 0.0, dist, 1.0), 0.0)
        out[lo : lo + block] = 0.5 * np.sum(qq[None, :, :] * inv, axis=(1, 2))
    return out
