# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""C implementations of the kernel primitives.

Signature-for-signature twin of ``reference.py``; see that module for the
semantics.  Inputs arrive as C-contiguous float64/int64 arrays (the ``fast``
wrapper normalizes), outputs are freshly allocated.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, erfc, sin, sqrt

cnp.import_array()

NAME = "compiled"


cdef inline double _sinc(double u) noexcept nogil:
    # limit convention matches np.sinc: value 1 exactly at u == 0
    if u == 0.0:
        return 1.0
    return sin(u) / u


def trig_tables(double[:, ::1] kvecs, double[:, ::1] coords):
    cdef Py_ssize_t n_k = kvecs.shape[0], n_at = coords.shape[0]
    cdef cnp.ndarray[double, ndim=2] cos_out = np.empty((n_k, n_at))
    cdef cnp.ndarray[double, ndim=2] sin_out = np.empty((n_k, n_at))
    cdef double[:, ::1] c = cos_out, s = sin_out
    cdef Py_ssize_t n, i
    cdef double phase
    with nogil:
        for n in range(n_k):
            for i in range(n_at):
                phase = (
                    kvecs[n, 0] * coords[i, 0]
                    + kvecs[n, 1] * coords[i, 1]
                    + kvecs[n, 2] * coords[i, 2]
                )
                c[n, i] = cos(phase)
                s[n, i] = sin(phase)
    return cos_out, sin_out


def axis_damping(double[:, ::1] coords, double delta):
    cdef Py_ssize_t n_at = coords.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n_at)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef double half = 0.5 * delta
    with nogil:
        for i in range(n_at):
            o[i] = (
                _sinc(half * coords[i, 0])
                * _sinc(half * coords[i, 1])
                * _sinc(half * coords[i, 2])
            )
    return out


def axis_damping_literal(double[:, ::1] kvecs, double[:, ::1] coords, double delta):
    cdef Py_ssize_t n_k = kvecs.shape[0], n_at = coords.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n_k, n_at))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t n, i
    cdef double half = 0.5 * delta
    with nogil:
        for n in range(n_k):
            for i in range(n_at):
                o[n, i] = (
                    _sinc(half * kvecs[n, 0] * coords[i, 0])
                    * _sinc(half * kvecs[n, 1] * coords[i, 1])
                    * _sinc(half * kvecs[n, 2] * coords[i, 2])
                )
    return out


def pair_edges(
    double[:, ::1] positions,
    double[:, ::1] cell_rows,
    double cutoff,
    long bx,
    long by,
    long bz,
):
    cdef Py_ssize_t n = positions.shape[0]
    cdef long sx, sy, sz
    cdef Py_ssize_t i, j, count, pos
    cdef double tx, ty, tz, dx, dy, dz, dist

    # pass 1: count edges so the output arrays are exact-sized
    count = 0
    with nogil:
        for sx in range(-bx, bx + 1):
            for sy in range(-by, by + 1):
                for sz in range(-bz, bz + 1):
                    tx = sx * cell_rows[0, 0] + sy * cell_rows[1, 0] + sz * cell_rows[2, 0]
                    ty = sx * cell_rows[0, 1] + sy * cell_rows[1, 1] + sz * cell_rows[2, 1]
                    tz = sx * cell_rows[0, 2] + sy * cell_rows[1, 2] + sz * cell_rows[2, 2]
                    for i in range(n):
                        for j in range(n):
                            dx = positions[i, 0] - positions[j, 0] - tx
                            dy = positions[i, 1] - positions[j, 1] - ty
                            dz = positions[i, 2] - positions[j, 2] - tz
                            dist = sqrt(dx * dx + dy * dy + dz * dz)
                            if dist > 0.0 and dist < cutoff:
                                count += 1

    cdef cnp.ndarray[long, ndim=1] out_i = np.empty(count, dtype=np.int64)
    cdef cnp.ndarray[long, ndim=1] out_j = np.empty(count, dtype=np.int64)
    cdef cnp.ndarray[long, ndim=2] out_s = np.empty((count, 3), dtype=np.int64)
    cdef cnp.ndarray[double, ndim=1] out_d = np.empty(count)
    cdef long[::1] vi = out_i, vj = out_j
    cdef long[:, ::1] vs = out_s
    cdef double[::1] vd = out_d

    pos = 0
    with nogil:
        for sx in range(-bx, bx + 1):
            for sy in range(-by, by + 1):
                for sz in range(-bz, bz + 1):
                    tx = sx * cell_rows[0, 0] + sy * cell_rows[1, 0] + sz * cell_rows[2, 0]
                    ty = sx * cell_rows[0, 1] + sy * cell_rows[1, 1] + sz * cell_rows[2, 1]
                    tz = sx * cell_rows[0, 2] + sy * cell_rows[1, 2] + sz * cell_rows[2, 2]
                    for i in range(n):
                        for j in range(n):
                            dx = positions[i, 0] - positions[j, 0] - tx
                            dy = positions[i, 1] - positions[j, 1] - ty
                            dz = positions[i, 2] - positions[j, 2] - tz
                            dist = sqrt(dx * dx + dy * dy + dz * dz)
                            if dist > 0.0 and dist < cutoff:
                                vi[pos] = i
                                vj[pos] = j
                                vs[pos, 0] = sx
                                vs[pos, 1] = sy
                                vs[pos, 2] = sz
                                vd[pos] = dist
                                pos += 1
    return out_i, out_j, out_s, out_d


def screened_pair_energy(
    double[:, ::1] positions,
    double[::1] charges,
    double[:, ::1] cell_rows,
    double alpha,
    double cutoff,
    long bx,
    long by,
    long bz,
):
    cdef Py_ssize_t n = positions.shape[0]
    cdef long sx, sy, sz
    cdef Py_ssize_t i, j
    cdef double tx, ty, tz, dx, dy, dz, dist
    cdef double total = 0.0
    with nogil:
        for sx in range(-bx, bx + 1):
            for sy in range(-by, by + 1):
                for sz in range(-bz, bz + 1):
                    tx = sx * cell_rows[0, 0] + sy * cell_rows[1, 0] + sz * cell_rows[2, 0]
                    ty = sx * cell_rows[0, 1] + sy * cell_rows[1, 1] + sz * cell_rows[2, 1]
                    tz = sx * cell_rows[0, 2] + sy * cell_rows[1, 2] + sz * cell_rows[2, 2]
                    for i in range(n):
                        for j in range(n):
                            dx = positions[i, 0] - positions[j, 0] - tx
                            dy = positions[i, 1] - positions[j, 1] - ty
                            dz = positions[i, 2] - positions[j, 2] - tz
                            dist = sqrt(dx * dx + dy * dy + dz * dz)
                            if dist > 0.0 and dist < cutoff:
                                total += 0.5 * charges[i] * charges[j] * erfc(alpha * dist) / dist
    return total


def lattice_pair_sums(
    double[:, ::1] positions,
    double[::1] charges,
    double[:, ::1] cell_rows,
    long[:, ::1] lambdas,
):
    cdef Py_ssize_t n = positions.shape[0], m = lambdas.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.zeros(m)
    cdef double[::1] o = out
    cdef Py_ssize_t k, i, j
    cdef double tx, ty, tz, dx, dy, dz, dist, acc
    with nogil:
        for k in range(m):
            tx = lambdas[k, 0] * cell_rows[0, 0] + lambdas[k, 1] * cell_rows[1, 0] + lambdas[k, 2] * cell_rows[2, 0]
            ty = lambdas[k, 0] * cell_rows[0, 1] + lambdas[k, 1] * cell_rows[1, 1] + lambdas[k, 2] * cell_rows[2, 1]
            tz = lambdas[k, 0] * cell_rows[0, 2] + lambdas[k, 1] * cell_rows[1, 2] + lambdas[k, 2] * cell_rows[2, 2]
            acc = 0.0
            for i in range(n):
                for j in range(n):
                    dx = positions[i, 0] - positions[j, 0] - tx
                    dy = positions[i, 1] - positions[j, 1] - ty
                    dz = positions[i, 2] - positions[j, 2] - tz
                    dist = sqrt(dx * dx + dy * dy + dz * dz)
                    if dist > 0.0:
                        acc += charges[i] * charges[j] / dist
            o[k] = 0.5 * acc
    return out
