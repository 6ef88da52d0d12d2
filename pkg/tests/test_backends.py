"""Compiled and reference kernels must be interchangeable."""

import os
import subprocess
import sys

import numpy as np
import pytest

from ewaldmp import backends
from ewaldmp.errors import ConfigError

compiled = pytest.importorskip(
    "ewaldmp.backends.fast", reason="compiled extension not built"
)
reference = backends.reference


def _canonical_edges(edges):
    i, j, shifts, dist = edges
    order = np.lexsort((shifts[:, 2], shifts[:, 1], shifts[:, 0], j, i))
    return i[order], j[order], shifts[order], dist[order]


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(1234)


class TestKernelEquivalence:
    def test_trig_tables(self, rng):
        kvecs = rng.normal(size=(40, 3)) * 3.0
        coords = rng.normal(size=(17, 3)) * 5.0
        ca, sa = reference.trig_tables(kvecs, coords)
        cb, sb = compiled.trig_tables(kvecs, coords)
        np.testing.assert_allclose(ca, cb, atol=1e-14)
        np.testing.assert_allclose(sa, sb, atol=1e-14)

    def test_axis_damping(self, rng):
        coords = rng.normal(size=(23, 3)) * 4.0
        coords[0] = 0.0  # hit the sinc limit branch
        a = reference.axis_damping(coords, 0.37)
        b = compiled.axis_damping(coords, 0.37)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_axis_damping_literal(self, rng):
        kvecs = rng.normal(size=(12, 3))
        kvecs[3] = 0.0
        coords = rng.normal(size=(9, 3)) * 4.0
        a = reference.axis_damping_literal(kvecs, coords, 0.37)
        b = compiled.axis_damping_literal(kvecs, coords, 0.37)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_pair_edges_periodic(self, rng):
        pos = rng.uniform(0, 6.0, (20, 3))
        cell = np.diag([6.0, 6.0, 6.0]) + rng.normal(size=(3, 3)) * 0.1
        a = _canonical_edges(reference.pair_edges(pos, cell, 3.5, (1, 1, 1)))
        b = _canonical_edges(compiled.pair_edges(pos, cell, 3.5, (1, 1, 1)))
        assert a[0].size == b[0].size > 0
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        np.testing.assert_array_equal(a[2], b[2])
        np.testing.assert_allclose(a[3], b[3], atol=1e-12)

    def test_pair_edges_aperiodic(self, rng):
        pos = rng.uniform(0, 6.0, (15, 3))
        a = _canonical_edges(reference.pair_edges(pos, None, 4.0, (0, 0, 0)))
        b = _canonical_edges(compiled.pair_edges(pos, None, 4.0, (0, 0, 0)))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        np.testing.assert_allclose(a[3], b[3], atol=1e-12)

    def test_pair_edges_empty(self):
        pos = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        for backend in (reference, compiled):
            i, j, shifts, dist = backend.pair_edges(pos, None, 1.0, (0, 0, 0))
            assert i.size == j.size == dist.size == 0
            assert shifts.shape == (0, 3)

    def test_screened_pair_energy(self, rng):
        pos = rng.uniform(0, 7.0, (24, 3))
        q = rng.choice([-1.0, 1.0], 24)
        cell = np.diag([7.0, 7.5, 8.0])
        a = reference.screened_pair_energy(pos, q, cell, 0.4, 9.0, (2, 2, 2))
        b = compiled.screened_pair_energy(pos, q, cell, 0.4, 9.0, (2, 2, 2))
        assert a == pytest.approx(b, rel=1e-12)

    def test_lattice_pair_sums(self, rng):
        pos = rng.uniform(0, 5.0, (12, 3))
        q = rng.choice([-1.0, 1.0], 12)
        cell = np.diag([5.0, 5.0, 5.0])
        lambdas = np.array(
            [[0, 0, 0], [1, 0, 0], [-1, 2, 0], [3, -3, 1], [0, 0, -2]], dtype=np.int64
        )
        a = reference.lattice_pair_sums(pos, q, cell, lambdas)
        b = compiled.lattice_pair_sums(pos, q, cell, lambdas)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_noncontiguous_inputs_accepted(self, rng):
        wide = rng.normal(size=(10, 6))
        coords = wide[:, ::2]  # strided view
        kvecs = rng.normal(size=(8, 3))
        ca, sa = reference.trig_tables(kvecs, coords)
        cb, sb = compiled.trig_tables(kvecs, coords)
        np.testing.assert_allclose(ca, cb, atol=1e-14)
        np.testing.assert_allclose(sa, sb, atol=1e-14)


class TestSelection:
    def test_get_backend(self):
        assert backends.get_backend("python").NAME == "python"
        assert backends.get_backend("compiled").NAME == "compiled"
        with pytest.raises(ConfigError):
            backends.get_backend("cuda")

    def test_both_listed(self):
        assert backends.available_backends() == ["python", "compiled"]

    def test_env_var_forces_python(self):
        code = (
            "from ewaldmp import backends; print(backends.active_name())"
        )
        env = dict(os.environ, EWALDMP_BACKEND="python")
        out = subprocess.run(
            [sys.executable, "-c", code], capture_output=True, text=True, env=env
        )
        assert out.stdout.strip() == "python"

    def test_env_var_rejects_junk(self):
        code = "import ewaldmp"
        env = dict(os.environ, EWALDMP_BACKEND="fortran")
        out = subprocess.run(
            [sys.executable, "-c", code], capture_output=True, text=True, env=env
        )
        assert out.returncode != 0
        assert "EWALDMP_BACKEND" in out.stderr


class TestOracleAgreementAcrossBackends:
    """End-to-end: the Madelung pipeline gives the same numbers either way."""

    def test_madelung_forced_python_matches_inprocess(self):
        from ewaldmp import oracle

        here = oracle.madelung_constant("nacl", method="ewald")
        code = (
            "from ewaldmp import oracle; "
            "print(repr(oracle.madelung_constant('nacl', method='ewald')))"
        )
        env = dict(os.environ, EWALDMP_BACKEND="python")
        out = subprocess.run(
            [sys.executable, "-c", code], capture_output=True, text=True, env=env
        )
        assert out.returncode == 0, out.stderr
        assert float(out.stdout.strip()) == pytest.approx(here, rel=1e-10)
