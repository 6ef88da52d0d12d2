"""Classical Coulomb oracles: direct Evjen sums, Ewald, synthetic data."""

import math

import numpy as np
import pytest

from ewaldmp import oracle
from ewaldmp.errors import (
    ConvergenceError,
    NonNeutralCellError,
    PackingError,
    ShapeError,
)
from ewaldmp.geometry import Cell, Structure

MADELUNG_NACL = 1.7475645946
MADELUNG_CSCL = 1.7626747731


def _two_charges(r, q0=1.0, q1=-1.0):
    pos = np.array([[0.0, 0.0, 0.0], [r, 0.0, 0.0]])
    return Structure(
        positions=pos,
        species=np.array([0, 1]),
        charges=np.array([q0, q1]),
    )


class TestAperiodicDirect:
    def test_pair_energy_value(self):
        assert oracle.direct_energy(_two_charges(2.0)) == pytest.approx(-0.5)

    def test_superposition_of_three_charges(self):
        pos = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        s = Structure(
            positions=pos,
            species=np.array([0, 1, 1]),
            charges=np.array([2.0, -1.0, -1.0]),
        )
        expected = -2.0 - 2.0 + 1.0 / math.sqrt(2.0)
        assert oracle.direct_energy(s) == pytest.approx(expected, rel=1e-12)

    def test_aperiodic_net_charge_is_allowed(self):
        assert oracle.direct_energy(_two_charges(1.0, 1.0, 1.0)) == pytest.approx(1.0)

    def test_charges_required(self):
        s = Structure(positions=np.zeros((1, 3)), species=np.array([0]))
        with pytest.raises(ShapeError):
            oracle.direct_energy(s)

    def test_trace_is_empty_for_aperiodic(self):
        _, trace = oracle.direct_energy_trace(_two_charges(1.5))
        assert trace == []


class TestEvjenDirect:
    def test_nacl_madelung(self):
        m = oracle.madelung_constant("nacl", method="direct", tol=1e-8)
        assert abs(m - MADELUNG_NACL) < 1e-6

    def test_cscl_madelung(self):
        m = oracle.madelung_constant("cscl", method="direct", tol=1e-8)
        assert abs(m - MADELUNG_CSCL) < 1e-6

    def test_scale_invariance(self):
        m = oracle.madelung_constant("nacl", method="direct", d=2.5, tol=1e-8)
        assert abs(m - MADELUNG_NACL) < 1e-6

    def test_trace_settles_monotonically_late(self):
        e, trace = oracle.direct_energy_trace(oracle.nacl_structure(), tol=1e-8)
        diffs = np.abs(np.diff(trace[2:]))
        assert np.all(diffs[1:] <= diffs[:-1] + 1e-12)
        assert e == trace[-1]

    def test_non_neutral_cell_rejected(self):
        s = oracle.nacl_structure()
        bad = s.replace(charges=s.charges + 0.01)
        with pytest.raises(NonNeutralCellError):
            oracle.direct_energy(bad)

    def test_shell_budget_exhaustion(self):
        with pytest.raises(ConvergenceError):
            oracle.direct_energy(oracle.nacl_structure(), tol=1e-8, max_shells=2)


class TestEwald:
    def test_nacl_madelung(self):
        m = oracle.madelung_constant("nacl", method="ewald")
        assert abs(m - MADELUNG_NACL) < 1e-4

    def test_cscl_madelung(self):
        m = oracle.madelung_constant("cscl", method="ewald")
        assert abs(m - MADELUNG_CSCL) < 1e-4

    def test_matches_direct_on_random_systems(self):
        rng = np.random.default_rng(11)
        for _ in range(3):
            cell = Cell.cubic(rng.uniform(5.5, 8.0))
            s = oracle.random_neutral_structure(
                rng, 8, cell, min_separation=1.0, dipole_free=True
            )
            e_direct = oracle.direct_energy(s, tol=1e-8)
            e_ewald = oracle.ewald_energy(s, alpha=0.35, r_cutoff=12.0, k_cutoff=5.0)
            assert abs(e_direct - e_ewald) / max(1.0, abs(e_direct)) < 1e-6

    def test_alpha_invariance(self):
        rng = np.random.default_rng(12)
        s = oracle.random_neutral_structure(
            rng, 8, Cell.cubic(6.0), min_separation=1.0, dipole_free=True
        )
        vals = [
            oracle.ewald_energy(s, alpha=a, r_cutoff=22.0, k_cutoff=6.5)
            for a in (0.2, 0.35, 0.6)
        ]
        spread = max(vals) - min(vals)
        assert spread / max(1.0, abs(vals[1])) < 1e-6

    def test_non_neutral_cell_rejected(self):
        s = oracle.nacl_structure()
        bad = s.replace(charges=np.abs(s.charges))
        with pytest.raises(NonNeutralCellError):
            oracle.ewald_energy(bad)

    def test_aperiodic_rejected(self):
        with pytest.raises(ShapeError):
            oracle.ewald_energy(_two_charges(1.0))

    def test_unknown_crystal_and_method(self):
        with pytest.raises(ValueError):
            oracle.madelung_constant("zincblende")
        with pytest.raises(ValueError):
            oracle.madelung_constant("nacl", method="magic")


class TestReferenceCrystals:
    def test_nacl_cell_is_neutral_and_nonpolar(self):
        s = oracle.nacl_structure()
        assert s.n_atoms == 8
        assert np.sum(s.charges) == 0.0
        dipole = (s.charges[:, None] * s.positions).sum(axis=0)
        np.testing.assert_allclose(dipole, 0.0, atol=1e-12)

    def test_cscl_cell_moments_vanish(self):
        s = oracle.cscl_structure()
        assert s.n_atoms == 16
        assert np.sum(s.charges) == 0.0
        dipole = (s.charges[:, None] * s.positions).sum(axis=0)
        np.testing.assert_allclose(dipole, 0.0, atol=1e-12)
        m2 = np.einsum("a,ai,aj->ij", s.charges, s.positions, s.positions)
        np.testing.assert_allclose(m2 - m2[0, 0] * np.eye(3), 0.0, atol=1e-12)

    def test_cscl_nearest_neighbor_distance(self):
        s = oracle.cscl_structure(d=1.25)
        cs = s.positions[s.charges > 0]
        cl = s.positions[s.charges < 0]
        dist = np.sqrt(np.sum((cs[:, None] - cl[None, :]) ** 2, axis=2))
        assert np.min(dist) == pytest.approx(1.25, rel=1e-12)


class TestGaussianIdentity:
    @staticmethod
    def _system(n=6, side=10.0, f=4, seed=3):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(0.0, side, (n, 3))
        s = Structure(
            positions=pos,
            species=np.zeros(n, dtype=np.int64),
            cell=Cell.cubic(side),
        )
        return s, rng.normal(size=(n, f))

    def test_paths_agree_at_adequate_cutoff(self):
        s, h = self._system()
        rep = oracle.gaussian_kernel_identity_check(s, h, sigma=0.85, k_cutoff=8.0)
        assert rep.max_abs_diff < 1e-8
        assert rep.fourier.shape == h.shape

    def test_error_decreases_monotonically_with_cutoff(self):
        s, h = self._system(seed=5)
        diffs = [
            oracle.gaussian_kernel_identity_check(s, h, 0.85, ck).max_abs_diff
            for ck in (4.0, 6.0, 8.0)
        ]
        assert diffs[0] > diffs[1] > diffs[2]

    def test_single_atom_self_image_sum(self):
        # one atom, unit embedding: both routes must produce the full lattice
        # sum of exp(-t^2 / (2 sigma^2)) including the t = 0 self term
        side, sigma = 6.0, 0.8
        s = Structure(
            positions=np.array([[1.0, 2.0, 3.0]]),
            species=np.array([0]),
            cell=Cell.cubic(side),
        )
        h = np.ones((1, 1))
        rep = oracle.gaussian_kernel_identity_check(s, h, sigma, k_cutoff=9.0)
        one_axis = sum(
            math.exp(-((side * m) ** 2) / (2 * sigma * sigma)) for m in range(-8, 9)
        )
        expected = one_axis**3
        assert rep.real[0, 0] == pytest.approx(expected, rel=1e-12)
        assert rep.fourier[0, 0] == pytest.approx(expected, rel=1e-8)

    def test_embedding_shape_validated(self):
        s, h = self._system()
        with pytest.raises(ShapeError):
            oracle.gaussian_kernel_identity_check(s, h[:-1], 0.85, 6.0)

    def test_periodic_required(self):
        s, h = self._system()
        with pytest.raises(ShapeError):
            oracle.gaussian_kernel_identity_check(s.replace(cell=None), h, 0.85, 6.0)


class TestRandomNeutralStructure:
    def test_charge_dipole_and_second_moment_vanish(self):
        rng = np.random.default_rng(0)
        s = oracle.random_neutral_structure(
            rng, 16, Cell.cubic(7.0), min_separation=1.0, dipole_free=True
        )
        assert s.n_atoms == 16
        assert np.sum(s.charges) == 0.0
        dipole = (s.charges[:, None] * s.positions).sum(axis=0)
        np.testing.assert_allclose(dipole, 0.0, atol=1e-10)
        m2 = np.einsum("a,ai,aj->ij", s.charges, s.positions, s.positions)
        np.testing.assert_allclose(m2, 0.0, atol=1e-9)

    def test_plain_neutral_mode(self):
        rng = np.random.default_rng(1)
        s = oracle.random_neutral_structure(rng, 10, Cell.cubic(8.0), 1.0)
        assert np.sum(s.charges) == 0.0
        assert sorted(set(s.charges)) == [-1.0, 1.0]

    def test_minimum_image_separation_enforced(self):
        rng = np.random.default_rng(2)
        s = oracle.random_neutral_structure(
            rng, 8, Cell.cubic(6.0), min_separation=1.3, dipole_free=True
        )
        pos, cell = s.positions, s.cell
        best = np.inf
        for sx in (-1, 0, 1):
            for sy in (-1, 0, 1):
                for sz in (-1, 0, 1):
                    t = np.array([sx, sy, sz], dtype=float) @ cell.rows
                    d = np.sqrt(
                        np.sum((pos[:, None] - pos[None, :] - t) ** 2, axis=2)
                    )
                    d[d == 0.0] = np.inf
                    best = min(best, float(np.min(d)))
        assert best >= 1.3

    def test_atom_count_validation(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            oracle.random_neutral_structure(rng, 12, Cell.cubic(6.0), dipole_free=True)
        with pytest.raises(ValueError):
            oracle.random_neutral_structure(rng, 7, Cell.cubic(6.0))

    def test_impossible_packing(self):
        rng = np.random.default_rng(4)
        with pytest.raises(PackingError):
            oracle.random_neutral_structure(
                rng, 8, Cell.cubic(2.0), min_separation=3.0, max_attempts=20
            )


class TestLennardJones:
    def test_zero_at_sigma(self):
        pos = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        assert oracle.lennard_jones_energy(pos) == pytest.approx(0.0, abs=1e-14)

    def test_minimum_depth(self):
        r = 2.0 ** (1.0 / 6.0)
        pos = np.array([[0.0, 0.0, 0.0], [r, 0.0, 0.0]])
        assert oracle.lennard_jones_energy(pos, epsilon=0.3) == pytest.approx(-0.3)


class TestSyntheticDataset:
    def test_deterministic_by_seed(self):
        a = oracle.make_synthetic_dataset(3, (8, 12), box=10.0, seed=42)
        b = oracle.make_synthetic_dataset(3, (8, 12), box=10.0, seed=42)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.structure.positions, rb.structure.positions)
            assert ra.energy == rb.energy

    def test_records_are_near_neutral_and_decomposable(self):
        records = oracle.make_synthetic_dataset(4, (8, 14), box=10.0, seed=5)
        for rec in records:
            s = rec.structure
            assert abs(np.sum(s.charges)) <= 2.0
            assert rec.energy == pytest.approx(
                rec.e_long_range + rec.e_short_range, rel=1e-14
            )
            recomputed = oracle.direct_energy(s)
            assert rec.e_long_range == pytest.approx(recomputed, rel=1e-12)
            np.testing.assert_array_equal(np.sign(s.charges), 1 - 2 * s.species)

    def test_net_charges_vary_across_records(self):
        records = oracle.make_synthetic_dataset(30, (8, 14), box=10.0, seed=5)
        nets = {int(np.sum(r.structure.charges)) for r in records}
        assert len(nets) > 1 and nets <= {-2, 0, 2}

    def test_separation_and_size_bounds(self):
        records = oracle.make_synthetic_dataset(
            3, (8, 12), box=10.0, seed=6, min_separation=0.9
        )
        for rec in records:
            pos = rec.structure.positions
            n = len(pos)
            assert 8 <= n <= 12 and n % 2 == 0
            d = np.sqrt(np.sum((pos[:, None] - pos[None, :]) ** 2, axis=2))
            d[d == 0.0] = np.inf
            assert np.min(d) >= 0.9

    def test_impossible_box(self):
        with pytest.raises(PackingError):
            oracle.make_synthetic_dataset(
                1, (32, 32), box=1.5, seed=0, min_separation=1.0, max_attempts=300
            )


def test_ev_conversion_constant():
    assert oracle.EV_PER_E2_ANGSTROM == 14.399645
