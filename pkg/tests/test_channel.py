"""Tests for the candidate grid, field-response channels and CSI perturbations."""
import numpy as np
import pytest

from ma_power.channel import (
    CandidateGrid,
    ChannelRealization,
    PathSet,
    build_grid,
    coupling_matrix,
    effective_channel,
    field_response_matrix,
    field_response_vector,
    free_space_pathloss,
    perturb_pcv,
    realize_channel,
    sample_paths,
)
from ma_power.errors import InvalidInputError
from ma_power.models import PerturbMode


@pytest.fixture
def paths():
    rng = np.random.default_rng(7)
    return sample_paths(2, 5, [20.0, 40.0], 1.0, 2.2, rng)


class TestGrid:
    def test_full_scale_counts(self):
        assert build_grid(2.0, 10.0, 60.0).n_positions == 169
        assert build_grid(2.0, 2.0, 60.0).n_positions == 3721

    def test_corner_lattice(self):
        grid = build_grid(1.0, 60.0, 60.0)
        assert grid.n_positions == 4
        np.testing.assert_allclose(grid.positions, [[0, 0], [60, 0], [0, 60], [60, 60]])

    def test_row_major_from_origin(self):
        grid = build_grid(0.5, 10.0, 60.0)
        np.testing.assert_allclose(grid.positions[0], [0.0, 0.0])
        np.testing.assert_allclose(grid.positions[1], [10.0, 0.0])
        np.testing.assert_allclose(grid.positions[4], [0.0, 10.0])

    def test_nearest_neighbour_distance_is_step(self):
        grid = build_grid(0.5, 10.0, 60.0)
        d = grid.distance_matrix.copy()
        np.fill_diagonal(d, np.inf)
        np.testing.assert_allclose(d.min(axis=1), 10.0)

    def test_non_divisible_side_rejected(self):
        with pytest.raises(InvalidInputError):
            build_grid(1.0, 7.0, 60.0)

    def test_nonpositive_rejected(self):
        with pytest.raises(InvalidInputError):
            build_grid(0.0, 10.0, 60.0)

    def test_from_positions_infers_step(self):
        grid = CandidateGrid.from_positions([[0, 0], [30, 0], [0, 30]], 60.0)
        assert grid.step_mm == 30.0
        assert grid.n_positions == 3

    def test_positions_read_only(self):
        grid = build_grid(1.0, 60.0, 60.0)
        with pytest.raises(ValueError):
            grid.positions[0, 0] = 1.0


class TestSamplePaths:
    def test_shapes_and_ranges(self, paths):
        assert len(paths) == 2
        for p in paths:
            assert p.n_paths == 5
            assert np.all(np.abs(p.elevation) <= np.pi / 2)
            assert np.all(np.abs(p.azimuth) <= np.pi / 2)

    def test_elevation_distribution(self):
        rng = np.random.default_rng(1)
        theta = sample_paths(1, 100_000, [1.0], 1.0, 2.2, rng)[0].elevation
        # symmetric density: E[sin θ] = 0, Var[sin θ] = 1/3
        assert abs(np.mean(np.sin(theta))) < 3 * np.sqrt(1 / 3 / 100_000)
        # KS distance against F(θ) = (sin θ + 1)/2
        s = np.sort(theta)
        cdf = (np.sin(s) + 1.0) / 2.0
        n = len(s)
        ks = max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n))
        assert ks < 0.01

    def test_unit_variance_coefficients(self):
        rng = np.random.default_rng(2)
        psi = sample_paths(1, 100_000, [1.0], 1.0, 2.2, rng)[0].coefficients
        assert np.mean(np.abs(psi) ** 2) == pytest.approx(1.0, rel=0.02)

    def test_path_loss_scaling(self):
        rng = np.random.default_rng(3)
        psi = sample_paths(1, 100_000, [10.0], 2.0, 2.0, rng)[0].coefficients
        assert np.mean(np.abs(psi) ** 2) == pytest.approx(2.0 / 100.0, rel=0.02)

    def test_normalized_paths(self):
        rng = np.random.default_rng(4)
        psi = sample_paths(1, 50_000, [1.0], 1.0, 2.2, rng, normalize=True)[0].coefficients
        assert np.mean(np.abs(psi) ** 2) == pytest.approx(1.0 / 50_000, rel=0.03)

    def test_seeded_determinism(self):
        a = sample_paths(2, 3, [20.0, 30.0], 1.0, 2.2, np.random.default_rng(9))
        b = sample_paths(2, 3, [20.0, 30.0], 1.0, 2.2, np.random.default_rng(9))
        for pa, pb in zip(a, b, strict=True):
            assert np.array_equal(pa.coefficients, pb.coefficients)
            assert np.array_equal(pa.elevation, pb.elevation)

    def test_per_user_generators(self):
        rngs = [np.random.default_rng(k) for k in range(2)]
        paths = sample_paths(2, 3, [20.0, 30.0], 1.0, 2.2, rngs)
        alone = sample_paths(1, 3, [30.0], 1.0, 2.2, [np.random.default_rng(1)])
        assert np.array_equal(paths[1].coefficients, alone[0].coefficients)

    def test_invalid_inputs(self):
        rng = np.random.default_rng(0)
        with pytest.raises(InvalidInputError):
            sample_paths(1, 0, [1.0], 1.0, 2.2, rng)
        with pytest.raises(InvalidInputError):
            sample_paths(2, 3, [1.0], 1.0, 2.2, rng)
        with pytest.raises(InvalidInputError):
            sample_paths(1, 3, [-1.0], 1.0, 2.2, rng)

    def test_angles_outside_range_rejected(self):
        with pytest.raises(ValueError):
            PathSet(elevation=np.array([2.0]), azimuth=np.array([0.0]), coefficients=np.array([1.0]))

    def test_free_space_reference(self):
        # λ = 60 mm at 1 m: (0.06 / 4π)² ≈ −46.4 dB
        assert 10 * np.log10(free_space_pathloss(60.0)) == pytest.approx(-46.42, abs=0.01)


class TestFieldResponse:
    def test_reference_position_all_ones(self, paths):
        v = field_response_vector(paths[0], (0.0, 0.0), 60.0)
        np.testing.assert_allclose(v, np.ones(5))

    def test_hand_phase(self):
        path = PathSet(
            elevation=np.array([0.0]), azimuth=np.array([np.pi / 2]), coefficients=np.array([1.0])
        )
        v = field_response_vector(path, (30.0, 0.0), 60.0)
        assert v[0] == pytest.approx(-1.0, abs=1e-12)

    def test_phase_additivity(self, paths):
        v1 = field_response_vector(paths[0], (7.0, 3.0), 60.0)
        v2 = field_response_vector(paths[0], (14.0, 6.0), 60.0)
        np.testing.assert_allclose(v1 * v1, v2, atol=1e-9)

    def test_matrix_columns_match_vectors(self, paths):
        grid = build_grid(0.5, 15.0, 60.0)
        frm = field_response_matrix(paths[1], grid)
        assert frm.shape == (5, 9)
        np.testing.assert_allclose(np.abs(frm), 1.0, atol=1e-12)
        for n, pos in enumerate(grid.positions):
            np.testing.assert_allclose(frm[:, n], field_response_vector(paths[1], pos, 60.0))

    def test_raw_positions_need_wavelength(self, paths):
        with pytest.raises(InvalidInputError):
            field_response_matrix(paths[0], np.zeros((2, 2)))

    def test_effective_channel(self, paths):
        grid = build_grid(0.5, 15.0, 60.0)
        ch = realize_channel(paths[0], grid)
        expected = np.array(
            [np.vdot(paths[0].coefficients, ch.frm[:, n]) for n in range(grid.n_positions)]
        )
        # ĥ_n = (ψᴴ g_n)*, so |ĥ_n| matches the per-position scalar channel
        np.testing.assert_allclose(ch.effective_channel, expected.conj(), rtol=1e-12)

    def test_zero_pcv_gives_zero_channel(self):
        frm = np.ones((3, 4), dtype=complex)
        np.testing.assert_array_equal(effective_channel(frm, np.zeros(3)), np.zeros(4))

    def test_single_unit_path(self):
        frm = np.exp(1j * np.linspace(0, 3, 6)).reshape(1, 6)
        np.testing.assert_allclose(np.abs(effective_channel(frm, [1.0])), 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            effective_channel(np.ones((3, 4)), np.ones(2))

    def test_error_radius(self, paths):
        grid = build_grid(0.5, 15.0, 60.0)
        ch = realize_channel(paths[0], grid, kappa=0.1)
        assert ch.error_radius == pytest.approx(0.1 * np.linalg.norm(paths[0].coefficients))
        with pytest.raises(InvalidInputError):
            ChannelRealization.from_matrices(ch.frm, ch.nominal_pcv, kappa=-0.1)


class TestPerturbation:
    def test_zero_radius(self):
        delta = perturb_pcv(np.ones(3), 0.0, PerturbMode.BALL, np.random.default_rng(0))
        np.testing.assert_array_equal(delta, np.zeros(3))

    def test_sphere_norm(self):
        rng = np.random.default_rng(0)
        norms = [
            np.linalg.norm(perturb_pcv(np.ones(4), 0.3, PerturbMode.SPHERE, rng))
            for _ in range(10_000)
        ]
        np.testing.assert_allclose(norms, 0.3, rtol=1e-12)

    def test_ball_second_moment(self):
        rng = np.random.default_rng(1)
        sq = [
            np.linalg.norm(perturb_pcv(np.ones(2), 1.0, PerturbMode.BALL, rng)) ** 2
            for _ in range(10_000)
        ]
        assert max(sq) <= 1.0
        # uniform ball in real dimension 4: E r² = 4/6
        assert np.mean(sq) == pytest.approx(2 / 3, rel=0.02)

    def test_negative_radius(self):
        with pytest.raises(InvalidInputError):
            perturb_pcv(np.ones(2), -1.0, PerturbMode.BALL, np.random.default_rng(0))


class TestCoupling:
    def test_unit_diagonal(self):
        c = coupling_matrix(build_grid(0.5, 15.0, 60.0), 0.75)
        np.testing.assert_allclose(np.diag(c), 1.0)

    def test_one_wavelength_magnitude(self):
        grid = CandidateGrid.from_positions([[0, 0], [60, 0]], 60.0)
        c = coupling_matrix(grid, 0.75)
        assert abs(c[0, 1]) == pytest.approx(np.exp(-1.5))
        assert abs(c[0, 1]) == pytest.approx(0.223, abs=1e-3)

    def test_decreasing_in_distance(self):
        grid = CandidateGrid.from_positions([[0, 0], [10, 0], [20, 0], [40, 0]], 60.0)
        row = np.abs(coupling_matrix(grid, 0.75)[0])
        assert np.all(np.diff(row) < 0)

    def test_alpha_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            coupling_matrix(build_grid(1.0, 60.0, 60.0), 0.0)
