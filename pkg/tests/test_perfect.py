"""Tests for perfect-CSI beamforming, relaxations, fixings, rounding and penalty SCA."""
import numpy as np
import pytest

from ma_power.channel import CandidateGrid, ChannelRealization
from ma_power.conic import Affine
from ma_power.errors import InvalidInputError
from ma_power.instance import (
    build_instance,
    check_feasible,
    iter_placements,
    selection_matrix,
    sinr,
)
from ma_power.models import DesignStatus, ObjectiveKind, SolveStatus, SystemConfig
from ma_power.perfect import (
    NodeFixings,
    PerfectOracles,
    build_relaxation,
    is_binary,
    penalty_terms,
    round_binary,
    sca_optimize,
    solve_beamforming,
    solve_fixed_B,
    solve_relaxation,
    threshold,
)


@pytest.fixture
def line_instance():
    """Two elements on three collinear positions 10 mm apart, D_min 15 mm."""
    grid = CandidateGrid.from_positions([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]], 60.0)
    channel = ChannelRealization.from_matrices(np.ones((1, 3)), np.array([1.0]))
    config = SystemConfig(n_elements=2, n_users=2, noise_power_w=1.0, sinr_target=1.0)
    return build_instance(grid, [channel, channel], config, initial_positions=[0, 2])


def _brute_force(instance):
    designs = [
        solve_fixed_B(instance, selection_matrix(p, instance.n_positions))
        for p in iter_placements(instance)
    ]
    return min(d.avg_power for d in designs if d.found)


class TestBeamforming:
    def test_single_user_closed_form(self):
        h = np.array([[1.0 + 1.0j, 2.0]])
        result = solve_beamforming(h, 0.5, 3.0)
        assert result.feasible
        # γσ²/‖h‖²
        assert result.power == pytest.approx(3.0 * 0.5 / 6.0, rel=1e-6)
        direction = h.conj().ravel() / np.linalg.norm(h)
        assert abs(np.vdot(direction, result.w[:, 0])) ** 2 == pytest.approx(result.power, rel=1e-6)

    def test_orthogonal_users(self):
        h = np.array([[1.0, 0.0], [0.0, 2.0]])
        result = solve_beamforming(h, 1.0, np.array([1.0, 4.0]))
        assert result.power == pytest.approx(2.0, rel=1e-6)

    def test_phase_normalization(self):
        rng = np.random.default_rng(3)
        h = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
        result = solve_beamforming(h, 1.0, 2.0)
        received = h @ result.w
        for k in range(2):
            assert abs(received[k, k].imag) <= 1e-5 * abs(received[k, k])
            assert received[k, k].real > 0

    def test_targets_met(self):
        rng = np.random.default_rng(4)
        h = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        result = solve_beamforming(h, 0.1, 3.0, p_ref=0.05)
        gains = np.abs(h @ result.w) ** 2
        achieved = np.diag(gains) / (gains.sum(axis=1) - np.diag(gains) + 0.1)
        assert np.all(achieved >= 3.0 * (1 - 1e-5))

    def test_two_users_one_antenna_unit_targets(self):
        result = solve_beamforming(np.array([[1.0], [1.0]]), 1.0, 1.0)
        assert not result.feasible


class TestFixedPlacement:
    def test_toy_positions(self, toy_instance):
        good = solve_fixed_B(toy_instance, selection_matrix([1], 2))
        assert good.status == DesignStatus.FEASIBLE
        assert good.avg_power == pytest.approx(0.225, rel=1e-6)
        stay = solve_fixed_B(toy_instance, selection_matrix([0], 2))
        assert stay.avg_power == pytest.approx(0.9, rel=1e-6)

    def test_infeasible_placement(self, make_instance):
        design = solve_fixed_B(make_instance(), selection_matrix([2, 2], 4))
        assert not design.found
        assert design.metadata["violations"]

    def test_sinr_met_at_design(self, make_instance):
        instance = make_instance()
        b = selection_matrix(instance.initial_positions, 4)
        design = solve_fixed_B(instance, b)
        assert np.all(sinr(instance, b, design.w) >= instance.config.sinr_targets * (1 - 1e-5))

    def test_unit_coupling_matches_plain(self, make_instance):
        instance = make_instance(coupling=np.eye(4, dtype=complex))
        b = selection_matrix(instance.initial_positions, 4)
        plain = solve_fixed_B(instance, b)
        coupled = solve_fixed_B(instance, b, with_coupling=True)
        assert coupled.avg_power == pytest.approx(plain.avg_power, rel=1e-5)


class TestNodeFixings:
    def test_root_blocks_unreachable(self, make_instance):
        # 4×4 lattice with 10 mm step: element 1 at (30, 10) cannot reach x = 0
        instance = make_instance(area_scale=0.5, step_mm=10.0, initial=[5, 7])
        root = NodeFixings.root(instance)
        assert np.all(root.state[1, [0, 4, 8, 12]] == 0)
        assert np.all(root.state[0] == -1)

    def test_fix_propagates(self, make_instance):
        instance = make_instance(area_scale=0.5, step_mm=10.0, initial=[5, 7])
        child = NodeFixings.root(instance).fix(instance, 0, 0, 1)
        assert child.state[0, 0] == 1
        assert np.all(child.state[0, 1:] == 0)
        assert np.all(child.state[1, [0, 1, 4, 5]] == 0)
        assert not child.is_complete
        assert (0, 0) not in child.free

    def test_conflicting_fix_rejected(self, make_instance):
        instance = make_instance(area_scale=0.5, step_mm=10.0, initial=[5, 7])
        child = NodeFixings.root(instance).fix(instance, 0, 0, 1)
        with pytest.raises(InvalidInputError):
            child.fix(instance, 0, 1, 1)

    def test_last_candidate_forced(self, toy_instance):
        child = NodeFixings.root(toy_instance).fix(toy_instance, 0, 0, 0)
        assert child.is_complete
        np.testing.assert_array_equal(child.matrix(), [[0.0], [1.0]])

    def test_exhausted_column_marks_infeasible(self, line_instance):
        child = NodeFixings.root(line_instance).fix(line_instance, 0, 1, 1)
        assert child.infeasible

    def test_relaxed_start_spreads_uniformly(self, make_instance):
        instance = make_instance(area_scale=0.5, step_mm=10.0, initial=[5, 7])
        start = NodeFixings.root(instance).relaxed_start()
        np.testing.assert_allclose(start.sum(axis=0), [1.0, 1.0])
        assert start[0, 1] == 0.0
        assert start[1, 1] == pytest.approx(1 / 12)

    def test_incomplete_matrix_rejected(self, toy_instance):
        with pytest.raises(InvalidInputError):
            NodeFixings.root(toy_instance).matrix()


class TestRelaxation:
    def test_complete_fixings_match_fixed_placement(self, make_instance):
        instance = make_instance()
        b = selection_matrix(instance.initial_positions, 4)
        point = solve_relaxation(build_relaxation(instance, NodeFixings.from_matrix(b)))
        assert point.usable
        assert point.objective == pytest.approx(solve_fixed_B(instance, b).avg_power, rel=1e-5)

    def test_root_bound_below_toy_optimum(self, toy_instance):
        point = solve_relaxation(build_relaxation(toy_instance, NodeFixings.root(toy_instance)))
        assert point.usable
        assert point.bound <= 0.225 + 1e-6

    def test_root_bound_below_enumerated_optimum(self, make_instance):
        instance = make_instance(seed=2)
        point = solve_relaxation(build_relaxation(instance, NodeFixings.root(instance)))
        assert point.bound <= _brute_force(instance) + 1e-6

    def test_radiated_objective(self, toy_instance):
        relaxation = build_relaxation(
            toy_instance, NodeFixings.root(toy_instance), objective=ObjectiveKind.RADIATED_POWER
        )
        point = solve_relaxation(relaxation)
        assert point.bound <= 0.25 + 1e-6

    def test_relaxed_placement_in_box(self, make_instance):
        instance = make_instance(seed=1)
        point = solve_relaxation(build_relaxation(instance, NodeFixings.root(instance)))
        assert point.b.shape == (4, 2)
        assert np.all(point.b >= 0.0) and np.all(point.b <= 1.0)
        np.testing.assert_allclose(point.b.sum(axis=0), 1.0, atol=1e-5)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_fixing_never_lowers_the_bound(self, make_instance, seed):
        instance = make_instance(seed=seed)
        root = NodeFixings.root(instance)
        parent = solve_relaxation(build_relaxation(instance, root))
        assert parent.usable
        for m, n in zip(*np.nonzero(root.state == -1), strict=True):
            for value in (0, 1):
                child = root.fix(instance, int(m), int(n), value)
                if child.infeasible:
                    continue
                point = solve_relaxation(build_relaxation(instance, child))
                if point.usable:
                    assert point.bound >= parent.bound - 1e-6

    def test_coupling_needs_matrix(self, toy_instance):
        with pytest.raises(InvalidInputError):
            build_relaxation(toy_instance, NodeFixings.root(toy_instance), coupling=True)


class TestBinaryHelpers:
    def test_is_binary(self):
        assert is_binary(np.array([[0.0, 1.0], [0.995, 0.005]]))
        assert not is_binary(np.array([[0.5], [0.5]]))

    def test_threshold(self):
        np.testing.assert_array_equal(threshold(np.array([[0.9], [0.1]])), [[1.0], [0.0]])
        assert threshold(np.array([[0.5], [0.5]])) is None

    def test_penalty_majorizes(self):
        point = np.array([0.3, 0.8])
        for value in ([0.0, 1.0], [0.3, 0.8], [0.6, 0.1]):
            b = np.array(value)
            linear = penalty_terms(Affine.constant(b), point).evaluate(np.zeros(0))
            assert linear >= np.sum(b - b**2) - 1e-12
        at_point = penalty_terms(Affine.constant(point), point).evaluate(np.zeros(0))
        assert at_point == pytest.approx(np.sum(point - point**2))


class TestRounding:
    def test_binary_target_kept(self, toy_instance):
        rounded = round_binary(toy_instance, np.array([[0.0], [1.0]]))
        assert rounded.found
        assert rounded.iterations == 1
        np.testing.assert_array_equal(rounded.b, [[0.0], [1.0]])

    def test_fractional_target(self, toy_instance):
        rounded = round_binary(toy_instance, np.array([[0.4], [0.6]]))
        assert rounded.found
        assert check_feasible(toy_instance, rounded.b).feasible
        np.testing.assert_array_equal(rounded.b, [[0.0], [1.0]])

    def test_shared_position_pulled_apart(self, make_instance):
        instance = make_instance()
        target = np.array([[0.7, 0.55], [0.3, 0.45], [0.0, 0.0], [0.0, 0.0]])
        rounded = round_binary(instance, target)
        assert rounded.found
        assert check_feasible(instance, rounded.b).feasible
        np.testing.assert_array_equal(rounded.b.argmax(axis=0), [0, 1])

    def test_complete_fixings(self, toy_instance):
        fixings = NodeFixings.from_matrix(np.array([[1.0], [0.0]]))
        rounded = round_binary(toy_instance, np.array([[0.5], [0.5]]), fixings=fixings)
        np.testing.assert_array_equal(rounded.b, [[1.0], [0.0]])


class TestPenaltySca:
    def test_toy(self, toy_instance):
        design = sca_optimize(toy_instance)
        assert design.found
        assert design.avg_power == pytest.approx(0.225, abs=1e-3)
        assert design.positions.tolist() == [1]
        assert design.iterations >= 1
        assert 1 <= len(design.objective_trace) <= design.iterations

    def test_vanishing_target_keeps_initial_positions(self, make_instance):
        instance = make_instance(n_elements=1, n_users=1, gamma=1e-6, driver_power=1.0, initial=[2])
        design = sca_optimize(instance)
        assert design.positions.tolist() == [2]
        assert design.motion_energy == pytest.approx(0.0, abs=1e-12)

    def test_never_beats_enumeration(self, make_instance):
        instance = make_instance(seed=5)
        design = sca_optimize(instance)
        assert design.found
        assert check_feasible(instance, design.b).feasible
        assert design.avg_power >= _brute_force(instance) - 1e-6

    def test_explicit_start(self, toy_instance):
        design = sca_optimize(toy_instance, b_init=np.array([[0.2], [0.8]]))
        assert design.positions.tolist() == [1]

    @pytest.mark.parametrize("seed", range(8))
    def test_penalized_objective_never_increases(self, make_instance, seed):
        design = sca_optimize(make_instance(seed=seed))
        assert design.found
        trace = np.array(design.objective_trace)
        mus = np.array(design.metadata["mu_trace"])
        assert trace.shape == mus.shape
        same_mu = mus[1:] == mus[:-1]
        assert np.all(np.diff(trace)[same_mu] <= 1e-7)

    def test_repeatable(self, make_instance):
        instance = make_instance(seed=3)
        first, second = sca_optimize(instance), sca_optimize(instance)
        assert first.positions.tolist() == second.positions.tolist()
        np.testing.assert_allclose(first.objective_trace, second.objective_trace, rtol=1e-9)


class TestPerfectOracles:
    def test_relax_and_upper(self, toy_instance):
        oracles = PerfectOracles(toy_instance)
        root = oracles.root()
        point = oracles.relax(root)
        assert point.status in (SolveStatus.OPTIMAL, SolveStatus.INACCURATE)
        upper = oracles.upper(root, point)
        assert upper is not None
        assert oracles.score(upper) >= point.bound - 1e-6

    def test_radiated_score(self, toy_instance):
        oracles = PerfectOracles(toy_instance, objective=ObjectiveKind.RADIATED_POWER)
        design = oracles.fixed(selection_matrix([1], 2))
        assert oracles.score(design) == pytest.approx(0.25, rel=1e-6)
        assert design.metadata["search_objective"] == pytest.approx(0.25, rel=1e-6)
