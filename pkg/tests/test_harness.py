"""Tests for the Monte Carlo harness."""
import math

import numpy as np
import pytest

from ma_power.errors import InvalidInputError
from ma_power.harness import (
    build_trial,
    compensated_gamma,
    energy_efficiency,
    evaluate,
    run_experiment,
    run_scheme,
    sinr_target_for,
    substream,
    summarize,
    trace_run,
    verify_design,
)
from ma_power.instance import DesignSolution
from ma_power.models import CsiMode, DesignStatus, Scheme, SweepAxis, SystemConfig


def _with(config, **update):
    return config.model_copy(update=update)


class TestRateCompensation:
    def test_compensated_target(self):
        assert compensated_gamma(10.0, 0.03, 0.27) == pytest.approx(11.0 ** (0.3 / 0.27) - 1.0)
        assert compensated_gamma(10.0, 0.03, 0.27) == pytest.approx(13.36, abs=0.01)

    def test_no_dead_time(self):
        assert compensated_gamma(3.0, 0.0, 0.27) == pytest.approx(3.0)

    def test_invalid_inputs(self):
        with pytest.raises(InvalidInputError):
            compensated_gamma(-1.0, 0.03, 0.27)
        with pytest.raises(InvalidInputError):
            compensated_gamma(1.0, 0.03, 0.0)

    def test_fixed_antennas_keep_target(self, small_scenario):
        config = _with(small_scenario, gamma_db=10.0, compensate_rate=True)
        assert sinr_target_for(config, Scheme.ANTENNA_SELECTION) == pytest.approx(10.0)
        assert sinr_target_for(config, Scheme.BNB) == pytest.approx(compensated_gamma(10.0, 0.03, 0.27))
        assert sinr_target_for(_with(config, compensate_rate=False), Scheme.BNB) == pytest.approx(10.0)


class TestEnergyEfficiency:
    def _design(self, power):
        return DesignSolution(
            status=DesignStatus.FEASIBLE, b=np.eye(1), avg_power=power, radiated_power=power
        )

    def test_fixed_position(self):
        config = SystemConfig(n_elements=1, n_users=1, noise_power_w=1.0, sinr_target=1.0)
        assert energy_efficiency(self._design(1.0), np.array([1.0]), config, True) == pytest.approx(1.0)

    def test_movable_counts_data_fraction(self):
        config = SystemConfig(n_elements=1, n_users=1, noise_power_w=1.0, sinr_target=1.0)
        assert energy_efficiency(self._design(1.0), np.array([1.0]), config, False) == pytest.approx(0.9)

    def test_no_design(self):
        config = SystemConfig(n_elements=1, n_users=1, noise_power_w=1.0, sinr_target=1.0)
        assert energy_efficiency(DesignSolution.infeasible(), np.array([1.0]), config, False) is None


class TestTrials:
    def test_substreams_are_deterministic(self):
        a = substream("user", "unit", 0, 0, 1).standard_normal(3)
        b = substream("user", "unit", 0, 0, 1).standard_normal(3)
        c = substream("user", "unit", 0, 0, 2).standard_normal(3)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_channels_paired_across_targets(self, small_scenario):
        low = build_trial(small_scenario, 0, 3, sinr_target=1.0)
        high = build_trial(small_scenario, 0, 3, sinr_target=10.0)
        np.testing.assert_array_equal(low.channel_matrix, high.channel_matrix)
        np.testing.assert_array_equal(low.initial_positions, high.initial_positions)
        assert high.config.sinr_target == [10.0]

    def test_channels_paired_across_gamma_sweep(self, small_scenario):
        config = _with(
            small_scenario,
            sweep=small_scenario.sweep.model_copy(update={"axis": SweepAxis.GAMMA_DB, "values": [0.0, 5.0]}),
        )
        first = build_trial(config, 0, 1)
        second = build_trial(config, 1, 1)
        np.testing.assert_array_equal(first.channel_matrix, second.channel_matrix)
        assert second.config.sinr_targets[0] == pytest.approx(10 ** 0.5)

    def test_seeds_differ(self, small_scenario):
        a = build_trial(small_scenario, 0, 0)
        b = build_trial(small_scenario, 0, 1)
        assert not np.allclose(a.channel_matrix, b.channel_matrix)

    def test_random_needs_generator(self, small_scenario):
        instance = build_trial(small_scenario, 0, 0)
        with pytest.raises(InvalidInputError):
            run_scheme(Scheme.RANDOM, instance, small_scenario)

    def test_robust_coupling_rejected(self, small_scenario):
        config = _with(small_scenario, csi=CsiMode.IMPERFECT, kappa=0.05)
        instance = build_trial(config, 0, 0)
        with pytest.raises(InvalidInputError):
            run_scheme(Scheme.MC_OPTIMAL, instance, config)


class TestEvaluate:
    def test_record_fields(self, small_scenario):
        outcome = evaluate(small_scenario, 0, 0, Scheme.BNB)
        record = outcome.record
        assert record.status == DesignStatus.OPTIMAL
        assert record.verified
        assert record.error is None
        assert record.avg_power_db == pytest.approx(10 * math.log10(record.avg_power_w))
        assert record.min_sinr_margin_db >= -1e-6
        assert outcome.entry.positions == outcome.design.positions.tolist()

    def test_tampered_power_caught(self, small_scenario):
        outcome = evaluate(small_scenario, 0, 0, Scheme.BNB)
        instance = build_trial(small_scenario, 0, 0)
        design = outcome.design
        design.avg_power *= 0.5
        check = verify_design(Scheme.BNB, instance, design)
        assert not check.verified
        assert any(v.startswith("power") for v in check.violations)

    def test_entry_rebuilds_design(self, small_scenario):
        outcome = evaluate(small_scenario, 0, 0, Scheme.RANDOM)
        instance = build_trial(small_scenario, 0, 0)
        rebuilt = outcome.entry.to_design(instance)
        assert rebuilt.avg_power == pytest.approx(outcome.record.avg_power_w, rel=1e-12)
        assert verify_design(Scheme.RANDOM, instance, rebuilt).verified

    def test_failure_lands_in_record(self, small_scenario):
        config = _with(small_scenario, tolerances=small_scenario.tolerances.model_copy(update={"enumeration_budget": 1}))
        record = evaluate(config, 0, 0, Scheme.EXHAUSTIVE).record
        assert record.status == DesignStatus.INFEASIBLE
        assert "enumeration budget" in record.error
        assert record.avg_power_w is None

    def test_no_verification_without_design(self, small_scenario):
        assert not verify_design(Scheme.BNB, build_trial(small_scenario, 0, 0), DesignSolution.infeasible()).verified


class TestRunExperiment:
    def test_single_record(self, small_scenario):
        result = run_experiment(small_scenario)
        assert len(result.records) == 1
        assert len(result.designs) == 1
        assert result.records[0].scheme == Scheme.RANDOM

    def test_deterministic(self, small_scenario):
        config = _with(
            small_scenario,
            schemes=[Scheme.BNB, Scheme.RANDOM],
            seeds=small_scenario.seeds.model_copy(update={"count": 2}),
        )
        first = run_experiment(config)
        second = run_experiment(config)
        strip = [r.model_dump(exclude={"wall_s"}) for r in first.records]
        assert strip == [r.model_dump(exclude={"wall_s"}) for r in second.records]

    def test_canonical_order(self, small_scenario):
        config = _with(
            small_scenario,
            schemes=[Scheme.RANDOM, Scheme.BNB],
            seeds=small_scenario.seeds.model_copy(update={"count": 2}),
        )
        result = run_experiment(config)
        keys = [r.sort_key for r in result.records]
        assert keys == sorted(keys)
        assert [r.seed for r in result.records] == [0, 0, 1, 1]

    def test_progress_callback(self, small_scenario):
        calls = []
        run_experiment(small_scenario, progress=lambda done, total: calls.append((done, total)))
        assert calls == [(1, 1)]

    def test_summarize(self, small_scenario):
        config = _with(small_scenario, schemes=[Scheme.BNB, Scheme.RANDOM])
        rows = summarize(run_experiment(config))
        assert [r["scheme"] for r in rows] == ["bnb", "random"]
        assert all(r["records"] == 1 and r["solved"] == 1 for r in rows)
        bnb, rnd = rows
        assert bnb["mean_avg_power_w"] <= rnd["mean_avg_power_w"] + 1e-9


class TestTraceRun:
    def test_bnb_trace(self, small_scenario):
        rows = trace_run(small_scenario, seed=0)
        assert rows[0]["iteration"] == 0
        assert {"lower_bound", "upper_bound", "open_nodes"} <= set(rows[0])

    def test_sca_trace(self, small_scenario):
        rows = trace_run(small_scenario, seed=0, scheme=Scheme.SCA)
        assert rows
        assert set(rows[0]) == {"iteration", "objective", "mu"}
        assert rows[0]["mu"] == small_scenario.tolerances.penalty_mu

    def test_other_schemes_rejected(self, small_scenario):
        with pytest.raises(InvalidInputError):
            trace_run(small_scenario, seed=0, scheme=Scheme.RANDOM)
