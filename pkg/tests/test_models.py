"""Tests for configuration models and unit conversions."""
import json
import math

import pytest
from pydantic import ValidationError

from ma_power.models import (
    CsiMode,
    DesignStatus,
    ExperimentRecord,
    ScenarioConfig,
    Scheme,
    SolveStatus,
    SweepAxis,
    SystemConfig,
    db_to_linear,
    dbm_to_watts,
    linear_to_db,
)


class TestConversions:
    def test_db_to_linear(self):
        assert db_to_linear(0.0) == 1.0
        assert db_to_linear(10.0) == pytest.approx(10.0)
        assert db_to_linear(5.0) == pytest.approx(3.16227766, rel=1e-8)

    def test_linear_to_db_edges(self):
        assert linear_to_db(100.0) == pytest.approx(20.0)
        assert linear_to_db(0.0) == float("-inf")
        assert math.isnan(linear_to_db(-1.0))

    def test_dbm_to_watts(self):
        assert dbm_to_watts(30.0) == pytest.approx(1.0)
        assert dbm_to_watts(-80.0) == pytest.approx(1e-11)


class TestSystemConfig:
    def test_scalar_broadcast(self):
        config = SystemConfig(n_elements=2, n_users=3, noise_power_w=1e-11, sinr_target=2.0)
        assert config.noise_power_w == [1e-11] * 3
        assert config.sinr_target == [2.0] * 3

    def test_per_user_lists(self):
        config = SystemConfig(n_elements=1, n_users=2, noise_power_w=[1.0, 2.0], sinr_target=[1.0])
        assert list(config.noise_powers) == [1.0, 2.0]
        assert list(config.sinr_targets) == [1.0, 1.0]

    def test_wrong_length_rejected(self):
        with pytest.raises(ValidationError):
            SystemConfig(n_elements=1, n_users=2, noise_power_w=[1.0, 2.0, 3.0], sinr_target=1.0)

    def test_nonpositive_target_rejected(self):
        with pytest.raises(ValidationError):
            SystemConfig(n_elements=1, n_users=1, noise_power_w=1.0, sinr_target=0.0)

    def test_derived_limits(self):
        config = SystemConfig(n_elements=1, n_users=1, noise_power_w=1.0, sinr_target=1.0)
        assert config.frame_s == pytest.approx(0.3)
        assert config.max_move_h_mm == pytest.approx(28.2)
        assert config.max_move_v_mm == pytest.approx(28.2)


class TestScenarioConfig:
    def test_defaults_follow_full_scale_setup(self):
        config = ScenarioConfig()
        assert config.grid.wavelength_mm == 60.0
        assert config.min_distance_mm == 15.0
        assert config.noise_dbm == -80.0
        assert config.channel.n_paths == 16
        assert config.seeds.count == 200
        assert config.tolerances.bnb_gap == 1e-4

    def test_sweep_points(self):
        assert ScenarioConfig().sweep_points == [None]
        config = ScenarioConfig.model_validate({"sweep": {"axis": "gamma_db", "values": [0, 5]}})
        assert config.sweep_points == [0.0, 5.0]

    def test_at_sweep_value(self):
        config = ScenarioConfig.model_validate({"sweep": {"axis": "area_scale", "values": [1, 2]}})
        assert config.at_sweep_value(1.0).grid.area_scale == 1.0
        config = ScenarioConfig.model_validate({"sweep": {"axis": "n_elements", "values": [2]}})
        assert config.at_sweep_value(2.0).n_elements == 2
        config = ScenarioConfig.model_validate({"sweep": {"axis": "kappa", "values": [0.1]}})
        assert config.at_sweep_value(0.1).kappa == 0.1

    def test_kappa_only_under_imperfect_csi(self):
        perfect = ScenarioConfig(kappa=0.1)
        assert perfect.system_config().kappa == 0.0
        robust = ScenarioConfig(kappa=0.1, csi=CsiMode.IMPERFECT)
        assert robust.system_config().kappa == 0.1

    def test_system_config_target_override(self):
        config = ScenarioConfig(gamma_db=10.0)
        assert config.system_config().sinr_target[0] == pytest.approx(10.0)
        assert config.system_config(13.36).sinr_target[0] == 13.36

    def test_load_applies_file_over_overrides(self, tmp_path):
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps({"n_users": 3, "grid": {"step_mm": 10.0}}))
        config = ScenarioConfig.load(path, {"n_users": 2, "gamma_db": 7.0, "grid": {"area_scale": 0.5}})
        assert config.n_users == 3
        assert config.gamma_db == 7.0
        assert config.grid.area_scale == 0.5
        assert config.grid.step_mm == 10.0

    def test_load_without_file(self):
        config = ScenarioConfig.load(None, {"schemes": ["bnb", "es"]})
        assert config.schemes == [Scheme.BNB, Scheme.EXHAUSTIVE]

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioConfig.model_validate({"schemes": ["nope"]})


class TestEnums:
    def test_only_antenna_selection_is_fixed_position(self):
        assert Scheme.ANTENNA_SELECTION.fixed_position
        assert not any(s.fixed_position for s in Scheme if s != Scheme.ANTENNA_SELECTION)

    def test_geometry_axes(self):
        assert SweepAxis.AREA_SCALE.changes_geometry
        assert SweepAxis.STEP.changes_geometry
        assert not SweepAxis.GAMMA_DB.changes_geometry
        assert not SweepAxis.KAPPA.changes_geometry

    def test_usable_status(self):
        assert SolveStatus.OPTIMAL.usable
        assert SolveStatus.INACCURATE.usable
        assert not SolveStatus.MAX_ITER.usable


class TestExperimentRecord:
    def test_sort_key(self):
        record = ExperimentRecord(
            scenario_id="s", sweep_index=1, seed=4, scheme=Scheme.SCA, status=DesignStatus.FEASIBLE
        )
        assert record.sort_key == ("s", 1, 4, "sca")
