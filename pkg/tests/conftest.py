"""Shared fixtures: hand-built toy instances and small seeded ones."""
import numpy as np
import pytest

from ma_power.channel import (
    CandidateGrid,
    ChannelRealization,
    build_grid,
    realize_channel,
    sample_paths,
)
from ma_power.instance import build_instance
from ma_power.models import ScenarioConfig, SystemConfig

WAVELENGTH = 60.0


@pytest.fixture
def toy_instance():
    """M=1, K=1 on two positions 10 mm apart; |ĥ| = 1 at position 0 and 2 at position 1.

    Noise 1 W, γ = 1 and negligible driver power, so the optimum is position 1
    with P̄ = 0.9 · γσ²/|ĥ|² = 0.225 W.
    """
    grid = CandidateGrid.from_positions([[0.0, 0.0], [10.0, 0.0]], WAVELENGTH)
    frm = np.array([[1.0, 1.0], [1.0, -1.0]], dtype=complex)
    channel = ChannelRealization.from_matrices(frm, np.array([1.5, -0.5]))
    config = SystemConfig(
        n_elements=1,
        n_users=1,
        noise_power_w=1.0,
        sinr_target=1.0,
        driver_power_h_w=1e-9,
        driver_power_v_w=1e-9,
    )
    return build_instance(grid, [channel], config, initial_positions=[0])


@pytest.fixture
def make_instance():
    """Factory for seeded instances on small lattices (unit path loss, 4 paths per user)."""

    def _make(
        n_elements=2,
        n_users=2,
        area_scale=0.25,
        step_mm=15.0,
        kappa=0.0,
        gamma=1.0,
        noise=0.1,
        driver_power=0.05,
        min_distance_mm=15.0,
        seed=0,
        initial=None,
        coupling=None,
        n_paths=4,
    ):
        grid = build_grid(area_scale, step_mm, WAVELENGTH)
        rng = np.random.default_rng(seed)
        paths = sample_paths(n_users, n_paths, [1.0] * n_users, 1.0, 2.2, rng)
        channels = [realize_channel(p, grid, kappa) for p in paths]
        config = SystemConfig(
            n_elements=n_elements,
            n_users=n_users,
            noise_power_w=noise,
            sinr_target=gamma,
            min_distance_mm=min_distance_mm,
            driver_power_h_w=driver_power,
            driver_power_v_w=driver_power,
            kappa=kappa,
        )
        return build_instance(
            grid, channels, config, initial_positions=initial, rng=rng, coupling=coupling
        )

    return _make


@pytest.fixture
def small_scenario():
    """Single-element, single-user scenario on a 3×3 grid; fast enough for harness tests."""
    return ScenarioConfig.model_validate(
        {
            "scenario_id": "unit",
            "n_elements": 1,
            "n_users": 1,
            "gamma_db": 0.0,
            "grid": {"area_scale": 0.5, "step_mm": 15.0},
            "channel": {"n_paths": 4},
            "schemes": ["random"],
            "seeds": {"count": 1},
        }
    )
