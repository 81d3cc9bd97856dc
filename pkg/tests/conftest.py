from typing import Tuple

import numpy as np
import pytest

from foundation.core.config import GeometryConfig, PipelineConfig, PsoConfig
from foundation.core.database import configure_database
from foundation.core.volume import Mask, Volume
from twostage.network import Network, NetworkSpec
from twostage.network import build as build_network
from twostage.phantoms import make_phantoms
from twostage.pipeline import PipelineBundle
from twostage.shapemodel import build as build_shape_model


def ellipsoid(dims: Tuple[int, int, int], spacing: float, semi: Tuple[float, float, float],
              center: Tuple[float, float, float] = (0.0, 0.0, 0.0)) -> Mask:
    """Solid ellipsoid on a grid centred at the origin"""
    grid = Volume.zeros(dims, (spacing, spacing, spacing))
    pts = grid.physical_points()
    r = sum(((pts[a] - center[a]) / semi[a]) ** 2 for a in range(3))
    return grid.with_data((r <= 1.0).astype(np.uint8))


def superellipsoid(p: float, dims: Tuple[int, int, int] = (48, 48, 32), spacing: float = 2.0,
                   semi: Tuple[float, float, float] = (30.0, 24.0, 18.0)) -> Mask:
    """Fixed extent, squareness controlled by the exponent p"""
    grid = Volume.zeros(dims, (spacing, spacing, spacing))
    pts = grid.physical_points()
    r = sum(np.abs(pts[a] / semi[a]) ** p for a in range(3))
    return grid.with_data((r <= 1.0).astype(np.uint8))


def small_geometry() -> GeometryConfig:
    """Quarter-resolution grids: global/local 32x32x18, canonical 24x24x16 at 4 mm"""
    return PipelineConfig(geometry_scale=0.25).geometry()


def fast_pso(**overrides) -> PsoConfig:
    values = dict(particles=12, iterations=15, seed=3, max_modes=2)
    values.update(overrides)
    return PsoConfig(**values)


def constant_net(foreground_bias: float, seed: int = 0, dims=(32, 32, 18)) -> Network:
    """Network whose output is the same probability everywhere"""
    net = build_network(NetworkSpec(2, 2, 0.0, dims), np.random.default_rng(seed))
    state = net.state_dict()
    state["head.weight"] = np.zeros_like(state["head.weight"])
    state["head.bias"] = np.array([-foreground_bias, foreground_bias])
    net.load_state_dict(state)
    return net


def rigged_bundle(model, global_bias: float = 5.0, local_bias: float = 5.0) -> PipelineBundle:
    """Quarter-resolution bundle with constant networks, so the output depends only on the shape fit"""
    config = PipelineConfig(geometry_scale=0.25, base_features=2, global_depth=2, local_depth=2,
                            pso=fast_pso(particles=8, iterations=5))
    return PipelineBundle(constant_net(global_bias), constant_net(local_bias, 1), model, config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def no_ledger(monkeypatch):
    """Tests run without a run ledger unless they ask for one"""
    monkeypatch.delenv("SEGMENTATION_DB_URL", raising=False)
    configure_database(None)
    yield
    configure_database(None)


@pytest.fixture
def ledger(tmp_path):
    assert configure_database(f"sqlite:///{tmp_path / 'ledger.db'}")
    yield


@pytest.fixture(scope="session")
def small_phantoms():
    """Eight (image, mask) phantoms on the quarter-resolution global grid"""
    return make_phantoms(8, np.random.default_rng(7), (32, 32, 18), 4.0)


@pytest.fixture(scope="session")
def small_model(small_phantoms):
    return build_shape_model([m for _, m in small_phantoms], geometry=small_geometry())
