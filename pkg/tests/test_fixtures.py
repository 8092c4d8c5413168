"""Synthetic fixtures: geometry, determinism and registry."""
import math

import numpy as np
import pytest

from pdeinv.fixtures import (BOWL_CAVITY_OFFSET, BOWL_CAVITY_RADIUS, BOWL_RADIUS, FIXTURES,
                             SPHERE_RADIUS, ball_indicator, make_fixture)
from pdeinv.grid import Grid


def test_ball_indicator_matches_distance_oracle():
    grid = Grid((16, 16, 16))
    center = (3.0, 2.5, 4.0)
    ball = ball_indicator(grid, center, 1.3)
    h = 2 * math.pi / 16
    for i in range(16):
        for j in range(16):
            for k in range(16):
                dist = math.dist((i * h, j * h, k * h), center)
                assert ball[i, j, k] == (1.0 if dist <= 1.3 else 0.0)


def test_sphere_bowl_geometry():
    fx = make_fixture("sphere_bowl", (32, 32, 32))
    m_T, m_R = fx["m_T"], fx["m_R"]
    assert 0 <= m_T.min() and m_T.max() <= 1 and 0 <= m_R.min() and m_R.max() <= 1
    grid = Grid((32, 32, 32))
    vol = grid.cell_volume
    assert m_T.sum() * vol == pytest.approx(4 / 3 * math.pi * SPHERE_RADIUS ** 3, rel=0.05)
    # the bowl is the outer ball minus its intersection with the offset cavity
    r, c, d = BOWL_RADIUS, BOWL_CAVITY_RADIUS, BOWL_CAVITY_OFFSET
    lens = math.pi * (r + c - d) ** 2 * (d ** 2 + 2 * d * c - 3 * c ** 2 + 2 * d * r + 6 * c * r - 3 * r ** 2) / (12 * d)
    assert m_R.sum() * vol == pytest.approx(4 / 3 * math.pi * r ** 3 - lens, rel=0.05)
    # the cavity opens towards the last axis
    center = (16, 16)
    assert m_R[center + (21,)] < 1e-3
    assert m_R[center + (10,)] > 0.5


def test_smooth_synthetic_is_transported_template():
    fx = make_fixture("smooth_synthetic", (16, 16, 16))
    assert fx["v_true"].shape == (3, 16, 16, 16)
    assert not np.allclose(fx["m_T"], fx["m_R"])
    with pytest.raises(ValueError):
        make_fixture("smooth_synthetic", (16, 16))


def test_checker_depends_on_seed_only():
    a = make_fixture("checker", (16, 16), seed=1)
    b = make_fixture("checker", (16, 16), seed=1)
    c = make_fixture("checker", (16, 16), seed=2)
    assert np.array_equal(a["m_R"], b["m_R"])
    assert not np.array_equal(a["m_R"], c["m_R"])


def test_registry():
    assert set(FIXTURES) == {"sphere_bowl", "smooth_synthetic", "multifocal_tumor", "checker"}
    with pytest.raises(ValueError):
        make_fixture("brain_atlas", (16, 16))
