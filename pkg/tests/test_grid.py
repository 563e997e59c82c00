import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shedecay.grid import GridFunction, grid_nodes, initial_profile, torus_point


def test_nodes_cover_torus():
    x = grid_nodes(8)
    assert x[0] == -1.0
    assert np.allclose(np.diff(x), 0.25)
    assert x[-1] < 1.0


@given(st.floats(-50, 50, allow_nan=False))
def test_torus_point_wraps_into_half_open_interval(x):
    w = torus_point(x)
    assert -1.0 <= w < 1.0
    assert abs(((x - w) / 2.0) - round((x - w) / 2.0)) < 1e-9


def test_grid_function_is_read_only_and_finite():
    u = GridFunction([1.0, 2.0, 3.0, 4.0])
    assert u.dx == 0.5
    with pytest.raises(ValueError):
        u.values[0] = 5.0
    with pytest.raises(FloatingPointError, match="cell 2"):
        GridFunction([1.0, 1.0, np.nan])


def test_norms():
    u = GridFunction.constant(-3.0, 16)
    assert u.sup_norm() == 3.0
    assert u.l1_norm() == pytest.approx(6.0)


def test_initial_profiles():
    assert np.all(initial_profile({"kind": "constant", "value": 2.0}, 8).values == 2.0)
    cos = initial_profile({"kind": "cosine", "mean": 1.0, "amplitude": 0.5}, 64)
    assert cos.values.max() == pytest.approx(1.5)
    bump = initial_profile({"kind": "bump", "base": 0.1, "height": 1.0, "center": 0.0, "width": 0.1}, 64)
    assert bump.values.min() > 0.1 - 1e-15
    with pytest.raises(ValueError, match="unknown initial profile"):
        initial_profile({"kind": "triangle"}, 8)
