import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize

from shedecay.sigma import SINC_MIN, ConeViolation, SigmaSpec, eval_sigma, require_cone, validate_cone


def test_identity_nonlinearity():
    spec = SigmaSpec.linear(1.0)
    assert eval_sigma(spec, 3.5) == 3.5
    assert (spec.L_sigma, spec.Lip_sigma) == (1.0, 1.0)


@pytest.mark.parametrize("spec", [
    SigmaSpec.linear(2.0),
    SigmaSpec.linear(-0.5),
    SigmaSpec.shifted_sine(0.25),
    SigmaSpec("expression", expression="a * (1.5 + 0.5 * tanh(a))", L_sigma=1.0, Lip_sigma=2.0),
])
def test_zero_maps_to_zero(spec):
    assert float(eval_sigma(spec, 0.0)) == 0.0
    assert validate_cone(spec).passed


def test_shifted_sine_constants_against_minimizer():
    # [DERIVED] min of sin(a)/a is at the first positive root of tan a = a
    root = optimize.brentq(lambda a: np.tan(a) - a, 4.0, 4.6)
    assert SINC_MIN == pytest.approx(np.sin(root) / root, abs=1e-15)
    spec = SigmaSpec.shifted_sine(0.25)
    assert spec.L_sigma == pytest.approx(0.9457, abs=1e-4)
    assert spec.Lip_sigma == 1.25


@given(st.floats(1e-8, 1e8), st.booleans(), st.floats(0.0, 0.99))
def test_cone_holds_pointwise(mag, neg, c):
    a = -mag if neg else mag
    spec = SigmaSpec.shifted_sine(c)
    r = abs(float(eval_sigma(spec, a)) / a)
    assert spec.L_sigma * (1 - 1e-12) <= r <= spec.Lip_sigma * (1 + 1e-12)


def test_overclaimed_constants_are_reported():
    spec = SigmaSpec.shifted_sine(0.25, L_sigma=0.99)
    cert = validate_cone(spec)
    assert not cert.passed
    assert cert.offenders
    with pytest.raises(ConeViolation, match="first offending"):
        require_cone(spec)


@pytest.mark.parametrize("kwargs", [
    {"kind": "linear", "c": 0.0},
    {"kind": "shifted_sine", "c": 1.0},
    {"kind": "expression", "expression": "a + 1", "L_sigma": 1, "Lip_sigma": 2},
    {"kind": "expression", "expression": "a"},
    {"kind": "expression", "expression": "__import__('os')", "L_sigma": 1, "Lip_sigma": 1},
    {"kind": "linear", "L_sigma": 2.0, "Lip_sigma": 1.0},
    {"kind": "cubic"},
])
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        SigmaSpec(**kwargs)


def test_dict_round_trip():
    spec = SigmaSpec.shifted_sine(0.3)
    assert SigmaSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError, match="unknown sigma keys"):
        SigmaSpec.from_dict({"kind": "linear", "slope": 1})
