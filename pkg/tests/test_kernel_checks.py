import json
import subprocess
import sys

import pytest

from shedecay.kernel import load_constants
from shedecay.kernel_checks import (
    CheckRow,
    check_chapman_kolmogorov,
    check_conservation,
    check_sandwich,
    check_time_difference,
    run_kernel_suite,
)


@pytest.fixture(scope="module")
def suite():
    return run_kernel_suite()


def test_every_check_passes(suite):
    failed = [r.row() for r in suite if not r.passed]
    assert not failed, failed[:5]


def test_suite_covers_every_family(suite):
    families = {r.check for r in suite}
    assert families == {
        "sandwich_lower", "sandwich_upper", "sup_lower", "conservation", "chapman_kolmogorov",
        "time_difference", "time_difference_quadrature", "space_difference_lipschitz",
        "space_difference_holder", "space_difference_quadrature", "semigroup_time",
        "semigroup_space", "interpolation",
    }


def test_grid_sizes():
    assert len(list(check_sandwich())) == 2 * 40 * 25
    assert len(list(check_conservation())) == 40
    assert len(list(check_chapman_kolmogorov())) == 40
    assert len(list(check_time_difference())) == 2 * 3 * 3 * 9


def test_row_schema():
    row = CheckRow("x", {"t": 1.0}, 2.0, 1.0).row()
    assert row == {"check": "x", "params": {"t": 1.0}, "lhs": 2.0, "rhs": 1.0, "pass": False}
    json.dumps(row)


def test_zeroed_constant_fails_the_suite(tmp_path):
    data = load_constants()
    data["constants"]["lipschitz"] = 0.0
    path = tmp_path / "tampered.json"
    path.write_text(json.dumps(data))
    failed = [r for r in run_kernel_suite(path) if not r.passed]
    assert failed and {r.check for r in failed} == {"space_difference_lipschitz"}
    proc = subprocess.run(
        [sys.executable, "-m", "shedecay.cli", "verify", "kernel", "--constants", str(path),
         "--output-dir", str(tmp_path / "out")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 1
    assert "FAIL space_difference_lipschitz" in proc.stderr
