import pytest

from gradient_gate import GATES, run_gate


@pytest.mark.parametrize("name", sorted(GATES))
def test_gradient_matches_central_differences(name):
    worst = run_gate(name, points=100)
    assert worst < 1e-4, f"{name}: worst relative error {worst:.3g}"
