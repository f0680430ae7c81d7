import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from felb.errors import ConfigError, NumericalError, ShapeError
from felb.proximal import (
    ORACLE_STEP,
    ProximityParams,
    RegularizationParams,
    elb_value,
    prox_elb,
    prox_oracle,
    prox_proximity,
)


def test_regularization_params_validation_lists_all_problems():
    with pytest.raises(ConfigError) as info:
        RegularizationParams(kappa=-1, lam=float("nan"), growth=0.5)
    assert len(info.value.violations) == 3


def test_lambda_schedule_is_nondecreasing():
    reg = RegularizationParams(lam=0.1, growth=1.05)
    values = [reg.lam_at(t) for t in range(50)]
    assert values[0] == 0.1
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert reg.lam_at(2) == pytest.approx(0.1 * 1.05**2)


def test_proximity_params_rejects_negative_gamma():
    with pytest.raises(ConfigError):
        ProximityParams(gamma=-0.1)


# ---------- elb_value ----------


def test_elb_value_vanishes_on_boolean_matrices():
    X = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert elb_value(X, RegularizationParams(kappa=0.7, lam=3.0)) == 0.0


@pytest.mark.parametrize(
    "x, kappa, lam, expected",
    [
        (0.5, 1.0, 1.0, 0.75),
        (0.2, 0.0, 1.0, 0.04),
    ],
)
def test_elb_value_examples(x, kappa, lam, expected):
    assert elb_value(np.array([[x]]), RegularizationParams(kappa=kappa, lam=lam)) == pytest.approx(expected)


@given(st.floats(-3, 4), st.floats(0, 2), st.floats(0, 5))
def test_elb_value_is_nonnegative(x, kappa, lam):
    assert elb_value(np.array([[x]]), RegularizationParams(kappa=kappa, lam=lam)) >= 0.0


def test_elb_value_rejects_non_finite():
    with pytest.raises(NumericalError):
        elb_value(np.array([[np.inf]]), RegularizationParams())


# ---------- prox_elb ----------


def test_prox_elb_identity_without_regularization():
    X = np.array([[-0.3, 0.2, 0.5, 0.9, 1.7]])
    assert np.array_equal(prox_elb(X, 0.0, 0.0), X)


@pytest.mark.parametrize(
    "x, kappa, lam, expected",
    [
        (0.25, 0.1, 1.0, 0.075),
        (0.75, 0.1, 1.0, 0.925),
        (-0.2, 0.1, 0.0, -0.1),
    ],
)
def test_prox_elb_examples(x, kappa, lam, expected):
    assert prox_elb(np.array([[x]]), kappa, lam)[0, 0] == pytest.approx(expected)


def test_prox_elb_keeps_exact_zero_and_one():
    X = np.array([[0.0, 1.0]])
    assert np.array_equal(prox_elb(X, 0.3, 2.0), X)


def test_prox_elb_boundary_uses_lower_branch():
    # x = ½ 向 0 收缩
    assert prox_elb(np.array([[0.5]]), 0.0, 1.0)[0, 0] == pytest.approx(0.25)


def test_prox_elb_accepts_elementwise_weights():
    X = np.array([[0.25, 0.75]])
    out = prox_elb(X, np.array([[0.1, 0.0]]), np.array([[1.0, 0.0]]))
    assert out[0].tolist() == pytest.approx([0.075, 0.75])


@pytest.mark.parametrize("x", np.linspace(-1.0, 2.0, 31))
def test_prox_elb_boolean_limit(x):
    y = prox_elb(np.array([[x]]), 0.001, 1e6)[0, 0]
    target = 0.0 if x <= 0.5 else 1.0
    assert abs(y - target) <= 1e-5


@given(st.floats(-1.5, 2.5), st.floats(0, 1), st.floats(0, 5), st.floats(0, 5))
def test_increasing_lambda_never_moves_away_from_boolean(x, kappa, lam, extra):
    def gap(y):
        return min(abs(y), abs(y - 1.0))

    small = prox_elb(np.array([[x]]), kappa, lam)[0, 0]
    large = prox_elb(np.array([[x]]), kappa, lam + extra)[0, 0]
    assert gap(large) <= gap(small) + 1e-12


# ---------- prox_oracle ----------


def test_prox_oracle_grid_resolution():
    assert ORACLE_STEP <= 1e-5
    # 落在网格点之间的极小点仍能被精确找到
    assert prox_oracle(0.123456789, 0.0, 0.0) == pytest.approx(0.123456789, abs=1e-8)


def test_prox_oracle_examples():
    assert prox_oracle(0.25, 0.1, 1.0) == pytest.approx(0.075, abs=1e-4)
    assert prox_oracle(1.0, 0.0, 0.3) == pytest.approx(1.0, abs=1e-4)
    assert prox_oracle(0.37, 0.0, 0.0) == pytest.approx(0.37, abs=1e-4)


@settings(max_examples=300, deadline=None)
@given(st.floats(-1.5, 2.5), st.floats(0, 1), st.floats(0, 5))
def test_prox_elb_matches_oracle(x, kappa, lam):
    if abs(x - 0.5) < 1e-3:
        return
    closed = prox_elb(np.array([[x]]), kappa, lam)[0, 0]
    assert closed == pytest.approx(prox_oracle(x, kappa, lam), abs=1e-4)


@pytest.mark.slow
def test_prox_elb_matches_oracle_on_ten_thousand_triples():
    gen = np.random.default_rng(2024)
    xs = gen.uniform(-1.5, 2.5, 10_000)
    kappas = gen.uniform(0, 1, 10_000)
    lams = gen.uniform(0, 5, 10_000)
    worst = 0.0
    for x, kappa, lam in zip(xs, kappas, lams):
        if abs(x - 0.5) < 1e-3:
            continue
        closed = prox_elb(np.array([[x]]), kappa, lam)[0, 0]
        worst = max(worst, abs(closed - prox_oracle(x, kappa, lam)))
    assert worst <= 1e-4


# ---------- prox_proximity ----------


def test_prox_proximity_examples():
    X = np.array([[0.0, 0.2]])
    anchor = np.array([[1.0, 1.0]])
    assert np.array_equal(prox_proximity(X, 0.0, anchor), X)
    assert prox_proximity(X, 1.0, anchor)[0, 0] == pytest.approx(0.5)
    assert prox_proximity(X, 3.0, anchor)[0, 1] == pytest.approx(0.8)


def test_prox_proximity_large_gamma_reaches_anchor():
    gen = np.random.default_rng(3)
    X, anchor = gen.random((3, 4)), gen.random((3, 4))
    assert np.allclose(prox_proximity(X, 1e9, anchor), anchor, atol=1e-8)


def test_prox_proximity_shape_mismatch():
    with pytest.raises(ShapeError):
        prox_proximity(np.zeros((2, 2)), 1.0, np.zeros((2, 3)))
