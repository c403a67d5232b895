import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from dcpo.clipping import (
    ClipConfig,
    ClipMode,
    bound_curve,
    bounds_for,
    calibrate_thresholds,
    ceiling_threshold,
    dynamic_bounds,
    fixed_bounds,
)

DYN = ClipConfig.dcpo()


def test_lower_anchor_at_q_one():
    assert dynamic_bounds(1.0, DYN).lower == pytest.approx(0.8, abs=1e-12)


def test_upper_anchor():
    assert dynamic_bounds(1 / 1.2, DYN).upper == pytest.approx(1.2, abs=1e-12)


@pytest.mark.parametrize("q", [0.64, 0.5, 0.1, 1e-3, 1e-9])
def test_lower_floor_regime(q):
    assert dynamic_bounds(q, DYN).lower == 0.5


def test_zero_slack_collapses_to_identity():
    cfg = ClipConfig(mode=ClipMode.DYNAMIC_ADAPTIVE, eps_low=0.0, eps_high=0.0)
    for q in (1.0, 0.3, 1e-6):
        b = dynamic_bounds(q, cfg)
        assert (b.lower, b.upper) == (1.0, 1.0)


def test_ceiling_threshold_matches_root_finding():
    # Solve 0.5 + 0.5*sqrt(1 + 0.8/q) = 10 independently of the closed form.
    q_star = brentq(lambda q: 0.5 + 0.5 * math.sqrt(1 + 0.8 / q) - 10.0, 1e-6, 1.0, xtol=1e-15)
    assert ceiling_threshold(DYN) == pytest.approx(q_star, rel=1e-9)
    assert ceiling_threshold(DYN) == pytest.approx(0.8 / 360, rel=1e-12)
    assert dynamic_bounds(0.8 / 360, DYN).upper == pytest.approx(10.0, abs=1e-9)
    assert dynamic_bounds(1e-3, DYN).upper == 10.0
    assert dynamic_bounds(0.003, DYN).upper < 10.0


def test_q_zero_is_floored_and_bad_q_raises():
    assert dynamic_bounds(0.0, DYN).upper == 10.0
    for bad in (-0.1, 1.5, math.nan, math.inf):
        with pytest.raises(ValueError):
            dynamic_bounds(bad, DYN)


def test_dynamic_bounds_vectorized():
    q = np.array([1.0, 1 / 1.2, 0.1])
    b = dynamic_bounds(q, DYN)
    assert b.lower.shape == (3,)
    assert b.upper[2] == pytest.approx(0.5 + 0.5 * math.sqrt(9))


def test_dynamic_bounds_rejects_fixed_config():
    with pytest.raises(ValueError):
        dynamic_bounds(0.5, ClipConfig.grpo())


@pytest.mark.parametrize(
    "cfg, expected",
    [
        (ClipConfig.grpo(0.2), (0.8, 1.2)),
        (ClipConfig.dapo(0.2, 0.28), (0.8, 1.28)),
        (ClipConfig.grpo(0.0), (1.0, 1.0)),
    ],
)
def test_fixed_bounds(cfg, expected):
    b = fixed_bounds(cfg)
    assert (b.lower, b.upper) == pytest.approx(expected, abs=1e-15)


def test_invalid_configs():
    with pytest.raises(ValueError):
        ClipConfig.dapo(eps_low=1.0)
    with pytest.raises(ValueError):
        ClipConfig(eps_low=-0.1)
    with pytest.raises(ValueError):
        ClipConfig(r_max=1.0)


def test_calibration_default():
    lo, hi = calibrate_thresholds(0.2)
    assert lo == pytest.approx(0.16, abs=1e-12)
    assert hi == pytest.approx(0.2, abs=1e-12)


def test_calibration_eps_03_against_anchor_equations():
    lo, hi = calibrate_thresholds(0.3)
    assert (lo, hi) == pytest.approx((0.21, 0.3), abs=1e-12)
    # independent route: root-find each anchor equation
    hi_root = brentq(lambda e: 0.5 + 0.5 * math.sqrt(1 + 4 * e * 1.3) - 1.3, 0.0, 1.0, xtol=1e-15)
    lo_root = brentq(lambda e: 0.5 + 0.5 * math.sqrt(max(1 - 4 * e, 0.0)) - 0.7, 0.0, 0.25, xtol=1e-15)
    assert hi == pytest.approx(hi_root, abs=1e-12)
    assert lo == pytest.approx(lo_root, abs=1e-12)


def test_calibration_small_eps_limit():
    lo, hi = calibrate_thresholds(1e-9)
    assert lo == pytest.approx(0.0, abs=1e-8) and hi == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("eps", [0.0, -0.1, 1.0, 1.5, 0.7])
def test_calibration_domain(eps):
    with pytest.raises(ValueError):
        calibrate_thresholds(eps)


def test_bound_curve_rows():
    grid = [round(0.1 * i, 10) for i in range(1, 11)]
    rows = bound_curve(DYN, grid)
    assert len(rows) == 10
    assert rows[0].upper == pytest.approx(2.0)
    fixed = bound_curve(ClipConfig.grpo(), [0.01, 0.5, 1.0])
    assert {(r.lower, r.upper) for r in fixed} == {(0.8, 1.2)}
    assert bound_curve(DYN, []) == []


def test_q_one_row_equals_fixed_after_calibration():
    lo, hi = calibrate_thresholds(0.2)
    cfg = ClipConfig(mode=ClipMode.DYNAMIC_ADAPTIVE, eps_low=lo, eps_high=hi)
    assert bound_curve(cfg, [1.0])[0].lower == pytest.approx(fixed_bounds(ClipConfig.grpo()).lower, abs=1e-12)


def test_bounds_for_broadcasts_fixed_modes():
    b = bounds_for(np.array([0.1, 0.9]), ClipConfig.grpo())
    assert np.all(b.lower == 0.8) and np.all(b.upper == 1.2)


probs = st.floats(min_value=1e-9, max_value=1.0, allow_nan=False)
slack = st.floats(min_value=0.0, max_value=0.5, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(q=probs, lo=slack, hi=slack, r_max=st.floats(min_value=1.5, max_value=50))
def test_bound_ordering(q, lo, hi, r_max):
    b = dynamic_bounds(q, ClipConfig(eps_low=lo, eps_high=hi, r_max=r_max))
    assert 0 <= b.lower <= 1 <= b.upper <= r_max


@settings(max_examples=300, deadline=None)
@given(q1=probs, q2=probs, lo=slack, hi=slack)
def test_monotone_in_q(q1, q2, lo, hi):
    cfg = ClipConfig(eps_low=lo, eps_high=hi)
    a, b = sorted((q1, q2))
    ba, bb = dynamic_bounds(a, cfg), dynamic_bounds(b, cfg)
    assert ba.upper >= bb.upper
    assert ba.lower <= bb.lower


@settings(max_examples=300, deadline=None)
@given(q=st.floats(min_value=1e-3, max_value=1.0), eps=st.floats(min_value=0.01, max_value=0.45))
def test_dynamic_interval_widens_fixed_one(q, eps):
    lo, hi = calibrate_thresholds(eps)
    b = dynamic_bounds(q, ClipConfig(eps_low=lo, eps_high=hi))
    assert b.lower <= 1 - eps + 1e-12
    if q < 1 / (1 + hi) * (1 - 1e-9):
        assert b.upper > 1 + eps


@settings(max_examples=300, deadline=None)
@given(q=probs, lo=slack, hi=slack)
def test_probability_weighted_slack_is_tight(q, lo, hi):
    cfg = ClipConfig(eps_low=lo, eps_high=hi)
    b = dynamic_bounds(q, cfg)
    if 0.5 + 0.5 * math.sqrt(1 + 4 * hi / q) < cfg.r_max:
        assert abs((b.upper - 1) * b.upper * q) == pytest.approx(hi, abs=1e-9)
    if 1 - 4 * lo / q > 0:
        assert abs((b.lower - 1) * b.lower * q) == pytest.approx(lo, abs=1e-9)
