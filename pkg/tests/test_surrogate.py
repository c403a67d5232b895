import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcpo.clipping import ClipBounds, ClipConfig, ClipMode, DualClip
from dcpo.surrogate import (
    Method,
    Response,
    RolloutGroup,
    clipped_term,
    flatten,
    kl_penalty,
    kl_per_token,
    loss_dapo,
    loss_dcpo,
    loss_grpo,
    loss_gspo,
    objective,
    sequence_ratio,
    token_ratios,
)

FIX = ClipBounds(0.8, 1.2)


def unit_response(adv, length, logp=-1.0, **kw):
    lp = np.full(length, logp)
    return Response(np.zeros(length, int), lp, advantage=adv, **kw)


def group(*responses, pid="p"):
    return RolloutGroup(pid, list(responses))


def test_token_ratios_examples():
    lp = np.log([0.5, 0.2, 0.9])
    np.testing.assert_array_equal(token_ratios(lp, lp), 1.0)
    np.testing.assert_allclose(token_ratios(lp + math.log(1.5), lp), 1.5, rtol=1e-14)
    rng = np.random.default_rng(0)
    a, b = -rng.random(50) * 5, -rng.random(50) * 5
    np.testing.assert_allclose(token_ratios(a, b), np.exp(a - b), rtol=1e-12)


def test_token_ratios_errors():
    with pytest.raises(FloatingPointError):
        token_ratios([np.nan], [0.0])
    with pytest.raises(FloatingPointError):
        token_ratios([-np.inf], [-1.0])
    with pytest.raises(ValueError):
        token_ratios([0.0, 0.0], [0.0])


def test_sequence_ratio_examples():
    old = np.log([0.1, 0.5])
    assert sequence_ratio(old, old) == 1.0
    assert sequence_ratio(old + np.log([4.0, 1.0]), old) == pytest.approx(2.0, rel=1e-14)
    assert sequence_ratio([math.log(0.3)], [math.log(0.2)]) == pytest.approx(1.5, rel=1e-14)
    with pytest.raises(ValueError):
        sequence_ratio([], [])


@pytest.mark.parametrize(
    "r, adv, r_max, value, flag",
    [
        (1.0, 1.0, None, 1.0, False),
        (1.5, 1.0, None, 1.2, True),
        (0.5, -1.0, None, -0.8, True),
        (12.0, -1.0, 10.0, -10.0, True),
        (12.0, 1.0, 10.0, 1.2, True),
        (1.1, -1.0, None, -1.1, False),
        (0.5, 1.0, None, 0.5, False),
        (1.5, 0.0, None, 0.0, False),
    ],
)
def test_clipped_term_examples(r, adv, r_max, value, flag):
    v, f = clipped_term(r, adv, FIX, r_max)
    assert v == pytest.approx(value, abs=1e-15)
    assert f is flag


def test_clipped_term_rejects_negative_ratio():
    with pytest.raises(ValueError):
        clipped_term(-0.1, 1.0, FIX)


def test_grpo_examples():
    cfg = ClipConfig.grpo()
    assert loss_grpo([group(unit_response(0.7, 3))], cfg).objective == pytest.approx(0.7, abs=1e-15)
    res = loss_grpo([group(unit_response(1.0, 2), unit_response(-1.0, 4))], cfg)
    assert res.objective == 0.0
    same = unit_response(0.5, 3, logp_ref=np.full(3, -1.0))
    res = loss_grpo([group(same)], cfg, beta=0.5)
    assert res.kl == 0.0 and res.objective == pytest.approx(0.5, abs=1e-15)


def test_grpo_beta_needs_reference():
    with pytest.raises(ValueError):
        loss_grpo([group(unit_response(1.0, 2))], ClipConfig.grpo(), beta=0.1)


def test_tlm_worked_example_exact():
    g = [group(unit_response(1.0, 500), unit_response(0.5, 1500))]
    res = loss_dapo(g, ClipConfig.dapo())
    assert res.contributions.tolist() == [0.25, 0.375]
    assert res.objective == 0.625
    assert loss_dapo([group(unit_response(0.3, 7))], ClipConfig.dapo()).objective == pytest.approx(0.3, abs=1e-15)


def test_otm_worked_example_exact():
    g = [group(unit_response(1.0, 500), unit_response(0.5, 1500))]
    res = loss_dcpo(g, ClipConfig.dcpo())
    assert res.contributions.tolist() == [1.0, 0.5]
    assert res.objective == 1.5


def test_dapo_equals_grpo_for_equal_lengths():
    rng = np.random.default_rng(1)
    for _ in range(20):
        G, L = int(rng.integers(2, 6)), int(rng.integers(1, 6))
        resp = [Response(np.zeros(L, int), -rng.random(L), -rng.random(L), advantage=rng.normal()) for _ in range(G)]
        cfg = ClipConfig(mode=ClipMode.FIXED_SYMMETRIC, eps=0.2, dual_clip=DualClip.NONE)
        a = loss_dapo([group(*resp)], cfg).objective
        b = loss_grpo([group(*resp)], cfg).objective
        assert a == pytest.approx(b, rel=1e-12, abs=1e-14)


def test_gspo_examples():
    cfg = ClipConfig.gspo()
    old = np.log([0.4, 0.6])
    res = loss_gspo([group(Response([0, 1], old, advantage=1.0), Response([0, 1], old, advantage=-1.0))], cfg)
    assert res.objective == 0.0 and res.clipped_tokens == 0
    # s = 1.001 on a three-token response
    shift = math.log(1.001)
    r = Response([0, 1, 2], np.full(3, -1.0), np.full(3, -1.0 + shift), advantage=1.0)
    res = loss_gspo([group(r)], cfg)
    assert res.objective == pytest.approx(1.0004, abs=1e-12)
    assert res.clipped_responses == 1 and res.clipped_tokens == 3
    assert res.extra["sequence_ratio"][0] == pytest.approx(1.001, rel=1e-12)
    np.testing.assert_array_equal(res.dlogp, 0.0)
    # below the lower bound with negative advantage: min picks the unclipped branch
    s = 0.99
    r = Response([0, 1], np.full(2, -1.0), np.full(2, -1.0 + math.log(s)), advantage=-1.0)
    res = loss_gspo([group(r)], cfg)
    assert res.objective == pytest.approx(-0.9997, abs=1e-12)
    assert res.clipped_responses == 1


def test_gspo_whole_response_flagging():
    rng = np.random.default_rng(2)
    resp = []
    for _ in range(6):
        L = int(rng.integers(1, 8))
        old = -rng.random(L)
        resp.append(Response(np.zeros(L, int), old, old + rng.normal(0, 0.01, L), advantage=rng.normal()))
    res = loss_gspo([group(*resp)], ClipConfig.gspo())
    fb = flatten([group(*resp)])
    per_resp = np.bincount(fb.token_resp, weights=res.clipped.astype(float))
    for count, length in zip(per_resp, fb.resp_len):
        assert count in (0, length)
    assert res.clipped_responses == int(np.count_nonzero(per_resp))


def test_kl_examples():
    lp = np.log([0.3, 0.5])
    assert kl_penalty(lp, lp) == 0.0
    val = kl_per_token(np.log([0.25]), np.log([0.5]))
    assert val[0] == pytest.approx(2 - math.log(2) - 1, abs=1e-15)
    assert val[0] == pytest.approx(0.3069, abs=1e-4)
    with pytest.raises(FloatingPointError):
        kl_penalty([np.nan], [0.0])


def test_kl_non_negative_random_pairs():
    rng = np.random.default_rng(4)
    a, b = -rng.random(10_000) * 8, -rng.random(10_000) * 8
    assert np.all(kl_per_token(a, b) >= 0)


def test_ratio_one_neutrality_all_modes():
    rng = np.random.default_rng(5)
    resp = [Response(np.zeros(L, int), -rng.random(L) * 3, advantage=rng.normal(), logp_ref=-rng.random(L))
            for L in (2, 5, 3, 4)]
    g = [group(*resp)]
    advs = np.array([r.advantage for r in resp])
    lens = np.array([len(r) for r in resp])
    for method in Method:
        res = objective(method, g, method.default_clip())
        assert res.clipped_tokens == 0
        expected = {
            Method.GRPO: advs.mean(),
            Method.GSPO: advs.mean(),
            Method.DAPO: (advs * lens).sum() / lens.sum(),
            Method.DCPO: advs.sum(),
        }[method]
        assert res.objective == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_objective_mode_checks():
    g = [group(unit_response(1.0, 2))]
    with pytest.raises(ValueError):
        objective("grpo", g, ClipConfig.dcpo())
    with pytest.raises(ValueError):
        objective("dcpo", g, ClipConfig.grpo())
    with pytest.raises(ValueError):
        objective("gspo", g, ClipConfig.dapo())
    with pytest.raises(ValueError):
        objective("ppo", g, ClipConfig.grpo())


def test_multi_group_averaging():
    g1, g2 = group(unit_response(1.0, 2), pid="a"), group(unit_response(0.2, 3), unit_response(0.4, 1), pid="b")
    cfg = ClipConfig.grpo()
    assert loss_grpo([g1, g2], cfg).objective == pytest.approx((1.0 + 0.3) / 2, abs=1e-15)
    assert loss_dcpo([g1, g2], ClipConfig.dcpo()).objective == pytest.approx(1.6, abs=1e-15)
    assert loss_dapo([g1, g2], ClipConfig.dapo()).objective == pytest.approx((2 + 0.6 + 0.4) / 6, abs=1e-15)


def test_otm_slm_identity_exact():
    rng = np.random.default_rng(6)
    cfg = ClipConfig(mode=ClipMode.FIXED_SYMMETRIC, eps=0.2, dual_clip=DualClip.NONE)
    for _ in range(100):
        G = int(2 ** rng.integers(0, 5))
        L = int(rng.integers(1, 9))
        resp = [Response(np.zeros(L, int), -rng.random(L), -rng.random(L), advantage=rng.normal()) for _ in range(G)]
        g = [group(*resp)]
        assert loss_dcpo(g, cfg).objective == G * loss_grpo(g, cfg).objective


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        loss_dapo([], ClipConfig.dapo())
    with pytest.raises(ValueError):
        Response([], [])


@settings(max_examples=300, deadline=None)
@given(
    r1=st.floats(0.0, 15.0),
    r2=st.floats(0.0, 15.0),
    adv=st.floats(-3.0, 3.0).filter(lambda a: a != 0),
    cap=st.sampled_from([None, 10.0]),
)
def test_clip_monotonicity(r1, r2, adv, cap):
    a, b = sorted((r1, r2))
    va, _ = clipped_term(a, adv, FIX, cap)
    vb, _ = clipped_term(b, adv, FIX, cap)
    if adv > 0:
        assert vb >= va - 1e-12
        if a >= FIX.upper:
            assert va == pytest.approx(vb, abs=1e-12)
    else:
        if b <= FIX.lower:
            assert va == pytest.approx(vb, abs=1e-12)
        if a >= FIX.lower:
            assert vb <= va + 1e-12


@settings(max_examples=300, deadline=None)
@given(r=st.floats(0.01, 14.0), adv=st.floats(-3.0, 3.0), cap=st.sampled_from([None, 10.0]))
def test_flag_iff_zero_slope(r, adv, cap):
    h = 1e-6
    v, flag = clipped_term(r, adv, FIX, cap)
    lo, _ = clipped_term(max(r - h, 0.0), adv, FIX, cap)
    hi, _ = clipped_term(r + h, adv, FIX, cap)
    near = min(abs(r - FIX.lower), abs(r - FIX.upper), abs(r - 10.0)) < 1e-5
    if adv == 0 or near:
        return
    slope = (hi - lo) / (2 * h)
    if flag:
        assert abs(slope) < 1e-6
    else:
        assert slope == pytest.approx(adv, rel=1e-5)
