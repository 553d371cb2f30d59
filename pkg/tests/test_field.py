import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlmcmc.errors import ConfigurationError, InfeasibleActionError, StateValidityError
from rlmcmc.field import (
    ALL_ACTIONS,
    ActionId,
    ChannelRect,
    Segment,
    apply_action,
    channel_mask,
    feasible_mask,
    find_action,
    inverse_action,
    rasterize,
    rasterize_diagonal_target,
)
from rlmcmc.mesh import build_hierarchy

N = 20


@st.composite
def channels(draw, n=N):
    w = draw(st.integers(1, n))
    d = draw(st.integers(1, n))
    return ChannelRect(draw(st.integers(0, n - w)), draw(st.integers(0, n - d)), w, d)


def test_empty_state_is_background(g20):
    f = rasterize((), g20)
    assert np.all(f.kappa == 1.0)


def test_full_cover_is_contrast(g20):
    f = rasterize((ChannelRect(0, 0, 20, 20),), g20)
    assert np.all(f.kappa == 1000.0)


def test_overlap_is_a_union():
    g = build_hierarchy(100, 10)
    a = ChannelRect(10, 10, 10, 2)
    b = ChannelRect(18, 10, 10, 2)
    f = rasterize((a, b), g)
    assert int((f.kappa == 1000.0).sum()) == 36
    assert set(np.unique(f.kappa)) == {1.0, 1000.0}


def test_out_of_domain_names_agent(g20):
    with pytest.raises(StateValidityError) as err:
        rasterize((ChannelRect(0, 0, 2, 2), ChannelRect(19, 0, 3, 2)), g20)
    assert err.value.agent == 1


def test_shift_right():
    assert apply_action(ChannelRect(5, 5, 10, 2), ActionId.SHIFT_RIGHT, 100) == (6, 5, 10, 2)


def test_left_then_right_returns():
    c = ChannelRect(5, 5, 10, 2)
    assert apply_action(apply_action(c, ActionId.SHIFT_LEFT, 100), ActionId.SHIFT_RIGHT, 100) == c


def test_wall_is_infeasible():
    with pytest.raises(InfeasibleActionError):
        apply_action(ChannelRect(0, 5, 10, 2), ActionId.SHIFT_LEFT, 100)


def test_size_cannot_reach_zero():
    with pytest.raises(InfeasibleActionError):
        apply_action(ChannelRect(3, 3, 1, 4), ActionId.SQUEEZE_H, 20)


def test_inverse_pairs():
    assert inverse_action(ActionId.SHIFT_LEFT) == ActionId.SHIFT_RIGHT
    assert inverse_action(ActionId.SQUEEZE_H) == ActionId.STRETCH_H
    assert inverse_action(ActionId.SHIFT_DOWN) == ActionId.SHIFT_UP
    assert inverse_action(ActionId.STRETCH_V) == ActionId.SQUEEZE_V
    for a in ALL_ACTIONS:
        assert inverse_action(inverse_action(a)) == a
        assert inverse_action(a) != a


def test_every_action_reverses_on_interior_channel():
    c = ChannelRect(5, 5, 4, 4)
    for a in ALL_ACTIONS:
        assert apply_action(apply_action(c, a, N), inverse_action(a), N) == c


def test_each_action_changes_one_coordinate():
    c = ChannelRect(5, 5, 4, 4)
    for a in ALL_ACTIONS:
        diff = np.array(apply_action(c, a, N)) - np.array(c)
        assert np.count_nonzero(diff) == 1 and np.abs(diff).sum() == 1


@given(channels(), st.sampled_from(ALL_ACTIONS))
def test_reversibility_and_closure(c, a):
    mask = feasible_mask(c, N)
    if mask[int(a)]:
        c2 = apply_action(c, a, N)
        assert c2.is_valid(N)
        assert apply_action(c2, inverse_action(a), N) == c
        assert find_action(c, c2) == a
    else:
        with pytest.raises(InfeasibleActionError):
            apply_action(c, a, N)


@settings(max_examples=50)
@given(channels(), st.sampled_from(ALL_ACTIONS))
def test_rasterization_locality(c, a):
    g = build_hierarchy(N, 4)
    if not feasible_mask(c, N)[int(a)]:
        return
    c2 = apply_action(c, a, N)
    changed = rasterize((c,), g).kappa != rasterize((c2,), g).kappa
    sym = (channel_mask((c,), N) ^ channel_mask((c2,), N)).ravel()
    np.testing.assert_array_equal(changed, sym)


def test_feasible_mask_at_corner():
    mask = feasible_mask(ChannelRect(0, 0, 1, 1), N)
    allowed = {a for a, ok in zip(ALL_ACTIONS, mask) if ok}
    assert allowed == {ActionId.SHIFT_RIGHT, ActionId.SHIFT_UP, ActionId.STRETCH_H, ActionId.STRETCH_V}


def test_horizontal_segment_equals_rectangle(g20):
    h = g20.h
    seg = Segment(0.1, 8 * h, 0.3, 8 * h, h)
    diag = rasterize_diagonal_target([seg], g20)
    rect = rasterize((ChannelRect(2, 7, 4, 2),), g20)
    np.testing.assert_array_equal(diag.kappa, rect.kappa)


def test_diagonal_segment_matches_brute_force():
    g = build_hierarchy(100, 10)
    f = rasterize_diagonal_target([Segment(0.2, 0.2, 0.8, 0.8, 0.015)], g)
    count = 0
    for j in range(100):
        for i in range(100):
            px, py = (i + 0.5) / 100, (j + 0.5) / 100
            t = ((px - 0.2) + (py - 0.2)) / np.sqrt(2)
            dist = abs((px - 0.2) - (py - 0.2)) / np.sqrt(2)
            if -1e-12 <= t <= 0.6 * np.sqrt(2) + 1e-12 and dist <= 0.015 + 1e-12:
                count += 1
    assert int((f.kappa == 1000.0).sum()) == count
    assert count > 0


def test_empty_segments_are_background(g20):
    assert np.all(rasterize_diagonal_target([], g20).kappa == 1.0)


def test_degenerate_segment_rejected(g20):
    with pytest.raises(ConfigurationError):
        rasterize_diagonal_target([Segment(0.3, 0.3, 0.3, 0.3, 0.05)], g20)
    with pytest.raises(ConfigurationError):
        rasterize_diagonal_target([Segment(0.3, 0.3, 1.3, 0.3, 0.05)], g20)
