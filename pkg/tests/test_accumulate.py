import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowacc.accumulate import (
    AccumConfig,
    EventKind,
    OverflowClass,
    Policy,
    a2q_l1_bound,
    accumulate,
    classify,
    dot_exact,
    exists_safe_order,
    fits,
    overflow_threshold,
    sorted_dot,
    sorted_dot_tiled,
    wrap,
)

SAT4 = AccumConfig(p=4, policy=Policy.SATURATE)
SORT4 = AccumConfig(p=4, policy=Policy.SORTED)


def brute_safe_order(products, p):
    """Plain permutation scan, independent of the pruned search."""
    lo, hi = -(1 << (p - 1)), (1 << (p - 1)) - 1
    for perm in itertools.permutations(products):
        if all(lo <= s <= hi for s in itertools.accumulate(perm)):
            return True
    return not products


def test_dot_exact_by_hand():
    t = dot_exact([3, -2], [4, 5])
    assert t.products == [12, -10]
    assert t.final == 2
    assert t.running == [12, 2]


def test_dot_exact_zero_weights():
    t = dot_exact([0] * 7, [5, -3, 2, 7, 1, 1, -8], p=4)
    assert t.final == 0 and not t.events


def test_dot_exact_length_mismatch():
    with pytest.raises(ValueError):
        dot_exact([1, 2], [1])


def test_threshold_length_for_8bit_32bit():
    k = overflow_threshold(8, 32)
    assert k == 65536
    # conservative: below the threshold even the largest 8-bit product,
    # (-128) * (-128) = 2**14, cannot overflow
    assert fits(128 * 128 * (k - 1), 32)


def test_overflow_threshold_values():
    assert overflow_threshold(8, 16) == 1
    assert overflow_threshold(4, 12) == 16


def test_saturate_by_hand():
    result, events = accumulate([5, 4, -3, -4], SAT4)
    assert result == 0
    assert len(events) == 1
    assert (events[0].position, events[0].value, events[0].kind) == (1, 9, EventKind.POSITIVE)


def test_wrap_by_hand():
    result, events = accumulate([7, 1], AccumConfig(p=4, policy=Policy.WRAP))
    assert result == -8 and len(events) == 1


def test_empty_accumulation():
    for pol in Policy:
        cfg = AccumConfig(p=4, policy=pol, tile=2)
        assert accumulate([], cfg) == (0, [])


def test_exact_policy_logs_but_keeps_value():
    result, events = accumulate([7, 7], AccumConfig(p=4))
    assert result == 14 and len(events) == 1


def test_first_load_counts():
    _, events = accumulate([20], SAT4)
    assert len(events) == 1


def test_order_argument():
    result, events = accumulate([5, 4, -3, -4], SAT4, order=[0, 3, 1, 2])
    assert result == 2 and not events
    with pytest.raises(ValueError):
        accumulate([1, 2], SAT4, order=[0, 0])


def test_sorted_by_hand():
    res = sorted_dot([5, 4, -3, -4], SORT4)
    assert res.result == 2
    assert res.events == []


def test_sorted_round_count():
    # round 1 pairs (5,-4) and (4,-3) -> [1, 1]; all positive so no second round
    assert sorted_dot([5, 4, -3, -4], SORT4).rounds == 1


def test_sorted_same_sign_and_single():
    assert sorted_dot([1, 2, 3], AccumConfig(p=8, policy=Policy.SORTED)).rounds == 0
    assert sorted_dot([5], SORT4).result == 5
    assert sorted_dot([], SORT4).result == 0


def test_sorted_clip_variant():
    cfg = AccumConfig(p=4, policy=Policy.SORTED, clip=True)
    res = sorted_dot([5, 4], cfg)
    assert res.result == 7 and len(res.events) == 1


def test_tiled_single_tile_matches_sorted():
    rng = np.random.default_rng(0)
    for _ in range(200):
        prods = rng.integers(-40, 40, size=rng.integers(0, 30)).tolist()
        a = sorted_dot(prods, AccumConfig(p=6, policy=Policy.SORTED))
        b = sorted_dot_tiled(prods, AccumConfig(p=6, policy=Policy.SORTED_TILED, tile=64))
        assert (a.result, a.events) == (b.result, b.events)


def test_tile_of_one_is_sorted_pass_over_raw_products():
    rng = np.random.default_rng(1)
    for _ in range(200):
        prods = rng.integers(-7, 8, size=rng.integers(1, 20)).tolist()
        a = sorted_dot(prods, AccumConfig(p=8, policy=Policy.SORTED))
        b = sorted_dot_tiled(prods, AccumConfig(p=8, policy=Policy.SORTED_TILED, tile=1))
        assert b.tile_results == prods
        assert (a.result, a.events) == (b.result, b.events)


def test_classify_examples():
    assert classify([7, 7, 7], 4) is OverflowClass.PERSISTENT
    assert classify(dot_exact([5, 4, -3, -4], [1, 1, 1, 1]), 4) is OverflowClass.TRANSIENT
    assert classify([1, 1], 8) is OverflowClass.NONE


def test_safe_order_examples():
    assert not exists_safe_order([7, 7, 7], 4)
    assert exists_safe_order([5, 4, -3, -4], 4)
    assert exists_safe_order([3], 4)
    with pytest.raises(ValueError):
        exists_safe_order(list(range(11)), 8)


def test_a2q_bound_values():
    assert a2q_l1_bound(8, 16) == 255.9921875
    assert a2q_l1_bound(8, 32) == 2147483647 / 128


def test_wrap_helper():
    assert wrap(8, 4) == -8
    assert wrap(-9, 4) == 7
    assert wrap(3, 4) == 3


products_st = st.lists(st.integers(-(2**14), 2**14), max_size=40)


@given(products_st, st.integers(4, 24), st.permutations(range(40)))
def test_exact_sum_is_order_invariant(prods, p, perm):
    order = [i for i in perm if i < len(prods)]
    result, _ = accumulate(prods, AccumConfig(p=p), order)
    assert result == dot_exact(prods, [1] * len(prods)).final


@given(products_st, st.integers(4, 24))
def test_sorted_preserves_exact_sum(prods, p):
    res = sorted_dot(prods, AccumConfig(p=p, policy=Policy.SORTED))
    assert res.result == sum(prods)
    assert res.rounds <= 8


@given(st.lists(st.integers(-100, 100), max_size=60), st.integers(2, 12))
def test_sorted_rounds_shrink_list(prods, p):
    # without the cap the loop still terminates: each round removes >= 1 value
    res = sorted_dot(prods, AccumConfig(p=p, policy=Policy.SORTED, max_rounds=10**6))
    assert res.result == sum(prods)
    assert res.rounds <= max(len(prods) - 1, 0)


def test_round_count_can_exceed_log_bound():
    prods = [-100] + [1] * 20
    res = sorted_dot(prods, AccumConfig(p=16, policy=Policy.SORTED, max_rounds=10**6))
    assert res.rounds == 20


@given(st.lists(st.integers(1, 50), min_size=1, max_size=30), st.integers(3, 10))
def test_final_phase_overflow_is_sticky(prods, p):
    sign = 1 if len(prods) % 2 else -1
    prods = [sign * v for v in prods]
    res = sorted_dot(prods, AccumConfig(p=p, policy=Policy.SORTED))
    if res.events:
        first = res.events[0].position
        assert [e.position for e in res.events] == list(range(first, len(prods)))


@given(products_st, st.integers(4, 24))
def test_saturate_and_wrap_against_wide_oracle(prods, p):
    lo, hi = -(1 << (p - 1)), (1 << (p - 1)) - 1
    acc, n_events = 0, 0
    for v in prods:
        acc += v
        if not lo <= acc <= hi:
            n_events += 1
            acc = max(lo, min(hi, acc))
    result, events = accumulate(prods, AccumConfig(p=p, policy=Policy.SATURATE))
    assert (result, len(events)) == (acc, n_events)
    assert lo <= result <= hi

    result, _ = accumulate(prods, AccumConfig(p=p, policy=Policy.WRAP))
    assert result == ((sum(prods) + (1 << (p - 1))) % (1 << p)) - (1 << (p - 1))


@given(st.lists(st.integers(-8, 7), max_size=6))
@settings(max_examples=300)
def test_classification_soundness_small(prods):
    cls = classify(prods, 4)
    safe = exists_safe_order(prods, 4)
    assert safe == brute_safe_order(prods, 4)
    assert (cls is OverflowClass.PERSISTENT) == (not safe)
    if cls is OverflowClass.NONE:
        assert fits(sum(prods), 4)


@given(products_st, st.integers(4, 24))
def test_events_match_resimulation(prods, p):
    lo, hi = -(1 << (p - 1)), (1 << (p - 1)) - 1
    _, events = accumulate(prods, AccumConfig(p=p))
    running = list(itertools.accumulate(prods))
    assert [e.position for e in events] == [i for i, s in enumerate(running) if not lo <= s <= hi]


def test_resolve_policy_recovers_transients_only():
    cfg = AccumConfig(p=4, policy=Policy.RESOLVE)
    assert accumulate([5, 4, -3, -4], cfg)[0] == 2
    assert accumulate([7, 7, -1], cfg)[0] == 6  # persistent: saturated 7 + 7 -> 7, then 6
