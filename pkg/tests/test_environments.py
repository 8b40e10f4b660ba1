import numpy as np
import pytest

from seqeq import (AllocationHistory, ContractViolation, OracleUnavailable,
                   SequentialSales, SplitAward, analytical_sequential_sales,
                   analytical_split_award, init_truthful, l2_distance_values,
                   make_environment)
from seqeq.beliefs import (_generic_enumerate, compute_level_tables,
                           enumerate_events, make_root)
from seqeq.solver import build_tilings
from seqeq.tiling import Tiling
from seqeq.game import TypeSpace


# ---- sequential sales rules -------------------------------------------------

def test_sales_constructor_validation():
    with pytest.raises(ContractViolation):
        SequentialSales(3, 3)
    with pytest.raises(ContractViolation):
        SequentialSales(3, 1, "third")


def test_sales_second_price_outcome():
    env = SequentialSales(3, 2, "second")
    h = AllocationHistory()
    codes, payments = env.outcome_batch(h, np.array([[[0.2], [0.9], [0.5]]]))
    assert codes[0] == 1
    assert payments[0, 1] == pytest.approx(0.5)
    assert payments[0, 0] == payments[0, 2] == 0.0
    # round 2: the winner is out; remaining pair plays second price
    h2 = h.child(1)
    codes2, payments2 = env.outcome_batch(h2, np.array([[[0.2], [9.9], [0.5]]]))
    assert codes2[0] == 2 and payments2[0, 2] == pytest.approx(0.2)
    assert list(env.active_mask(h2)) == [True, False, True]


def test_sales_single_active_bidder_pays_zero():
    env = SequentialSales(2, 1, "second")
    h = AllocationHistory()
    codes, payments = env.outcome_batch(h.child(0) if False else h,
                                        np.array([[[0.3], [0.0]]]))
    assert codes[0] == 0 and payments[0, 0] == pytest.approx(0.0)


def test_sales_event_price_identifies_outcome():
    env = SequentialSales(3, 2, "first")
    codes = np.array([1, 2])
    payments = np.array([[0.0, 0.4, 0.0], [0.0, 0.0, 0.7]])
    assert np.allclose(env.event_price_batch(codes, payments), [0.4, 0.7])
    assert env.event_price(1, payments[0]) == pytest.approx(0.4)


# ---- split award rules ------------------------------------------------------

def test_split_award_round1_outcomes():
    env = SplitAward(3, cost_share=0.2)
    h = AllocationHistory()
    # split wins when twice the best split bid is at most the best sole bid
    bids = np.array([[[0.5, 1.8], [0.4, 1.5], [0.6, 0.9]]])
    codes, payments = env.outcome_batch(h, bids)
    assert codes[0] == 1  # 2 * 0.4 <= 0.9
    assert payments[0, 1] == pytest.approx(-0.4)
    # sole award otherwise, code offset by n, game ends
    bids2 = np.array([[[0.5, 1.8], [0.5, 1.5], [0.6, 0.9]]])
    codes2, payments2 = env.outcome_batch(h, bids2)
    assert codes2[0] == 3 + 2 - 3 + 3  # bidder 2's sole award -> code n + 2
    assert payments2[0, 2] == pytest.approx(-0.9)
    assert env.is_terminal(h.child(int(codes2[0])))
    assert not env.is_terminal(h.child(1))


def test_split_award_round2_roles_and_utilities():
    env = SplitAward(3, cost_share=0.2)
    h = AllocationHistory((1,))
    assert env.role_key(1, h) == "winner" and env.role_key(0, h) == "loser"
    codes, payments = env.outcome_batch(h, np.array([[[0.5], [0.45], [0.6]]]))
    assert codes[0] == 1 and payments[0, 1] == pytest.approx(-0.45)
    # winner of round 1 completing the contract bears cost (1 - C) theta
    u = env.utility_batch(1, 1.5, h, codes, payments)
    assert u[0] == pytest.approx(-0.8 * 1.5 + 0.45)
    u0 = env.utility_batch(0, 1.5, h, codes, payments)
    assert u0[0] == pytest.approx(0.0)


def test_make_environment_registry():
    env = make_environment("sequential_sales", n=3, k_goods=2)
    assert isinstance(env, SequentialSales)
    env2 = make_environment("split_award", n=3, cost_share=0.2)
    assert isinstance(env2, SplitAward)
    with pytest.raises(ContractViolation):
        make_environment("double_dutch")


# ---- analytical oracles -----------------------------------------------------

def test_sales_oracle_formulas():
    # first price round k: (N - K) / (N - k + 1) theta
    assert analytical_sequential_sales(0.9, 1, 3, 2, "first") == pytest.approx(0.3)
    assert analytical_sequential_sales(0.9, 2, 3, 2, "first") == pytest.approx(0.45)
    # second price: (N - K) / (N - k) theta, truthful in the last round
    assert analytical_sequential_sales(0.9, 1, 3, 2, "second") == pytest.approx(0.45)
    assert analytical_sequential_sales(0.9, 2, 3, 2, "second") == pytest.approx(0.9)
    assert analytical_sequential_sales(1.0, 1, 5, 3, "second") == pytest.approx(0.5)
    assert analytical_sequential_sales(1.0, 2, 5, 3, "second") == pytest.approx(2.0 / 3.0)
    with pytest.raises(ContractViolation):
        analytical_sequential_sales(0.5, 3, 3, 2, "first")


def test_split_award_oracle_values():
    env = SplitAward(3, cost_share=0.2, theta_lo=1.0, theta_hi=2.0)
    # round-2 winner: (1 - C) theta
    assert analytical_split_award(1.5, "round2_winner", env) == pytest.approx(1.2)
    # round-2 loser at the top type: no information rent left
    assert analytical_split_award(2.0, "round2_loser", env) == pytest.approx(0.4)
    # loser bid = C theta + C E[min residual], here with n = 3:
    # C theta + C * int_theta^hi (1-F)/(1-F(theta)) = 0.2 theta + 0.1 (2 - theta)
    assert analytical_split_award(1.0, "round2_loser", env) == pytest.approx(0.3)
    assert analytical_split_award(1.5, "round2_loser", env) == pytest.approx(0.35)
    # round-1 split bid at the top type equals the loser bid limit
    assert analytical_split_award(2.0, "round1", env) == pytest.approx(0.4)
    lo_bid = analytical_split_award(1.0, "round1", env)
    assert 0.3 < lo_bid < 0.4  # averages the loser bids of higher types


def test_split_award_oracle_regime_guard():
    with pytest.raises(OracleUnavailable):
        analytical_split_award(1.5, "round1", SplitAward(2, cost_share=0.2))
    with pytest.raises(OracleUnavailable):
        analytical_split_award(1.5, "round1", SplitAward(3, cost_share=0.5))


# ---- event enumerators vs. the generic product oracle ----------------------

def _mask_dict(events):
    out = {}
    for ev in events:
        if not ev.on_path:
            continue
        masks = tuple(None if m is None else m.tobytes() for m in ev.masks)
        out[ev.key] = masks
    return out


@pytest.mark.parametrize("payment", ["first", "second"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sales_enumerator_matches_generic(payment, seed):
    rng = np.random.default_rng(seed)
    env = SequentialSales(3, 2, payment)
    tilings = build_tilings(env, 5)
    profile = init_truthful(env, tilings, None)
    root = make_root(env, tilings)
    # random monotone bids so levels collide sometimes
    from seqeq.tiling import enforce_monotone
    bids = enforce_monotone(np.sort(rng.random((5, 1)), axis=0) * rng.random())
    for i in range(3):
        profile[i].set_bids(root, bids if i == 0 else np.round(bids, 1))
    tables = compute_level_tables(env, root, profile)
    fast = env.enumerate_round_events(root, tables)
    slow = _generic_enumerate(env, root, tables)
    assert _mask_dict(fast) == _mask_dict(slow)


@pytest.mark.parametrize("seed", [0, 1])
def test_split_enumerator_matches_generic(seed):
    rng = np.random.default_rng(seed)
    env = SplitAward(3, cost_share=0.2)
    tilings = build_tilings(env, 4)
    profile = init_truthful(env, tilings, None)
    root = make_root(env, tilings)
    from seqeq.tiling import enforce_monotone
    for i in range(3):
        base = profile[i].bids_at(root)
        noisy = np.clip(base * (1 + 0.2 * (rng.random(base.shape) - 0.5)), 0, 4)
        profile[i].set_bids(root, enforce_monotone(noisy))
    tables = compute_level_tables(env, root, profile)
    fast = env.enumerate_round_events(root, tables)
    slow = _generic_enumerate(env, root, tables)
    assert _mask_dict(fast) == _mask_dict(slow)


# ---- L2 helper --------------------------------------------------------------

def test_l2_distance_values_exact_cases():
    t = Tiling.uniform(TypeSpace([0.0], [1.0]), 4)
    vals = np.array([0.1, 0.1, 0.1, 0.1])
    assert l2_distance_values(vals, lambda x: np.full_like(x, 0.1), t) == pytest.approx(0.0)
    # constant 0 vs. identity on [0,1): L2 = sqrt(1/3)
    zero = np.zeros(4)
    assert l2_distance_values(zero, lambda x: x, t) == pytest.approx(np.sqrt(1 / 3), rel=1e-6)
    # masked integration renormalizes to the support
    mask = np.array([True, True, False, False])
    assert l2_distance_values(zero, lambda x: np.ones_like(x), t, mask) == pytest.approx(1.0)
