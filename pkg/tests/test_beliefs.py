import numpy as np
import pytest

from seqeq import (Belief, OffPathOutcome, RoundOutcome, SequentialSales,
                   bayes_update, class_signature, enumerate_history_classes,
                   finite_belief_choice, init_truthful, sample_types)
from seqeq.beliefs import (build_level_table, compute_level_tables,
                           enumerate_events, make_root, resolve_event)
from seqeq.solver import build_tilings
from seqeq.tiling import Tiling
from seqeq.game import TypeSpace


def _truthful_sales(payment="first", cells=5, n=3, k=2):
    env = SequentialSales(n, k, payment)
    tilings = build_tilings(env, cells)
    profile = init_truthful(env, tilings, None)
    return env, profile, make_root(env, tilings)


def test_belief_mask_and_probs():
    t = Tiling.uniform(TypeSpace([0.0], [1.0]), 4)
    b = Belief(t, None, np.array([True, True, False, False]))
    assert np.allclose(b.tile_probs(), [0.5, 0.5, 0.0, 0.0])
    b2 = b.truncate(np.array([False, True, True, True]))
    assert np.allclose(b2.tile_probs(), [0.0, 1.0, 0.0, 0.0])
    with pytest.raises(Exception):
        Belief(t, None, np.zeros(4, dtype=bool))


def test_belief_sampling_stays_on_support():
    t = Tiling.uniform(TypeSpace([0.0], [1.0]), 5)
    b = Belief(t, None, np.array([True, True, True, True, False]))
    rng = np.random.default_rng(0)
    x = b.sample(rng, 20000)
    assert x.max() < 0.8 and x.min() >= 0.0
    assert abs(x.mean() - 0.4) < 0.01
    tiles = b.sample_tiles_stratified(rng, 1000)
    counts = np.bincount(tiles, minlength=5)
    assert np.array_equal(counts, [250, 250, 250, 250, 0])


def test_level_table_groups_equal_bids():
    bids = np.array([[0.1], [0.1], [0.3], [0.2], [0.9]])
    support = np.array([True, True, True, True, False])
    lt = build_level_table(bids, support, 0)
    assert lt.n_levels == 3
    assert np.allclose(lt.coord, [0.1, 0.2, 0.3])
    assert np.array_equal(lt.tile_level, [0, 0, 2, 1, -1])


def test_first_price_winner_update():
    # truthful grid bids; after a first-price win by bidder 0 at 0.8 the
    # public belief pins bidder 0 to its bid's tile and caps the losers below
    env, profile, root = _truthful_sales("first")
    events = enumerate_events(env, root, profile)
    ev = next(e for e in events if e.alloc_code == 0 and e.price == pytest.approx(0.8))
    post = bayes_update(env, profile, root,
                        RoundOutcome(0, np.array([0.8, 0.0, 0.0])))
    assert np.array_equal(post[0].mask, [False, False, False, False, True])
    # higher-index losers may share the winning level (ties go to index 0),
    # so their support is capped at the winner's level inclusively
    for j in (1, 2):
        assert np.array_equal(post[j].mask, [True, True, True, True, True])
    assert ev.on_path
    # a win by the highest-index bidder excludes its level from the losers
    post2 = bayes_update(env, profile, root,
                         RoundOutcome(2, np.array([0.0, 0.0, 0.8])))
    for j in (0, 1):
        assert np.array_equal(post2[j].mask, [True, True, True, True, False])


def test_off_path_price_raises_then_rounds_down():
    env, profile, root = _truthful_sales("first")
    off = RoundOutcome(0, np.array([0.7, 0.0, 0.0]))  # 0.7 is between levels
    with pytest.raises(OffPathOutcome):
        bayes_update(env, profile, root, off)
    ev = resolve_event(env, profile, root, off)
    assert ev.price == pytest.approx(0.6)
    post = finite_belief_choice(env, profile, root, off)
    assert np.array_equal(post[0].mask, [False, False, False, True, False])


def test_resolve_event_clamps_at_extremes():
    env, profile, root = _truthful_sales("first")
    below = resolve_event(env, profile, root, RoundOutcome(1, np.array([0.0, -0.5, 0.0])))
    assert below.price == pytest.approx(0.0)
    above = resolve_event(env, profile, root, RoundOutcome(1, np.array([0.0, 7.0, 0.0])))
    assert above.price == pytest.approx(0.8)


def test_second_price_loser_update():
    env, profile, root = _truthful_sales("second")
    # bidder 0 wins at second price 0.6: winner support is above the price,
    # the price-setting losers are at or below it
    post = bayes_update(env, profile, root,
                        RoundOutcome(0, np.array([0.6, 0.0, 0.0])))
    assert post[0].mask[3] or post[0].mask[4]
    assert not post[0].mask[0]
    for j in (1, 2):
        assert post[j].mask[3] and not post[j].mask[4]


def test_class_graph_closed_and_finite():
    env, profile, root = _truthful_sales("second", cells=4)
    index = enumerate_history_classes(env, profile)
    assert index.root_id == root.id
    for cls in index.decision_classes():
        if cls.round >= env.n_rounds - 1:
            continue
        assert cls.events is not None
        for ev in cls.events:
            assert ev.succ_id in index.classes  # closure
    rounds = {c.round for c in index.classes.values()}
    assert rounds == {0, 1}


def test_class_ids_content_addressed():
    env, profile, _ = _truthful_sales("second", cells=4)
    i1 = enumerate_history_classes(env, profile)
    i2 = enumerate_history_classes(env, profile)
    assert set(i1.classes) == set(i2.classes)


def test_class_signature_symmetric():
    env, profile, root = _truthful_sales("second")
    sigs = {class_signature(env, root, i) for i in range(3)}
    assert len(sigs) == 1


def test_compute_level_tables_skips_inactive():
    env, profile, root = _truthful_sales("second", cells=4)
    index = enumerate_history_classes(env, profile)
    ev = next(e for e in index[index.root_id].events if e.alloc_code == 1)
    succ = index[ev.succ_id]
    tables = compute_level_tables(env, succ, profile)
    assert tables[1] is None  # the round-1 winner has exited
    assert tables[0] is not None and tables[2] is not None


def test_sample_types_shape():
    env, profile, root = _truthful_sales("second")
    x = sample_types(root.beliefs, 500, np.random.default_rng(1))
    assert x.shape == (500, 3)
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_event_binning_caps_and_preserves_support():
    tilings = build_tilings(SequentialSales(3, 2, "second"), 20)
    fine_env = SequentialSales(3, 2, "second")
    coarse_env = SequentialSales(3, 2, "second", event_bins=4)
    fine = init_truthful(fine_env, tilings, None)
    coarse = init_truthful(coarse_env, tilings, None)
    root_f = make_root(fine_env, tilings)
    root_c = make_root(coarse_env, tilings)
    ev_f = enumerate_events(fine_env, root_f, fine)
    ev_c = enumerate_events(coarse_env, root_c, coarse)
    codes = {e.alloc_code for e in ev_f}
    for code in codes:
        group_f = [e for e in ev_f if e.alloc_code == code]
        group_c = [e for e in ev_c if e.alloc_code == code]
        assert len(group_c) <= 4 < len(group_f)
        # the union of posterior supports is unchanged by binning
        for j in range(3):
            if group_f[0].masks[j] is None:
                continue
            u_f = np.logical_or.reduce([e.masks[j] for e in group_f])
            u_c = np.logical_or.reduce([e.masks[j] for e in group_c])
            np.testing.assert_array_equal(u_f, u_c)
        # bin edges follow the rounding direction: any fine price resolves
        # onto a recorded coarse price at or below it (forward auctions)
        coarse_prices = sorted(e.price for e in group_c)
        for e in group_f:
            assert any(p <= e.price + 1e-12 for p in coarse_prices)
    assert coarse_env.event_bins == 4


def test_event_binning_resolves_interior_prices():
    env = SequentialSales(3, 2, "second", event_bins=3)
    tilings = build_tilings(env, 12)
    profile = init_truthful(env, tilings, None)
    root = make_root(env, tilings)
    events = enumerate_events(env, root, profile)
    group = sorted((e for e in events if e.alloc_code == 0),
                   key=lambda e: e.price)
    assert len(group) >= 2
    mid = 0.5 * (group[0].price + group[1].price)
    got = resolve_event(env, profile, root,
                        RoundOutcome(0, np.array([0.0, mid, 0.0])))
    assert got.key == group[0].key
