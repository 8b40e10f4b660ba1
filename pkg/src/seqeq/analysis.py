"""Post-solve analysis: forward simulation of a profile through its history
classes and distances of the solved bids from analytical equilibria."""

from __future__ import annotations

import numpy as np

from .beliefs import ClassIndex, resolve_event
from .game import AuctionEnvironment, ContractViolation, RoundOutcome
from .tiling import PCStrategyProfile

__all__ = ["class_reach_counts", "round_distances"]


def class_reach_counts(env: AuctionEnvironment, profile: PCStrategyProfile,
                       index: ClassIndex, n_sims: int,
                       rng: np.random.Generator) -> dict:
    """Visit counts per decision-class id over simulated on-profile play.

    Types are drawn from the priors; every simulation starts at the root and
    rounds are resolved through the class graph's event tables (the rounding
    rule handles boundary outcomes).
    """
    if n_sims <= 0:
        raise ContractViolation("need a positive number of simulations")
    thetas = np.stack([env.priors[i].sample(rng, n_sims)[:, 0]
                       for i in range(env.n_bidders)], axis=1)
    counts: dict = {}
    groups = {index.root_id: np.arange(n_sims)}
    for _ in range(env.n_rounds):
        nxt: dict = {}
        for cid, sims in groups.items():
            cls = index[cid]
            if env.is_terminal(cls.history):
                continue
            counts[cid] = counts.get(cid, 0) + sims.size
            q = env.bid_dim(cls.history)
            bids = np.zeros((sims.size, env.n_bidders, q))
            active = env.active_mask(cls.history)
            for i in range(env.n_bidders):
                if not active[i]:
                    continue
                tiles = profile[i].tiling.locate_batch(thetas[sims, i])
                bids[:, i, :] = profile[i].bids_at(cls)[tiles]
            codes, payments = env.outcome_batch(cls.history, bids)
            for r in range(sims.size):
                ev = resolve_event(env, profile, cls,
                                   RoundOutcome(int(codes[r]), payments[r]))
                if ev.succ_id is None or ev.succ_id not in index.classes:
                    continue
                nxt.setdefault(ev.succ_id, []).append(sims[r])
        groups = {cid: np.array(s) for cid, s in nxt.items()}
    return counts


def round_distances(env: AuctionEnvironment, profile: PCStrategyProfile,
                    index: ClassIndex, oracles: dict, n_sims: int = 20000,
                    seed: int = 0, measure: str = "belief",
                    interior_drop: int = 0) -> dict:
    """Reach-weighted L2 distance per (round, role) from analytical bids.

    ``oracles`` maps a (round, role_key) pair to a callable theta -> bid row
    entry; roles come from the environment's ``role_key``.  Distances are
    averaged over on-path decision classes, weighted by simulated visit
    frequency; the representative bidder per class is the lowest active one
    with that role.
    """
    from .environments import l2_distance

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    counts = class_reach_counts(env, profile, index, n_sims, rng)
    acc: dict = {}
    for cid, cnt in counts.items():
        cls = index[cid]
        active = env.active_mask(cls.history)
        seen_roles = set()
        for i in range(env.n_bidders):
            if not active[i]:
                continue
            role = env.role_key(i, cls.history)
            if role in seen_roles:
                continue
            seen_roles.add(role)
            spec = oracles.get((cls.round, role))
            if spec is None:
                continue
            for bundle, oracle in spec.items():
                d = l2_distance(profile[i], oracle, cls, measure=measure,
                                bundle=bundle, interior_drop=interior_drop)
                if np.isnan(d):  # interior variant left nothing to integrate
                    continue
                key = (cls.round, role, bundle)
                tot, wsum = acc.get(key, (0.0, 0.0))
                acc[key] = (tot + cnt * d * d, wsum + cnt)
    return {key: float(np.sqrt(tot / wsum)) for key, (tot, wsum) in acc.items()}
