"""Certified equilibrium quality: an explicit upper bound on the largest
gain any bidder type can get from any deviation plan, plus an independent
exhaustive-deviation oracle for small instances.

The bound follows the decomposition of full best-response losses into
immediate (one-shot) losses: for every history class and every tile, the gap
between the best one-shot deviation and the tile's own bid is measured at
both tile endpoints (with type-consistent continuation rollouts, so the
endpoint values are exact up to the scenario expectation), the per-class
maxima are taken, and the maxima are summed along the worst root-to-leaf
path of the history-class graph.  Within a tile all bids along any
deviation's path are constant in the type, so every candidate's value is
linear in the type and the endpoint maxima dominate every interior type.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .beliefs import (ClassIndex, HistoryClass, class_signature,
                      compute_level_tables, enumerate_history_classes,
                      resolve_event)
from .game import AuctionEnvironment, ContractViolation, RoundOutcome
from .solver import Engine, SolverConfig
from .tiling import PCStrategyProfile

__all__ = ["VerifierConfig", "VertexEngine", "EpsilonReport", "epsilon_bound",
           "BruteForceOracle", "brute_force_exploitability",
           "decomposition_violation", "convexity_check", "convexity_rate"]


@dataclass(frozen=True)
class VerifierConfig:
    """High-fidelity evaluation settings for the bound."""

    samples: int = 4000
    exact_budget: int = 50000
    scan_points: int = 25
    pattern_step_frac: float = 0.125
    pattern_shrinks: int = 8
    pattern_passes: int = 2
    seed: int = 0
    assume_symmetric: bool = False
    #: extra one-shot candidates evaluated as full product grids per class
    #: (guarantees domination of coarse-grid oracles even for 2-d bids)
    extra_grid: int = 7

    def engine_config(self) -> SolverConfig:
        return SolverConfig(scan_points=self.scan_points,
                            exact_budget=self.exact_budget,
                            pattern_step_frac=self.pattern_step_frac,
                            pattern_shrinks=self.pattern_shrinks,
                            pattern_passes=self.pattern_passes,
                            symmetric=self.assume_symmetric,
                            tie_fair=False,  # keep the game's deterministic rule
                            scan_margin=0.0,  # the bound needs the plain argmax
                            pattern_tol=0.0,
                            seed=self.seed)


class VertexEngine(Engine):
    """Engine with evaluation contexts pinned to tile endpoints, so losses
    are measured at the exact boundary types rather than tile corners."""

    def endpoint_contexts(self, cls, i, samples, rng):
        """(lower, upper) contexts: point k is tile k evaluated at its lower
        resp. upper vertex type, with continuation bids taken from tile k."""
        tiling = self.profile[i].tiling
        lows = tiling.lower_vertices()[:, 0]
        highs = tiling.upper_vertices()[:, 0]
        cont = np.arange(tiling.n_tiles)
        ctx_lo = self.make_context(cls, i, samples, rng, theta=lows, cont_tiles=cont)
        ctx_hi = self.make_context(cls, i, samples, rng, theta=highs, cont_tiles=cont)
        return ctx_lo, ctx_hi


@dataclass
class EpsilonReport:
    epsilon: float
    per_bidder: list
    worst_path: list
    n_classes: int
    exact: bool
    class_losses: dict = field(default_factory=dict)  # (class id, bidder) -> loss

    def summary(self) -> dict:
        return {"epsilon": self.epsilon, "per_bidder": self.per_bidder,
                "worst_path": self.worst_path, "n_classes": self.n_classes,
                "exact": self.exact}


def _extra_candidates(env, cls, i, profile, grid):
    """Constant candidate rows: a full product grid over bid coordinates plus
    every bid level the profile itself uses at this class."""
    lo, hi = env.bid_range(cls.history)
    q = env.bid_dim(cls.history)
    axes = [np.linspace(lo, hi, grid)] * q
    rows = [np.array(r) for r in itertools.product(*axes)]
    tables = compute_level_tables(env, cls, profile)
    if tables[i] is not None:
        rows.extend(tables[i].values)
    return rows


def _class_loss(engine: VertexEngine, cls, i, samples, rng, extra_grid):
    """Largest clamped endpoint loss of bidder ``i`` at ``cls``: for each
    tile, the best one-shot deviation at either endpoint type versus the
    tile's own bid, everyone following the profile afterwards."""
    env = engine.env
    profile = engine.profile
    sigma = profile[i].bids_at(cls)
    extra = _extra_candidates(env, cls, i, profile, extra_grid)
    worst = np.zeros(sigma.shape[0])
    exact = True
    for ctx in engine.endpoint_contexts(cls, i, samples, rng):
        _, losses, _ = engine.best_response(ctx, sigma, extra_points=extra)
        worst = np.maximum(worst, losses)
        exact = exact and ctx.exact
    return float(worst.max()), exact


def epsilon_bound(env: AuctionEnvironment, profile: PCStrategyProfile,
                  config: VerifierConfig = VerifierConfig(),
                  index: ClassIndex | None = None) -> EpsilonReport:
    """Upper bound on the profile's exploitability (the largest utility any
    bidder type can gain at any history by deviating arbitrarily, given the
    finite belief choice rule)."""
    if not env.independent_beliefs:
        raise ContractViolation(
            "the bound requires posterior beliefs independent across bidders")
    if index is None:
        index = enumerate_history_classes(env, profile)
    engine = VertexEngine(env, profile, config.engine_config())
    engine.index = index
    engine.invalidate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))

    class_losses: dict = {}
    loss_memo: dict = {}
    all_exact = True
    decision = sorted(index.decision_classes(), key=lambda c: (-c.round, c.id))
    for cls in decision:
        active = env.active_mask(cls.history)
        for i in range(env.n_bidders):
            if not active[i]:
                continue
            memo_key = (repr(class_signature(env, cls, i))
                        if config.assume_symmetric else (cls.id, i))
            if memo_key in loss_memo:
                loss, exact = loss_memo[memo_key]
            else:
                loss, exact = _class_loss(engine, cls, i, config.samples, rng,
                                          config.extra_grid)
                loss_memo[memo_key] = (loss, exact)
            class_losses[(cls.id, i)] = loss
            all_exact = all_exact and exact

    # longest-path aggregation over the class graph (acyclic by round)
    per_bidder = []
    paths = []
    for i in range(env.n_bidders):
        memo: dict = {}

        def path_value(cls, i=i, memo=memo):
            got = memo.get(cls.id)
            if got is not None:
                return got
            own = class_losses.get((cls.id, i), 0.0)
            best_tail, best_path = 0.0, []
            if cls.events is not None:
                for ev in cls.events:
                    if ev.succ_id is None or ev.succ_id not in index.classes:
                        continue
                    succ = index[ev.succ_id]
                    if engine.env.is_terminal(succ.history):
                        continue
                    tail, tpath = path_value(succ)
                    if tail > best_tail:
                        best_tail, best_path = tail, tpath
            got = (own + best_tail, [cls.id] + best_path)
            memo[cls.id] = got
            return got

        total, path = path_value(index[index.root_id])
        per_bidder.append(total)
        paths.append(path)
    eps = float(max(per_bidder))
    worst = paths[int(np.argmax(per_bidder))]
    return EpsilonReport(epsilon=eps, per_bidder=[float(x) for x in per_bidder],
                         worst_path=worst, n_classes=len(index),
                         exact=all_exact, class_losses=class_losses)


# ---------------------------------------------------------------------------
# exhaustive deviation oracle for small instances
# ---------------------------------------------------------------------------

class BruteForceOracle:
    """Exact exploitability of a profile on a deliberately tiny instance.

    For each bidder and each grid-vertex type, the best *full deviation plan*
    over a finite bid grid (plus the profile's own bid levels) is computed by
    exhaustive recursion: opponent tiles are enumerated once from the class
    beliefs and partitioned by the public outcome each candidate bid
    produces, so continuation values condition correctly on everything the
    deviator observes.  Runtime grows with the product of support sizes,
    hence the hard size limits.
    """

    MAX_BIDDERS = 3
    MAX_ROUNDS = 2
    MAX_TILES = 6

    def __init__(self, env: AuctionEnvironment, profile: PCStrategyProfile,
                 bid_grid: int = 7):
        if env.n_bidders > self.MAX_BIDDERS or env.n_rounds > self.MAX_ROUNDS:
            raise ContractViolation("instance too large for the exhaustive oracle")
        for s in profile:
            if s.tiling.n_tiles > self.MAX_TILES:
                raise ContractViolation("instance too large for the exhaustive oracle")
        self.env = env
        self.profile = profile
        self.bid_grid = bid_grid
        self.index = enumerate_history_classes(env, profile)
        self._resolve_cache: dict = {}
        self._vals: dict = {}
        self._value_memo: dict = {}

    # ---- scenarios -----------------------------------------------------
    def _class_scenarios(self, cls: HistoryClass, i: int):
        """All opponent tile profiles under the class beliefs: (m, n) tile
        matrix (own column 0) and normalized weights."""
        env = self.env
        active = env.active_mask(cls.history)
        opps = [j for j in range(env.n_bidders) if j != i and active[j]]
        supports = [np.flatnonzero(cls.beliefs[j].mask) for j in opps]
        if opps:
            grids = np.meshgrid(*supports, indexing="ij")
            combos = np.stack([g.ravel() for g in grids], axis=1)
        else:
            combos = np.zeros((1, 0), dtype=int)
        weights = np.ones(combos.shape[0])
        tiles = np.zeros((combos.shape[0], env.n_bidders), dtype=int)
        for col, j in enumerate(opps):
            tiles[:, j] = combos[:, col]
            weights *= cls.beliefs[j].tile_probs()[combos[:, col]]
        weights /= weights.sum()
        return tiles, weights

    def _candidates(self, cls: HistoryClass, i: int) -> np.ndarray:
        lo, hi = self.env.bid_range(cls.history)
        q = self.env.bid_dim(cls.history)
        axes = [np.linspace(lo, hi, self.bid_grid)] * q
        cand = [np.array(r) for r in itertools.product(*axes)]
        tables = compute_level_tables(self.env, cls, self.profile)
        cand.extend(tables[i].values)
        return np.unique(np.array(cand), axis=0)

    def _partition(self, cls: HistoryClass, i: int, own_bid, tiles, weights):
        """Outcomes under ``own_bid`` per scenario: immediate expected utility
        coefficients (codes, payments) plus scenario groups per successor."""
        env = self.env
        m = tiles.shape[0]
        q = env.bid_dim(cls.history)
        bids = np.zeros((m, env.n_bidders, q))
        active = env.active_mask(cls.history)
        for j in range(env.n_bidders):
            if j != i and active[j]:
                bids[:, j, :] = self.profile[j].bids_at(cls)[tiles[:, j]]
        bids[:, i, :] = own_bid
        codes, payments = env.outcome_batch(cls.history, bids)
        groups: dict = {}
        if cls.round < env.n_rounds - 1:
            for r in range(m):
                code = int(codes[r])
                price = env.event_price(code, payments[r])
                ck = (cls.id, code, round(price, 9))
                cid = self._resolve_cache.get(ck, "?")
                if cid == "?":
                    ev = resolve_event(env, self.profile, cls,
                                       RoundOutcome(code, payments[r]))
                    cid = (ev.succ_id if ev.succ_id in self.index.classes else None)
                    if cid is not None and env.is_terminal(self.index[cid].history):
                        cid = None
                    self._resolve_cache[ck] = cid
                # the bidder's own activity at the successor is checked per
                # call: the resolution itself is bidder-independent
                if cid is not None and env.active_mask(self.index[cid].history)[i]:
                    groups.setdefault(cid, []).append(r)
        return codes, payments, groups

    # ---- values --------------------------------------------------------
    def _value(self, cls: HistoryClass, i: int, theta: float,
               tiles, weights, mode: str) -> float:
        """Expected-utility sum over the (unnormalized) scenario weights.

        mode 'follow': everyone plays the profile.  mode 'plan': bidder ``i``
        best-responds at this class and every reachable successor.  mode
        'oneshot': best-responds here, follows the profile afterwards.
        """
        env = self.env
        if (env.is_terminal(cls.history) or not env.active_mask(cls.history)[i]
                or weights.size == 0):
            return 0.0
        # different candidates at the parent often induce the same scenario
        # subset here, so subtree values are shared across them
        memo_key = (cls.id, i, round(float(theta), 12), mode,
                    tiles.tobytes(), weights.tobytes())
        got = self._value_memo.get(memo_key)
        if got is not None:
            return got
        if mode == "follow":
            cands = self.profile[i].bids_at(cls)[
                self.profile[i].tiling.locate(theta)][None, :]
        else:
            cands = self._candidates(cls, i)
        tail_mode = "plan" if mode == "plan" else "follow"
        best = -np.inf
        for b in cands:
            codes, payments, groups = self._partition(cls, i, b, tiles, weights)
            u = env.utility_batch(i, theta, cls.history, codes, payments)
            total = float(u @ weights)
            for cid, rows in groups.items():
                rows = np.asarray(rows)
                total += self._value(self.index[cid], i, theta,
                                     tiles[rows], weights[rows], tail_mode)
            best = max(best, total)
        self._value_memo[memo_key] = best
        return best

    def values(self, cls: HistoryClass, i: int, theta: float):
        """(best plan value, on-path value, one-shot loss) for type ``theta``
        of bidder ``i`` at ``cls``, under the class beliefs."""
        env = self.env
        if env.is_terminal(cls.history) or not env.active_mask(cls.history)[i]:
            return 0.0, 0.0, 0.0
        key = (cls.id, i, round(float(theta), 12))
        got = self._vals.get(key)
        if got is None:
            tiles, weights = self._class_scenarios(cls, i)
            u_path = self._value(cls, i, theta, tiles, weights, "follow")
            w = self._value(cls, i, theta, tiles, weights, "plan")
            one = self._value(cls, i, theta, tiles, weights, "oneshot")
            got = (w, u_path, max(one - u_path, 0.0))
            self._vals[key] = got
        return got

    def _vertex_types(self, i):
        tiling = self.profile[i].tiling
        return np.concatenate([tiling.lower_vertices()[:, 0],
                               tiling.upper_vertices()[-1:, 0]])

    def exploitability(self) -> float:
        """max over bidders and vertex types of the best-plan gain at the root."""
        root = self.index[self.index.root_id]
        worst = 0.0
        for i in range(self.env.n_bidders):
            for theta in self._vertex_types(i):
                w, u, _ = self.values(root, i, float(theta))
                worst = max(worst, w - u)
        return worst

    def decomposition_violation(self) -> float:
        """max over classes, bidders and vertex types of
        l_BR - (l_IBR + max over successors of l_BR), clamped below at 0;
        zero certifies the loss decomposition the bound relies on."""
        worst = 0.0
        for cls in self.index.decision_classes():
            active = self.env.active_mask(cls.history)
            succs = []
            if cls.events is not None:
                seen = set()
                for ev in cls.events:
                    cid = ev.succ_id
                    if cid is None or cid in seen or cid not in self.index.classes:
                        continue
                    seen.add(cid)
                    if not self.env.is_terminal(self.index[cid].history):
                        succs.append(self.index[cid])
            for i in range(self.env.n_bidders):
                if not active[i]:
                    continue
                for theta in self._vertex_types(i):
                    w, u, l_ibr = self.values(cls, i, float(theta))
                    tail = 0.0
                    for succ in succs:
                        sw, su, _ = self.values(succ, i, float(theta))
                        tail = max(tail, sw - su)
                    worst = max(worst, (w - u) - (l_ibr + tail))
        return worst


def brute_force_exploitability(env, profile, bid_grid: int = 7) -> float:
    return BruteForceOracle(env, profile, bid_grid).exploitability()


def decomposition_violation(env, profile, bid_grid: int = 7) -> float:
    return BruteForceOracle(env, profile, bid_grid).decomposition_violation()


# ---------------------------------------------------------------------------
# within-tile convexity spot checks
# ---------------------------------------------------------------------------

def convexity_check(env: AuctionEnvironment, profile: PCStrategyProfile,
                    config: VerifierConfig = VerifierConfig(),
                    n_points: int = 50, seed: int = 0,
                    index: ClassIndex | None = None) -> float:
    """Midpoint-convexity violation of the within-tile value functions.

    For random classes, bidders, tiles and fixed bids, compares the utility at
    the tile midpoint against the average of the endpoints; returns the
    largest (clamped) violation found.  Scenario sets are shared across the
    three evaluations, so exact-mode checks are noise-free.
    """
    if index is None:
        index = enumerate_history_classes(env, profile)
    engine = Engine(env, profile, config.engine_config())
    engine.index = index
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    decision = sorted(index.decision_classes(), key=lambda c: (c.round, c.id))
    worst = 0.0
    for _ in range(n_points):
        cls = decision[rng.integers(len(decision))]
        active = np.flatnonzero(env.active_mask(cls.history))
        i = int(active[rng.integers(active.size)])
        tiling = profile[i].tiling
        k = int(rng.integers(tiling.n_tiles))
        lo = tiling.lower_vertices()[k, 0]
        hi = tiling.upper_vertices()[k, 0]
        thetas = np.array([lo, 0.5 * (lo + hi), hi])
        ctx = engine.make_context(cls, i, config.samples, rng, theta=thetas,
                                  cont_tiles=np.full(3, k))
        bids = np.tile(profile[i].bids_at(cls)[k], (3, 1))
        u = engine.eval_bids(ctx, bids)
        worst = max(worst, u[1] - 0.5 * (u[0] + u[2]))
    return worst


def convexity_rate(env: AuctionEnvironment, profile: PCStrategyProfile,
                   config: VerifierConfig = VerifierConfig(),
                   n_points: int = 200, n_rep: int = 8, seed: int = 0,
                   index: ClassIndex | None = None) -> float:
    """Fraction of random within-tile midpoint checks that are convex up to
    Monte Carlo noise.

    Each check repeats the midpoint-vs-endpoints comparison of
    :func:`convexity_check` over ``n_rep`` independent scenario draws (exact
    summation is disabled so the tolerance is meaningful) and passes when the
    mean violation is within three standard errors of zero.
    """
    if index is None:
        index = enumerate_history_classes(env, profile)
    engine = Engine(env, profile, replace(config.engine_config(), exact_budget=0))
    engine.index = index
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    decision = sorted(index.decision_classes(), key=lambda c: (c.round, c.id))
    passed = 0
    for _ in range(n_points):
        cls = decision[rng.integers(len(decision))]
        active = np.flatnonzero(env.active_mask(cls.history))
        i = int(active[rng.integers(active.size)])
        tiling = profile[i].tiling
        k = int(rng.integers(tiling.n_tiles))
        lo = tiling.lower_vertices()[k, 0]
        hi = tiling.upper_vertices()[k, 0]
        thetas = np.array([lo, 0.5 * (lo + hi), hi])
        bids = np.tile(profile[i].bids_at(cls)[k], (3, 1))
        v = np.empty(n_rep)
        for r in range(n_rep):
            ctx = engine.make_context(cls, i, config.samples, rng,
                                      theta=thetas, cont_tiles=np.full(3, k))
            u = engine.eval_bids(ctx, bids)
            v[r] = u[1] - 0.5 * (u[0] + u[2])
        se = float(np.std(v, ddof=1)) / np.sqrt(n_rep)
        if float(np.mean(v)) <= 3.0 * se + 1e-9:
            passed += 1
    return passed / n_points
