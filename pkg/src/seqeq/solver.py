"""Iterated best-response search for piecewise-constant equilibrium bids.

The search starts from the truthful profile and repeatedly moves every
(history class, tile) bid a damped step toward its immediate best response,
backward through the rounds, until the largest immediate loss stalls.  A
low-fidelity inner loop with few opponent samples does the bulk of the
movement, a high-fidelity outer loop polishes.

Expected utility of a bid is evaluated against *type-consistent* opponent
scenarios: opponents' tiles are drawn once from the class beliefs (exact
enumeration of the support product when small, stratified sampling
otherwise) and kept fixed through all remaining rounds, with everyone
following the profile and public beliefs evolving through the history-class
graph.  Keeping the sampled types fixed makes the continuation value
correctly conditioned on what the bidder observes, including its own bid's
effect on the public outcome.  All candidate bids of one search share the
same scenario set, so the incumbent's measured loss is exactly zero at a
fixed point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .beliefs import (ClassIndex, HistoryClass, class_signature,
                      enumerate_history_classes)
from .game import AuctionEnvironment, ContractViolation
from .tiling import (PCStrategyProfile, Tiling, enforce_monotone,
                     init_truthful, update_strategy)

__all__ = ["SolverConfig", "Engine", "EvalContext", "SolveResult",
           "run_search", "build_tilings"]


@dataclass(frozen=True)
class SolverConfig:
    """Search hyperparameters; defaults suit 1-d type spaces with ~100 tiles."""

    grid_cells: int = 100
    samples_inner: int = 800
    samples_outer: int = 2500
    exact_budget: int = 4000        # max opponent tile combos for exact sums
    scan_points: int = 12           # coarse scan along scaled truthful rays
    pattern_step_frac: float = 0.125
    pattern_shrinks: int = 6
    pattern_passes: int = 2
    gamma_min: float = 0.05
    gamma_max: float = 0.35
    rate_scale: float = 25.0        # c in the arctan damping rate
    scan_margin: float = 2e-3       # global scan must beat local search by this
    pattern_tol: float = 5e-3       # min utility slope per unit bid to move
    inner_iters: int = 50
    outer_iters: int = 8
    inner_tol: float = 2e-3
    seed: int = 0
    monotone: bool = True
    per_tile_update: bool = True
    symmetric: bool = True
    tie_fair: bool = True           # average favored/disfavored tie-breaks in tails
    class_budget: int = 500_000

    def __post_init__(self):
        if not 0.0 <= self.gamma_min <= self.gamma_max <= 1.0:
            raise ContractViolation("need 0 <= gamma_min <= gamma_max <= 1")
        if self.grid_cells < 1 or self.samples_inner < 1 or self.samples_outer < 1:
            raise ContractViolation("grid and sample counts must be positive")
        if self.rate_scale <= 0 or self.pattern_step_frac <= 0:
            raise ContractViolation("rate_scale and pattern_step_frac must be positive")


def build_tilings(env: AuctionEnvironment, cells: int) -> list[Tiling]:
    return [Tiling.uniform(sp, cells) for sp in env.type_spaces]


@dataclass
class EvalContext:
    """Frozen opponent scenarios for evaluating one bidder's bids at a class.

    Evaluation points are (type, continuation-tile) pairs; by default one per
    tile with the tile's lower vertex, but a verifier can pass arbitrary
    points (e.g. every grid vertex).  ``big`` is a preallocated
    (n_points * m, n, q) bid block whose opponent columns are filled;
    :meth:`Engine.eval_bids` only rewrites the own column.
    """

    cls: HistoryClass
    bidder: int
    m: int
    n_points: int
    weights: np.ndarray        # (m,)
    tiles_mat: np.ndarray      # (m, n) opponent tile per scenario (-1 elsewhere)
    big: np.ndarray            # (n_points * m, n, q)
    theta: np.ndarray          # (n_points,)
    cont_tiles: np.ndarray     # (n_points,) own tile for later-round bids
    theta_rep: np.ndarray      # (n_points * m,)
    exact: bool
    has_tail: bool
    tail_tables: dict          # succ class id -> ((n_points, R) values, inverse (m,))


class Engine:
    """Shared evaluation machinery for the solver and the verifier."""

    def __init__(self, env: AuctionEnvironment, profile: PCStrategyProfile,
                 config: SolverConfig):
        self.env = env
        self.profile = profile
        self.config = config
        self.index: ClassIndex | None = None
        self._res_cache: dict = {}

    def invalidate(self):
        """Drop event-resolution caches after strategies or classes changed."""
        self._res_cache = {}

    # ---- scenarios -----------------------------------------------------
    def _scenario_tiles(self, cls, i, samples, rng):
        """Opponent tile matrix (m, n) plus scenario weights."""
        env = self.env
        active = env.active_mask(cls.history)
        opps = [j for j in range(env.n_bidders) if j != i and active[j]]
        supports = [np.flatnonzero(cls.beliefs[j].mask) for j in opps]
        sizes = [s.size for s in supports]
        total = int(np.prod(sizes)) if opps else 1
        if total <= self.config.exact_budget:
            if opps:
                grids = np.meshgrid(*supports, indexing="ij")
                combos = np.stack([g.ravel() for g in grids], axis=1)
            else:
                combos = np.zeros((1, 0), dtype=int)
            weights = np.ones(combos.shape[0])
            for col, j in enumerate(opps):
                weights *= cls.beliefs[j].tile_probs()[combos[:, col]]
            weights /= weights.sum()
            exact = True
        else:
            m = samples
            combos = np.empty((m, len(opps)), dtype=int)
            for col, j in enumerate(opps):
                combos[:, col] = cls.beliefs[j].sample_tiles_stratified(rng, m)
            weights = np.full(m, 1.0 / m)
            exact = False
        tiles_mat = np.full((combos.shape[0], env.n_bidders), -1, dtype=int)
        for col, j in enumerate(opps):
            tiles_mat[:, j] = combos[:, col]
        return tiles_mat, weights, exact

    def make_context(self, cls: HistoryClass, i: int, samples: int,
                     rng: np.random.Generator, theta: np.ndarray | None = None,
                     cont_tiles: np.ndarray | None = None) -> EvalContext:
        env = self.env
        tiles_mat, weights, exact = self._scenario_tiles(cls, i, samples, rng)
        m = tiles_mat.shape[0]
        tiling = self.profile[i].tiling
        if theta is None:
            theta = tiling.lower_vertices()[:, 0]
        theta = np.asarray(theta, dtype=float)
        n_points = theta.size
        if cont_tiles is None:
            cont_tiles = np.arange(n_points)
        cont_tiles = np.asarray(cont_tiles, dtype=int)
        q = env.bid_dim(cls.history)
        scen = np.zeros((m, env.n_bidders, q))
        active = env.active_mask(cls.history)
        for j in range(env.n_bidders):
            if j == i or not active[j]:
                continue
            scen[:, j, :] = self.profile[j].bids_at(cls)[tiles_mat[:, j]]
        big = np.tile(scen, (n_points, 1, 1))
        has_tail = cls.round < env.n_rounds - 1
        return EvalContext(cls=cls, bidder=i, m=m, n_points=n_points,
                           weights=weights, tiles_mat=tiles_mat, big=big,
                           theta=theta, cont_tiles=cont_tiles,
                           theta_rep=np.repeat(theta, m), exact=exact,
                           has_tail=has_tail, tail_tables={})

    # ---- event resolution ---------------------------------------------
    def _res_tables(self, cls: HistoryClass):
        """Per allocation code: sorted event price grid plus successor ids
        (None for successors that end the game)."""
        got = self._res_cache.get(cls.id)
        if got is not None:
            return got
        tables: dict = {}
        if cls.events is not None and self.index is not None:
            per_code: dict = {}
            for ev in cls.events:
                if ev.succ_id is None or ev.succ_id not in self.index.classes:
                    continue
                per_code.setdefault(int(ev.alloc_code), []).append(ev)
            for code, evs in per_code.items():
                evs.sort(key=lambda e: e.price)
                prices = np.array([e.price for e in evs])
                succs = [None if self.env.is_terminal(self.index[e.succ_id].history)
                         else e.succ_id for e in evs]
                tables[code] = (prices, succs)
        self._res_cache[cls.id] = tables
        return tables

    def _resolve_levels(self, prices_grid, prices):
        if self.env.reverse:
            # round an off-grid price toward the less competitive event
            return np.minimum(np.searchsorted(prices_grid, prices, side="left"),
                              prices_grid.size - 1)
        return np.maximum(np.searchsorted(prices_grid, prices, side="right") - 1, 0)

    # ---- rollouts ------------------------------------------------------
    def rollout(self, cls: HistoryClass, i: int, tiles: np.ndarray,
                theta: np.ndarray, tie_favor=None) -> np.ndarray:
        """Total utility of bidder ``i`` from ``cls`` onward when everyone
        follows the profile, one row per (type-theta, opponent-tiles) state."""
        env = self.env
        total = np.zeros(theta.size)
        groups = {cls.id: (cls, np.arange(theta.size))}
        while groups:
            nxt: dict = {}
            for cid, (c, rows) in groups.items():
                if env.is_terminal(c.history):
                    continue
                active = env.active_mask(c.history)
                if not active[i]:
                    continue
                q = env.bid_dim(c.history)
                bids = np.zeros((rows.size, env.n_bidders, q))
                for j in range(env.n_bidders):
                    if active[j]:
                        bids[:, j, :] = self.profile[j].bids_at(c)[tiles[rows, j]]
                codes, payments = env.outcome_batch(c.history, bids,
                                                    tie_favor=tie_favor)
                total[rows] += env.utility_batch(i, theta[rows], c.history,
                                                 codes, payments)
                if c.round >= env.n_rounds - 1:
                    continue
                prices = env.event_price_batch(codes, payments)
                res = self._res_tables(c)
                for code in np.unique(codes):
                    tab = res.get(int(code))
                    if tab is None:
                        continue
                    sel = codes == code
                    levs = self._resolve_levels(tab[0], prices[sel])
                    sub_rows = rows[sel]
                    for lev in np.unique(levs):
                        sid = tab[1][lev]
                        if sid is None:
                            continue
                        succ = self.index[sid]
                        if not env.active_mask(succ.history)[i]:
                            continue
                        r = sub_rows[levs == lev]
                        if sid in nxt:
                            nxt[sid] = (succ, np.concatenate([nxt[sid][1], r]))
                        else:
                            nxt[sid] = (succ, r)
            groups = nxt
        return total

    def _succ_table(self, ctx: EvalContext, sid: str):
        """Tail values after reaching successor class ``sid``: (n_points, R)
        array over reduced opponent-tile profiles plus the scenario -> reduced
        index map."""
        got = ctx.tail_tables.get(sid)
        if got is not None:
            return got
        env = self.env
        succ = self.index[sid]
        active = env.active_mask(succ.history)
        cols = [j for j in range(env.n_bidders)
                if j != ctx.bidder and active[j] and ctx.tiles_mat[0, j] >= 0]
        if cols:
            red, inv = np.unique(ctx.tiles_mat[:, cols], axis=0, return_inverse=True)
        else:
            red = np.zeros((1, 0), dtype=int)
            inv = np.zeros(ctx.m, dtype=int)
        R = red.shape[0]
        P = ctx.n_points
        tiles = np.zeros((P * R, env.n_bidders), dtype=int)
        for col, j in enumerate(cols):
            tiles[:, j] = np.tile(red[:, col], P)
        tiles[:, ctx.bidder] = np.repeat(ctx.cont_tiles, R)
        theta = np.repeat(ctx.theta, R)
        if self.config.tie_fair:
            # grid bids tie often; split those ties evenly instead of letting
            # the evaluated bidder's index decide every one of them
            vals = 0.5 * (
                self.rollout(succ, ctx.bidder, tiles, theta,
                             tie_favor=(ctx.bidder, 1))
                + self.rollout(succ, ctx.bidder, tiles, theta,
                               tie_favor=(ctx.bidder, -1)))
        else:
            vals = self.rollout(succ, ctx.bidder, tiles, theta)
        vals = vals.reshape(P, R)
        got = (vals, inv)
        ctx.tail_tables[sid] = got
        return got

    def _tail_values(self, ctx: EvalContext, codes, prices) -> np.ndarray:
        env = self.env
        out = np.zeros(codes.size)
        res = self._res_tables(ctx.cls)
        scen_idx = np.tile(np.arange(ctx.m), ctx.n_points)
        point_idx = np.repeat(np.arange(ctx.n_points), ctx.m)
        for code in np.unique(codes):
            tab = res.get(int(code))
            if tab is None:
                continue
            sel = np.flatnonzero(codes == code)
            levs = self._resolve_levels(tab[0], prices[sel])
            for lev in np.unique(levs):
                sid = tab[1][lev]
                if sid is None:
                    continue
                if not env.active_mask(self.index[sid].history)[ctx.bidder]:
                    continue
                rows = sel[levs == lev]
                vals, inv = self._succ_table(ctx, sid)
                out[rows] = vals[point_idx[rows], inv[scen_idx[rows]]]
        return out

    # ---- evaluation ----------------------------------------------------
    def eval_bids(self, ctx: EvalContext, bids: np.ndarray) -> np.ndarray:
        """Expected utility per evaluation point of bidding ``bids``
        (n_points, q) once and following the profile afterwards."""
        env = self.env
        ctx.big[:, ctx.bidder, :] = np.repeat(np.atleast_2d(bids), ctx.m, axis=0)
        codes, payments = env.outcome_batch(ctx.cls.history, ctx.big)
        u = env.utility_batch(ctx.bidder, ctx.theta_rep, ctx.cls.history,
                              codes, payments)
        if ctx.has_tail:
            prices = env.event_price_batch(codes, payments)
            u = u + self._tail_values(ctx, codes, prices)
        return u.reshape(ctx.n_points, ctx.m) @ ctx.weights

    def best_response(self, ctx, old_bids: np.ndarray, extra_points=()):
        """Per-point improved bids via inertial pattern search plus a scan.

        A local pattern search starts from the incumbent; a global scan along
        scaled marginal-value rays (refined by a second pattern search) only
        replaces the local result where it wins by ``scan_margin``, and a
        pattern step must improve utility by ``pattern_tol`` per unit of bid
        moved.  Both thresholds keep the search anchored to the incumbent on
        near-indifferent stretches of the utility landscape -- sequential
        auctions are full of them (winning now and waiting often have equal
        expected price), and an unanchored argmax just wanders across them.
        With both thresholds at zero this is a plain greedy maximisation.

        ``ctx`` may be a single context or a list of contexts for symmetric
        group members; utilities are then averaged across members, which
        symmetrises deterministic index tie-breaks (a bid atom shared by all
        bidders is worth its tie-split average, not a sure win or sure loss).
        ``extra_points`` are additional constant bid rows (q,) tried for every
        point.  Returns (bids, losses, incumbent utilities); the result never
        does worse than the incumbent on the shared scenarios, so losses are
        always >= 0.
        """
        ctxs = ctx if isinstance(ctx, (list, tuple)) else [ctx]
        ctx = ctxs[0]
        env = self.env
        lo, hi = env.bid_range(ctx.cls.history)
        q = old_bids.shape[1]

        def avg_eval(bids):
            u = self.eval_bids(ctxs[0], bids)
            for c in ctxs[1:]:
                u = u + self.eval_bids(c, bids)
            return u / len(ctxs)

        u0 = avg_eval(old_bids)
        best_b = np.array(old_bids, dtype=float)
        best_u = u0.copy()

        def try_cand(cand, margin=0.0):
            nonlocal best_u
            u = avg_eval(cand)
            imp = u > best_u + margin + 1e-12
            if imp.any():
                best_u[imp] = u[imp]
                best_b[imp] = cand[imp]
            return bool(imp.any())

        def pattern():
            accepted = False
            step = (hi - lo) * self.config.pattern_step_frac
            for _ in range(self.config.pattern_shrinks):
                for _ in range(self.config.pattern_passes):
                    improved = False
                    for k in range(q):
                        for sgn in (1.0, -1.0):
                            cand = best_b.copy()
                            cand[:, k] = np.clip(cand[:, k] + sgn * step, lo, hi)
                            improved |= try_cand(
                                cand, self.config.pattern_tol * step)
                    accepted |= improved
                    if not improved:
                        break
                step *= 0.5
            return accepted

        # restart with fresh full-size steps until a whole sweep finds nothing,
        # so the result is a fixed point of the search at this sample set
        for _ in range(4):
            if not pattern():
                break
        loc_b, loc_u = best_b.copy(), best_u.copy()
        moved = False
        for row in extra_points:
            moved |= try_cand(np.tile(np.asarray(row, float),
                                      (best_b.shape[0], 1)))
        # global scan along scaled marginal-value rays; per-point candidates
        # stay distinct, so the scan cannot merge the strategy's bid levels
        rays = env.truthful_bid(ctx.bidder, ctx.cls.history, ctx.theta)
        alpha_max = 2.5 if env.reverse else 1.5
        for k in range(q):
            for alpha in np.linspace(0.0, alpha_max, self.config.scan_points):
                cand = best_b.copy()
                cand[:, k] = np.clip(alpha * rays[:, k], lo, hi)
                moved |= try_cand(cand)
        if moved:  # otherwise the local result already dominates everything
            pattern()
            keep = best_u <= loc_u + self.config.scan_margin
            best_b[keep] = loc_b[keep]
            best_u[keep] = loc_u[keep]
        return best_b, best_u - u0, u0

    # ---- sweeps --------------------------------------------------------
    def _group_key(self, cls, i):
        if self.config.symmetric:
            return repr(class_signature(self.env, cls, i))
        return (cls.id, i)

    def backward_pass(self, index: ClassIndex, update_bidders, samples: int,
                      rng: np.random.Generator) -> float:
        """One backward-induction pass updating the given bidders' strategies
        at every decision class; returns the largest immediate loss seen."""
        env, cfg = self.env, self.config
        self.index = index
        self.invalidate()
        max_loss = 0.0
        for t in reversed(range(env.n_rounds)):
            groups: dict = {}
            for cls in index.by_round(t):
                if env.is_terminal(cls.history):
                    continue
                active = env.active_mask(cls.history)
                for i in update_bidders:
                    if active[i]:
                        groups.setdefault(self._group_key(cls, i), []).append((cls, i))
            for key in sorted(groups, key=repr):
                members = groups[key]
                # evaluate a lowest- and a highest-index member so that index
                # tie-breaks average out instead of sticking to one extreme
                lo_rep = min(members, key=lambda ci: ci[1])
                hi_rep = max(members, key=lambda ci: ci[1])
                rep_cls, rep_i = lo_rep
                reps = [lo_rep] if hi_rep[1] == rep_i else [lo_rep, hi_rep]
                ctxs = [self.make_context(c, b, samples, rng) for c, b in reps]
                old = self.profile[rep_i].bids_at(rep_cls)
                br, losses, _ = self.best_response(ctxs, old)
                new = update_strategy(old, br, losses, cfg.rate_scale,
                                      cfg.gamma_min, cfg.gamma_max,
                                      per_tile=cfg.per_tile_update)
                max_loss = max(max_loss, float(np.max(losses)))
                if cfg.monotone:
                    new = enforce_monotone(new)
                seen = set()
                for cls, i in members:
                    sk = self.profile[i].storage_key(cls)
                    if sk not in seen:
                        self.profile[i].set_bids(cls, new)
                        seen.add(sk)
        return max_loss

    def sweep(self, samples: int, rng: np.random.Generator) -> float:
        env, cfg = self.env, self.config
        if cfg.symmetric:
            index = enumerate_history_classes(env, self.profile, cfg.class_budget)
            return self.backward_pass(index, list(range(env.n_bidders)), samples, rng)
        max_loss = 0.0
        for i in range(env.n_bidders):
            index = enumerate_history_classes(env, self.profile, cfg.class_budget)
            max_loss = max(max_loss,
                           self.backward_pass(index, [i], samples, rng))
        return max_loss


@dataclass
class SolveResult:
    profile: PCStrategyProfile
    index: ClassIndex
    trace: list
    config: SolverConfig


def run_search(env: AuctionEnvironment, config: SolverConfig,
               tilings: list[Tiling] | None = None,
               progress=None) -> SolveResult:
    """Full search: truthful start, damped inner loop, high-fidelity polish."""
    if tilings is None:
        tilings = build_tilings(env, config.grid_cells)
    profile = init_truthful(env, tilings, None)
    if config.symmetric:
        shared: dict = {}
        shared_coarse: dict = {}
        for s in profile:
            s._key = (lambda cls, i=s.bidder, _env=env:
                      repr(class_signature(_env, cls, i)))
            s._table = shared
            s._coarse = shared_coarse
    engine = Engine(env, profile, config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    trace = []
    phases = [("inner", config.inner_iters, config.samples_inner),
              ("outer", config.outer_iters, config.samples_outer)]
    it_total = 0
    for phase, iters, samples in phases:
        for _ in range(iters):
            t0 = time.perf_counter()
            max_loss = engine.sweep(samples, rng)
            it_total += 1
            row = {"iteration": it_total, "phase": phase, "samples": samples,
                   "max_loss": max_loss,
                   "n_classes": len(engine.index) if engine.index else 0,
                   "seconds": time.perf_counter() - t0}
            trace.append(row)
            if progress is not None:
                progress(row)
            if phase == "inner" and max_loss < config.inner_tol:
                break
    # the final index reflects the finished profile
    index = enumerate_history_classes(env, profile, config.class_budget)
    engine.index = index
    engine.invalidate()
    return SolveResult(profile=profile, index=index, trace=trace, config=config)
