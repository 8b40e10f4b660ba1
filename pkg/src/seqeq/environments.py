"""Benchmark sequential auctions and their analytical equilibria.

Two families are built in:

* ``SequentialSales`` -- an auctioneer sells K identical goods to N
  single-minded bidders over K rounds (first- or second-price sealed bid);
  the round winner leaves the auction.
* ``SplitAward`` -- a two-round procurement auction where bidders submit a
  split bid for 50% and a sole bid for 100% of the business; a split award
  triggers a second first-price round for the remaining half.

Both provide closed-form (or quadrature) equilibrium bid functions used as
validation oracles, plus exact round-event enumerators so the belief engine
does not need to expand the full product of bid levels.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate

from .beliefs import Event, HistoryClass, LevelTable
from .game import (AllocationHistory, AuctionEnvironment, ContractViolation,
                   TypeSpace, UniformPrior)
from .tiling import Tiling

__all__ = [
    "SequentialSales",
    "SplitAward",
    "make_environment",
    "analytical_sequential_sales",
    "analytical_split_award",
    "OracleUnavailable",
    "l2_distance_values",
    "l2_distance",
]


class OracleUnavailable(ValueError):
    """No published analytical equilibrium for the requested regime."""


def _union(masks: list[np.ndarray], size: int) -> np.ndarray:
    out = np.zeros(size, dtype=bool)
    for m in masks:
        np.logical_or(out, m, out=out)
    return out


class SequentialSales(AuctionEnvironment):
    """K identical goods sold over K rounds to N single-minded bidders."""

    exits_on_win = True
    reverse = False

    def __init__(self, n: int, k_goods: int, payment_rule: str = "second",
                 theta_max: float = 1.0, event_bins: int | None = None):
        if not 1 <= k_goods < n:
            raise ContractViolation("sequential sales requires 1 <= K < N")
        if payment_rule not in ("first", "second"):
            raise ContractViolation(f"unknown payment rule {payment_rule!r}")
        if event_bins is not None and event_bins < 2:
            raise ContractViolation("event_bins must be at least 2")
        self.event_bins = event_bins
        self.n_bidders = n
        self.k_goods = k_goods
        self.n_rounds = k_goods
        self.payment_rule = payment_rule
        self.theta_max = float(theta_max)
        space = TypeSpace(np.zeros(1), np.array([self.theta_max]))
        self.type_spaces = [space] * n
        self.priors = [UniformPrior(space)] * n

    # ---- shape ---------------------------------------------------------
    def bid_dim(self, history: AllocationHistory) -> int:
        return 1

    def bid_range(self, history: AllocationHistory):
        return (0.0, self.theta_max)

    def active_mask(self, history: AllocationHistory) -> np.ndarray:
        mask = np.ones(self.n_bidders, dtype=bool)
        for w in history.codes:
            mask[w] = False
        return mask

    def role_key(self, i: int, history: AllocationHistory):
        return bool(self.active_mask(history)[i])

    def win_alloc_code(self, history: AllocationHistory, i: int):
        return i

    # ---- rules ---------------------------------------------------------
    def outcome_batch(self, history: AllocationHistory, bids: np.ndarray,
                      tie_favor=None):
        b = np.array(bids[:, :, 0], dtype=float)
        active = self.active_mask(history)
        b[:, ~active] = -np.inf
        key = b
        if tie_favor is not None:
            fav, sign = tie_favor
            key = b.copy()
            key[:, fav] += sign * 1e-9  # rank nudge only; prices stay exact
        codes = np.argmax(key, axis=1)  # first maximum -> lowest index wins ties
        m = b.shape[0]
        rows = np.arange(m)
        if self.payment_rule == "first":
            price = b[rows, codes]
        else:
            tmp = b.copy()
            tmp[rows, codes] = -np.inf
            price = np.max(tmp, axis=1)
            price = np.where(np.isfinite(price), price, 0.0)  # single active bidder
        payments = np.zeros((m, self.n_bidders))
        payments[rows, codes] = price
        return codes, payments

    def utility_batch(self, i, theta, history, codes, payments):
        win = codes == i
        return win * theta - payments[:, i]

    def truthful_bid(self, i, history, theta):
        return np.asarray(theta, dtype=float).reshape(-1, 1)

    def event_price(self, alloc_code: int, payments) -> float:
        return float(payments[int(alloc_code)])

    def event_price_batch(self, codes, payments):
        return payments[np.arange(codes.size), codes]

    # ---- exact event enumeration --------------------------------------
    def enumerate_round_events(self, cls: HistoryClass, tables: list):
        active = [j for j in range(self.n_bidders) if tables[j] is not None]
        if self.payment_rule == "first":
            return self._events_first_price(cls, tables, active)
        return self._events_second_price(cls, tables, active)

    def _events_first_price(self, cls, tables, active):
        events = []
        for w in active:
            tw: LevelTable = tables[w]
            for a, p in enumerate(tw.coord):
                masks: list = [None] * self.n_bidders
                masks[w] = tw.masks[a].copy()
                ok = True
                for j in active:
                    if j == w:
                        continue
                    tj: LevelTable = tables[j]
                    allowed = [tj.masks[l] for l, v in enumerate(tj.coord)
                               if v < p or (v == p and j > w)]
                    if allowed:
                        masks[j] = _union(allowed, tj.tile_level.size)
                    else:
                        ok = False
                        masks[j] = tj.masks[0].copy()  # round down to the lowest level
                payments = np.zeros(self.n_bidders)
                payments[w] = p
                events.append(Event(alloc_code=w, price=float(p), payments=payments,
                                    masks=tuple(masks), on_path=ok))
        return events

    def _events_second_price(self, cls, tables, active):
        events = []
        if len(active) == 1:
            # uncontested final good: the lone bidder wins at price zero
            w = active[0]
            masks: list = [None] * self.n_bidders
            masks[w] = _union(list(tables[w].masks), tables[w].tile_level.size)
            payments = np.zeros(self.n_bidders)
            events.append(Event(alloc_code=w, price=0.0, payments=payments,
                                masks=tuple(masks), on_path=True))
            return events
        for w in active:
            losers = [j for j in active if j != w]
            prices = np.unique(np.concatenate([tables[j].coord for j in losers]))
            for p in prices:
                ev = self._second_price_event(tables, active, w, float(p))
                events.append(ev)
        return events

    def _second_price_event(self, tables, active, w, p):
        losers = [j for j in active if j != w]
        tw: LevelTable = tables[w]
        n_tiles_w = tw.tile_level.size

        def has(j, pred):
            return any(pred(v) for v in tables[j].coord)

        # joint feasibility: someone can set the price and everyone else fit below
        all_reach = all(has(j, lambda v, pp=p: v <= p) for j in losers)
        witness = [j for j in losers if p in tables[j].coord]
        w_above = has(w, lambda v: v > p)
        w_at = p in tw.coord
        # tie completion: every loser at p must have a higher index than w
        tie_ok = (w_at and any(j > w for j in witness)
                  and all(has(j, lambda v, pp=p: v <= p) for j in losers if j > w)
                  and all(has(j, lambda v, pp=p: v < p) for j in losers if j < w))
        base = bool(witness) and all_reach and (w_above or tie_ok)

        w_levels = [tw.masks[a] for a, v in enumerate(tw.coord) if v > p]
        if tie_ok:
            w_levels += [tw.masks[a] for a, v in enumerate(tw.coord) if v == p]
        if w_levels:
            w_mask = _union(w_levels, n_tiles_w)
            w_ok = True
        else:
            w_mask = tw.masks[-1].copy()  # round down: the highest on-path level
            w_ok = False

        masks: list = [None] * self.n_bidders
        masks[w] = w_mask
        ok = base and w_ok
        for j in losers:
            tj: LevelTable = tables[j]
            others = [k for k in losers if k != j]
            others_reach = all(has(k, lambda v, pp=p: v <= p) for k in others)
            other_witness = any(
                p in tables[k].coord and (w_above or (w_at and w < k)) for k in others)
            allowed = []
            for l, v in enumerate(tj.coord):
                if v > p:
                    continue
                if v == p:
                    if (w_above or (w_at and w < j)) and others_reach:
                        allowed.append(tj.masks[l])
                else:
                    if other_witness and others_reach:
                        allowed.append(tj.masks[l])
            if allowed:
                masks[j] = _union(allowed, tj.tile_level.size)
            else:
                ok = False
                below = [tj.masks[l] for l, v in enumerate(tj.coord) if v <= p]
                masks[j] = _union(below, tj.tile_level.size) if below else tj.masks[0].copy()
        payments = np.zeros(self.n_bidders)
        payments[w] = p
        return Event(alloc_code=w, price=p, payments=payments,
                     masks=tuple(masks), on_path=ok)


class SplitAward(AuctionEnvironment):
    """Two-round combinatorial split-award procurement auction.

    Round 1 bids are (split, sole) pairs; a split award at price p moves to a
    first-price round for the remaining half, a sole award ends the game.
    Payments are negative (money received by the supplier); valuations are
    negated costs, so the forward quasi-linear utility formula applies
    unchanged.
    """

    exits_on_win = False
    reverse = True

    SPLIT, SOLE = 0, 1

    def __init__(self, n: int = 3, cost_share: float = 0.2,
                 theta_lo: float = 1.0, theta_hi: float = 2.0):
        if n < 2:
            raise ContractViolation("split-award needs at least two bidders")
        if not 0.0 < cost_share < 1.0:
            raise ContractViolation("cost share C must lie in (0, 1)")
        self.n_bidders = n
        self.n_rounds = 2
        self.cost_share = float(cost_share)
        self.theta_lo = float(theta_lo)
        self.theta_hi = float(theta_hi)
        space = TypeSpace(np.array([self.theta_lo]), np.array([self.theta_hi]))
        self.type_spaces = [space] * n
        self.priors = [UniformPrior(space)] * n

    # codes: round 1: w = split award to bidder w, n + w = sole award (ends);
    # round 2: w = remaining split to bidder w.

    def bid_dim(self, history: AllocationHistory) -> int:
        return 2 if history.round == 0 else 1

    def bid_range(self, history: AllocationHistory):
        return (0.0, 2.0 * self.theta_hi)

    def is_terminal(self, history: AllocationHistory) -> bool:
        if history.round >= self.n_rounds:
            return True
        return history.round == 1 and history.codes[0] >= self.n_bidders

    def active_mask(self, history: AllocationHistory) -> np.ndarray:
        return np.ones(self.n_bidders, dtype=bool)

    def role_key(self, i: int, history: AllocationHistory):
        if history.round == 0:
            return "start"
        return "winner" if history.codes[0] == i else "loser"

    def win_alloc_code(self, history: AllocationHistory, i: int):
        return i  # the split-award branch; a sole award ends the game

    def outcome_batch(self, history: AllocationHistory, bids: np.ndarray,
                      tie_favor=None):
        m = bids.shape[0]
        rows = np.arange(m)
        payments = np.zeros((m, self.n_bidders))
        nudge = np.zeros(self.n_bidders)
        if tie_favor is not None:
            fav, sign = tie_favor
            nudge[fav] = -sign * 1e-9  # lower key is more competitive here
        if history.round == 0:
            sp = bids[:, :, 0]
            so = bids[:, :, 1]
            wsp = np.argmin(sp + nudge, axis=1)
            wso = np.argmin(so + nudge, axis=1)
            split = 2.0 * sp[rows, wsp] <= so[rows, wso]
            codes = np.where(split, wsp, self.n_bidders + wso)
            price = np.where(split, sp[rows, wsp], so[rows, wso])
            payments[rows, codes % self.n_bidders] = -price
            return codes, payments
        b = bids[:, :, 0]
        codes = np.argmin(b + nudge, axis=1)
        payments[rows, codes] = -b[rows, codes]
        return codes, payments

    def _own_cost(self, i: int, history: AllocationHistory, theta):
        if history.round == 0:
            return self.cost_share * theta
        c = 1.0 - self.cost_share if history.codes[0] == i else self.cost_share
        return c * theta

    def utility_batch(self, i, theta, history, codes, payments):
        if history.round == 0:
            split_win = codes == i
            sole_win = codes == self.n_bidders + i
            value = split_win * (-self.cost_share * theta) + sole_win * (-theta)
        else:
            value = (codes == i) * (-self._own_cost(i, history, theta))
        return value - payments[:, i]

    def truthful_bid(self, i, history, theta):
        theta = np.asarray(theta, dtype=float)
        if history.round == 0:
            return np.stack([self.cost_share * theta, theta], axis=1)
        return self._own_cost(i, history, theta).reshape(-1, 1)

    def event_price(self, alloc_code: int, payments) -> float:
        return float(-payments[int(alloc_code) % self.n_bidders])

    def event_price_batch(self, codes, payments):
        return -payments[np.arange(codes.size), codes % self.n_bidders]

    # ---- exact event enumeration --------------------------------------
    def enumerate_round_events(self, cls: HistoryClass, tables: list):
        if cls.history.round != 0:
            return None  # final round: generic fallback (rarely needed)
        n = self.n_bidders
        events = []
        for w in range(n):
            tw: LevelTable = tables[w]
            for p in np.unique(tw.coord):
                events.append(self._split_event(tables, w, float(p)))
            for p in np.unique(tw.values[:, 1]):
                events.append(self._sole_event(tables, w, float(p)))
        # identical (code, price) events can arise from several sole levels
        seen = {}
        for ev in events:
            seen.setdefault(ev.key, ev)
        return list(seen.values())

    def _split_event(self, tables, w, p):
        n = self.n_bidders
        masks: list = [None] * n
        ok = True
        for j in range(n):
            tj: LevelTable = tables[j]
            sp, so = tj.values[:, 0], tj.values[:, 1]
            if j == w:
                sel = (sp == p) & (so >= 2.0 * p)
                fallback = sp == p
            else:
                comp = (sp > p) | ((sp == p) & (j > w))
                sel = comp & (so >= 2.0 * p)
                fallback = None
            if sel.any():
                masks[j] = _union([tj.masks[l] for l in np.flatnonzero(sel)],
                                  tj.tile_level.size)
            else:
                ok = False
                if fallback is not None and fallback.any():
                    masks[j] = _union([tj.masks[l] for l in np.flatnonzero(fallback)],
                                      tj.tile_level.size)
                else:
                    # round toward the least competitive levels
                    top = np.flatnonzero(tj.coord == tj.coord.max())
                    masks[j] = _union([tj.masks[l] for l in top], tj.tile_level.size)
        payments = np.zeros(n)
        payments[w] = -p
        return Event(alloc_code=w, price=p, payments=payments,
                     masks=tuple(masks), on_path=ok)

    def _sole_event(self, tables, w, p):
        n = self.n_bidders
        ok = True
        for j in range(n):
            tj: LevelTable = tables[j]
            sp, so = tj.values[:, 0], tj.values[:, 1]
            if j == w:
                sel = (so == p) & (2.0 * sp > p)
            else:
                sel = ((so > p) | ((so == p) & (j > w))) & (2.0 * sp > p)
            if not sel.any():
                ok = False
        payments = np.zeros(n)
        payments[w] = -p
        return Event(alloc_code=n + w, price=p, payments=payments,
                     masks=(None,) * n, on_path=ok)


def make_environment(kind: str, **params) -> AuctionEnvironment:
    """Config-file entry point."""
    if kind == "sequential_sales":
        return SequentialSales(**params)
    if kind == "split_award":
        return SplitAward(**params)
    raise ContractViolation(f"unknown environment kind {kind!r}")


# ---------------------------------------------------------------------------
# analytical oracles
# ---------------------------------------------------------------------------

def analytical_sequential_sales(theta, round_k: int, n: int, k_goods: int,
                                payment_rule: str = "second"):
    """Equilibrium bid of a type-theta bidder in round k (1-based).

    First price: (N - K) / (N - k + 1) * theta; second price is shifted by one
    round: (N - K) / (N - k) * theta, so the final round is truthful.
    """
    if not 1 <= round_k <= k_goods:
        raise ContractViolation("round index out of range")
    theta = np.asarray(theta, dtype=float)
    if payment_rule == "first":
        return (n - k_goods) / (n - round_k + 1) * theta
    if payment_rule == "second":
        return (n - k_goods) / (n - round_k) * theta
    raise ContractViolation(f"unknown payment rule {payment_rule!r}")


def _check_strong_diseconomies(env: SplitAward):
    bound = env.theta_lo / (env.theta_lo + env.theta_hi)
    if env.n_bidders <= 2 or env.cost_share >= bound:
        raise OracleUnavailable(
            "analytical split-award equilibrium requires n > 2 and "
            f"C < theta_lo/(theta_lo+theta_hi) = {bound:.4f}")


def _split_loser_bid(theta: float, env: SplitAward) -> float:
    """Second-round split bid of a first-round loser."""
    n, c = env.n_bidders, env.cost_share
    lo, hi = env.theta_lo, env.theta_hi
    surv = (hi - theta) / (hi - lo)  # 1 - F(theta)
    if surv ** (n - 2) < 1e-12:
        return c * theta
    integral, _ = integrate.quad(
        lambda t: ((hi - t) / (hi - lo)) ** (n - 2), theta, hi)
    return c * theta + c * integral / surv ** (n - 2)


def analytical_split_award(theta, stage: str, env: SplitAward):
    """Equilibrium bids of the split-award auction under strong diseconomies.

    ``stage`` is one of ``round1`` (first-round split bid), ``round2_winner``
    or ``round2_loser``.
    """
    _check_strong_diseconomies(env)
    n, c = env.n_bidders, env.cost_share
    lo, hi = env.theta_lo, env.theta_hi
    theta_arr = np.atleast_1d(np.asarray(theta, dtype=float))
    if stage == "round2_winner":
        out = theta_arr * (1.0 - c)
    elif stage == "round2_loser":
        out = np.array([_split_loser_bid(t, env) for t in theta_arr])
    elif stage == "round1":
        def bid(t):
            surv = (hi - t) / (hi - lo)
            if surv ** (n - 1) < 1e-10:
                # removable singularity at the upper end: one-sided limit
                return _split_loser_bid(hi, env)
            num, _ = integrate.quad(
                lambda s: _split_loser_bid(s, env) * (n - 1)
                * ((hi - s) / (hi - lo)) ** (n - 2) / (hi - lo),
                t, hi, epsrel=1e-8)
            return num / surv ** (n - 1)
        out = np.array([bid(t) for t in theta_arr])
    else:
        raise ContractViolation(f"unknown split-award stage {stage!r}")
    return out if np.ndim(theta) else float(out[0])


# ---------------------------------------------------------------------------
# L2 distances to an oracle
# ---------------------------------------------------------------------------

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(8)


def l2_distance_values(values: np.ndarray, oracle, tiling: Tiling,
                       mask: np.ndarray | None = None) -> float:
    """sqrt( int (sigma - oracle)^2 dmu ) for a piecewise-constant sigma.

    ``mu`` is the uniform prior restricted to the masked tiles; the oracle is
    integrated per tile with 8-point Gauss-Legendre quadrature.
    """
    values = np.asarray(values, dtype=float)
    lo = tiling.lower_vertices()[:, 0]
    hi = tiling.upper_vertices()[:, 0]
    if mask is None:
        mask = np.ones(lo.size, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractViolation("empty integration support")
    total = np.sum(hi[mask] - lo[mask])
    acc = 0.0
    for k in np.flatnonzero(mask):
        half = 0.5 * (hi[k] - lo[k])
        pts = 0.5 * (lo[k] + hi[k]) + half * _GAUSS_X
        diff = values[k] - np.asarray(oracle(pts), dtype=float)
        acc += half * np.sum(_GAUSS_W * diff * diff) / total
    return float(np.sqrt(acc))


def l2_distance(strategy, oracle, cls, measure: str = "belief",
                bundle: int = 0, interior_drop: int = 0) -> float:
    """Distance of one bidder's piecewise-constant bids at a history class
    from an analytical bid function.

    ``measure`` selects the integration weight: the class's belief support or
    the whole prior.  ``interior_drop`` excludes that many topmost support
    tiles (reverse-auction high-type artifact); NaN is returned when that
    leaves nothing to integrate over.
    """
    if measure not in ("belief", "prior"):
        raise ContractViolation(f"unknown measure {measure!r}")
    bids = strategy.bids_at(cls)[:, bundle]
    tiling = strategy.tiling
    if measure == "belief":
        mask = cls.beliefs[strategy.bidder].mask.copy()
    else:
        mask = np.ones(tiling.n_tiles, dtype=bool)
    if interior_drop:
        idx = np.flatnonzero(mask)
        mask[idx[-interior_drop:]] = False
        if not mask.any():
            return float("nan")
    return l2_distance_values(bids, oracle, tiling, mask)
