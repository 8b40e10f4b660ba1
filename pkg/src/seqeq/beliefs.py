"""Beliefs, Bayesian updating, the finite belief choice rule and the finite
quotient of belief-equivalent history classes.

Because strategies are piecewise constant, every posterior is the prior
truncated to a union of tiles of that bidder's tiling; supports are stored as
boolean masks over tiles.  A history class is identified by its allocation
code sequence plus the per-bidder support masks, which makes equality
decidable and the class set finite.  Class ids are content-addressed so they
are stable across runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .game import AllocationHistory, AuctionEnvironment, ContractViolation, RoundOutcome
from .tiling import Tiling

__all__ = [
    "Belief",
    "BeliefProfile",
    "HistoryClass",
    "Event",
    "LevelTable",
    "OffPathOutcome",
    "ClassBudgetExceeded",
    "build_level_table",
    "class_signature",
    "bayes_update",
    "finite_belief_choice",
    "enumerate_history_classes",
    "ClassIndex",
    "sample_types",
]

_PRICE_DECIMALS = 9


class OffPathOutcome(Exception):
    """Raised by :func:`bayes_update` when an outcome has probability zero
    under the current strategies and beliefs."""


class ClassBudgetExceeded(RuntimeError):
    """History-class enumeration hit the configured budget."""


@dataclass(frozen=True)
class Belief:
    """Prior of one bidder truncated to a union of whole tiles."""

    tiling: Tiling
    prior: object
    mask: np.ndarray  # bool over tiles

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (self.tiling.n_tiles,):
            raise ContractViolation("belief mask must have one entry per tile")
        if not mask.any():
            raise ContractViolation("belief support must be nonempty")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def support_key(self) -> bytes:
        return self.mask.tobytes()

    def tile_probs(self) -> np.ndarray:
        """Posterior probability of each tile; zero off support, sums to 1."""
        w = self.tiling.widths() * self.mask
        return w / w.sum()

    def truncate(self, mask: np.ndarray) -> "Belief":
        return Belief(self.tiling, self.prior, np.logical_and(self.mask, mask))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """I.i.d. type draws from the truncated prior (d = 1), shape (count,)."""
        probs = self.tile_probs()
        tiles = rng.choice(probs.size, size=count, p=probs)
        lo = self.tiling.lower_vertices()[:, 0]
        hi = self.tiling.upper_vertices()[:, 0]
        u = rng.random(count)
        return lo[tiles] + u * (hi[tiles] - lo[tiles])

    def sample_tiles_stratified(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Tile indices with proportional counts per tile, shuffled.  Counts
        are the floors of the expected counts plus a systematic draw over the
        fractional parts (random start, inclusion probability equal to the
        fraction), so the tile marginal is unbiased with near-minimal
        variance."""
        probs = self.tile_probs()
        raw = probs * count
        base = np.floor(raw).astype(int)
        rem = count - base.sum()
        if rem > 0:
            frac = raw - base
            step = frac.sum() / rem
            points = rng.random() * step + step * np.arange(rem)
            extra = np.searchsorted(np.cumsum(frac), points, side="right")
            np.add.at(base, np.minimum(extra, probs.size - 1), 1)
        tiles = np.repeat(np.arange(probs.size), base)
        rng.shuffle(tiles)
        return tiles


@dataclass(frozen=True)
class BeliefProfile:
    """One belief per bidder; independent across bidders (product form)."""

    beliefs: tuple

    def __getitem__(self, i: int) -> Belief:
        return self.beliefs[i]

    def __len__(self) -> int:
        return len(self.beliefs)

    def replace(self, updates: dict) -> "BeliefProfile":
        out = list(self.beliefs)
        for i, b in updates.items():
            out[i] = b
        return BeliefProfile(tuple(out))


@dataclass
class Event:
    """One public round outcome at a history class: allocation code, the
    scalar price identifying the payments, per-bidder posterior masks
    (``None`` keeps the belief unchanged) and whether the outcome has positive
    probability when everyone follows the strategy profile."""

    alloc_code: int
    price: float
    payments: np.ndarray
    masks: tuple
    on_path: bool
    succ_id: Optional[str] = None

    @property
    def key(self):
        return (int(self.alloc_code), round(float(self.price), _PRICE_DECIMALS))


@dataclass
class LevelTable:
    """Distinct bid vectors of one bidder over its support tiles, sorted by
    the allocation-relevant coordinate."""

    values: np.ndarray        # (L, q)
    coord: np.ndarray         # (L,) sort key per level
    tile_level: np.ndarray    # (n_tiles,) level index per tile, -1 off support
    masks: list               # per level: bool mask over tiles

    @property
    def n_levels(self) -> int:
        return self.coord.size


def build_level_table(bids: np.ndarray, support: np.ndarray, coord: int) -> LevelTable:
    """Group support tiles by identical bid vector."""
    bids = np.asarray(bids, dtype=float)
    support = np.asarray(support, dtype=bool)
    rows = bids[support]
    uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
    order = np.argsort(uniq[:, coord], kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    tile_level = np.full(support.size, -1, dtype=int)
    tile_level[support] = rank[inverse]
    values = uniq[order]
    masks = [tile_level == k for k in range(values.shape[0])]
    return LevelTable(values=values, coord=values[:, coord].copy(),
                      tile_level=tile_level, masks=masks)


@dataclass
class HistoryClass:
    """Equivalence class [h]: allocation sequence plus induced beliefs."""

    id: str
    history: AllocationHistory
    beliefs: BeliefProfile
    parent_id: Optional[str] = None
    on_path: bool = True
    events: Optional[list] = None          # filled on expansion
    level_tables: Optional[list] = None    # per bidder, None if inactive
    _event_lookup: Optional[dict] = field(default=None, repr=False)

    @property
    def round(self) -> int:
        return self.history.round

    def event_by_key(self, key):
        if self._event_lookup is None:
            self._event_lookup = {ev.key: j for j, ev in enumerate(self.events)}
        j = self._event_lookup.get(key)
        return None if j is None else self.events[j]


def class_id(history: AllocationHistory, beliefs: BeliefProfile) -> str:
    h = hashlib.sha1()
    h.update(repr(history.codes).encode())
    for b in beliefs.beliefs:
        h.update(b.support_key)
    return h.hexdigest()[:16]


def make_root(env: AuctionEnvironment, tilings: list[Tiling]) -> HistoryClass:
    beliefs = BeliefProfile(tuple(
        Belief(tilings[i], env.priors[i], np.ones(tilings[i].n_tiles, dtype=bool))
        for i in range(env.n_bidders)))
    history = AllocationHistory()
    return HistoryClass(id=class_id(history, beliefs), history=history, beliefs=beliefs)


def class_signature(env: AuctionEnvironment, cls: HistoryClass, i: int):
    """Hashable key describing bidder ``i``'s decision problem at ``cls`` up
    to relabelling of the opponents: round, own role and support, and the
    sorted multiset of active opponents' roles and supports."""
    active = env.active_mask(cls.history)
    own = (env.role_key(i, cls.history), cls.beliefs[i].support_key)
    opps = sorted(
        (env.role_key(j, cls.history), cls.beliefs[j].support_key)
        for j in range(env.n_bidders) if j != i and active[j])
    return (cls.round, own, tuple(opps))


# ---------------------------------------------------------------------------
# event enumeration
# ---------------------------------------------------------------------------

def compute_level_tables(env: AuctionEnvironment, cls: HistoryClass, profile) -> list:
    """Per-bidder level tables of the strategy profile at ``cls`` (None for
    inactive bidders)."""
    if cls.level_tables is not None:
        return cls.level_tables
    active = env.active_mask(cls.history)
    coord = env.level_coord(cls.history)
    tables = []
    for j in range(env.n_bidders):
        if not active[j]:
            tables.append(None)
            continue
        tables.append(build_level_table(profile[j].bids_at(cls),
                                        cls.beliefs[j].mask, coord))
    cls.level_tables = tables
    return tables


def _generic_enumerate(env: AuctionEnvironment, cls: HistoryClass, tables: list,
                       budget: int = 2_000_000) -> list:
    """Fallback event enumeration: run the round rules over the full product
    of support bid levels and group outcomes.  Exact but only viable when the
    product of level counts is small."""
    active = env.active_mask(cls.history)
    idx_active = [j for j in range(env.n_bidders) if active[j]]
    sizes = [tables[j].n_levels for j in idx_active]
    total = int(np.prod(sizes)) if sizes else 0
    if total == 0 or total > budget:
        raise ClassBudgetExceeded(
            f"generic event enumeration needs {total} combinations (budget {budget})")
    grids = np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij")
    combos = np.stack([g.ravel() for g in grids], axis=1)  # (total, n_active)
    q = env.bid_dim(cls.history)
    bids = np.zeros((total, env.n_bidders, q))
    for col, j in enumerate(idx_active):
        bids[:, j, :] = tables[j].values[combos[:, col]]
    codes, payments = env.outcome_batch(cls.history, bids)
    prices = np.round(np.array([env.event_price(int(c), p)
                                for c, p in zip(codes, payments)]), _PRICE_DECIMALS)
    events: dict = {}
    for row in range(total):
        key = (int(codes[row]), float(prices[row]))
        ev = events.get(key)
        if ev is None:
            masks = [np.zeros(tables[j].tile_level.size, dtype=bool) if active[j] else None
                     for j in range(env.n_bidders)]
            ev = Event(alloc_code=int(codes[row]), price=float(prices[row]),
                       payments=payments[row].copy(),
                       masks=masks, on_path=True)
            events[key] = ev
        for col, j in enumerate(idx_active):
            np.logical_or(ev.masks[j], tables[j].masks[combos[row, col]], out=ev.masks[j])
    out = list(events.values())
    for ev in out:
        ev.masks = tuple(m if m is None else m for m in ev.masks)
    return out


def enumerate_events(env: AuctionEnvironment, cls: HistoryClass, profile) -> list:
    """All public outcomes of the next round at ``cls``, with posterior masks.

    The list covers every outcome producible by on-path play plus, for
    environments where the round winner keeps playing, one 'bidder i wins at
    level e' event per (bidder, level), so the off-path rounding rule always
    resolves into this table.  When the environment sets ``event_bins``,
    events of one allocation code are merged into at most that many
    contiguous price bins (a coarser public signal that keeps the class graph
    tractable on large instances).
    """
    if cls.events is not None:
        return cls.events
    tables = compute_level_tables(env, cls, profile)
    events = env.enumerate_round_events(cls, tables) if hasattr(env, "enumerate_round_events") else None
    if events is None:
        events = _generic_enumerate(env, cls, tables)
    events.sort(key=lambda ev: ev.key)
    bins = getattr(env, "event_bins", None)
    if bins:
        events = _coarsen_events(env, events, int(bins))
    cls.events = events
    cls._event_lookup = None
    return events


def _coarsen_events(env: AuctionEnvironment, events: list, bins: int) -> list:
    """Merge each allocation code's price-sorted events into ``bins``
    contiguous groups.

    The merged mask is the union over the group, which is the exact posterior
    support for observing the coarser signal 'this code at a price in the
    bin'.  The recorded price is the group edge matching the off-path
    rounding direction, so any price inside the bin resolves to its event.
    """
    by_code: dict = {}
    for ev in events:
        by_code.setdefault(int(ev.alloc_code), []).append(ev)
    out = []
    for code, evs in sorted(by_code.items()):
        if len(evs) <= bins:
            out.extend(evs)
            continue
        bounds = np.linspace(0, len(evs), bins + 1).astype(int)
        for a, b in zip(bounds[:-1], bounds[1:]):
            if a == b:
                continue
            group = evs[a:b]
            rep = group[-1] if env.reverse else group[0]
            masks = []
            for j in range(env.n_bidders):
                if rep.masks[j] is None:
                    masks.append(None)
                    continue
                m = np.zeros_like(rep.masks[j])
                for e in group:
                    np.logical_or(m, e.masks[j], out=m)
                masks.append(m)
            out.append(Event(alloc_code=code, price=rep.price,
                             payments=rep.payments, masks=tuple(masks),
                             on_path=any(e.on_path for e in group)))
    out.sort(key=lambda ev: ev.key)
    return out


# ---------------------------------------------------------------------------
# updating
# ---------------------------------------------------------------------------

def _child_beliefs(env: AuctionEnvironment, cls: HistoryClass, ev: Event) -> BeliefProfile:
    updates = {}
    for j, mask in enumerate(ev.masks):
        if mask is None:
            continue
        joint = np.logical_and(cls.beliefs[j].mask, mask)
        if not joint.any():
            # off-path fallback: the observation contradicts the public
            # support entirely; keep the previous belief
            continue
        updates[j] = Belief(cls.beliefs[j].tiling, cls.beliefs[j].prior, joint)
    return cls.beliefs.replace(updates)


def bayes_update(env: AuctionEnvironment, profile, cls: HistoryClass,
                 outcome: RoundOutcome) -> BeliefProfile:
    """Posterior profile after observing ``outcome`` at ``cls`` under the
    profile's strategies.  Raises :class:`OffPathOutcome` when the outcome has
    zero probability (callers should then use :func:`finite_belief_choice`)."""
    events = enumerate_events(env, cls, profile)
    price = round(float(env.event_price(outcome.alloc_code, outcome.payments)), _PRICE_DECIMALS)
    ev = cls.event_by_key((int(outcome.alloc_code), price))
    if ev is None or not ev.on_path:
        raise OffPathOutcome(f"outcome {outcome.alloc_code}@{price} has probability zero")
    return _child_beliefs(env, cls, ev)


def resolve_event(env: AuctionEnvironment, profile, cls: HistoryClass,
                  outcome: RoundOutcome) -> Event:
    """Event of the class table matching ``outcome``, rounding an off-path
    price down (in competitiveness) to the nearest on-path event with the same
    allocation: a win at a price between two on-path bids is treated as a win
    at the lower one, below all on-path bids as the lowest."""
    events = enumerate_events(env, cls, profile)
    price = round(float(env.event_price(outcome.alloc_code, outcome.payments)), _PRICE_DECIMALS)
    ev = cls.event_by_key((int(outcome.alloc_code), price))
    if ev is not None:
        return ev
    same = [e for e in events if e.alloc_code == int(outcome.alloc_code)]
    if not same:
        # no event with this allocation at all: keep beliefs unchanged
        return Event(alloc_code=int(outcome.alloc_code), price=price,
                     payments=outcome.payments, masks=(None,) * env.n_bidders,
                     on_path=False)
    if env.reverse:
        above = [e for e in same if e.price >= price]
        return min(above, key=lambda e: e.price) if above else max(same, key=lambda e: e.price)
    below = [e for e in same if e.price <= price]
    return max(below, key=lambda e: e.price) if below else min(same, key=lambda e: e.price)


def finite_belief_choice(env: AuctionEnvironment, profile, cls: HistoryClass,
                         outcome: RoundOutcome) -> BeliefProfile:
    """Total mapping of any (possibly off-path) outcome to one of the finitely
    many belief profiles induced by the strategy profile at ``cls``."""
    ev = resolve_event(env, profile, cls, outcome)
    return _child_beliefs(env, cls, ev)


# ---------------------------------------------------------------------------
# class enumeration
# ---------------------------------------------------------------------------

class ClassIndex:
    """Finite set of reachable history classes with their successor events."""

    def __init__(self, env: AuctionEnvironment, root: HistoryClass):
        self.env = env
        self.root_id = root.id
        self.classes: dict[str, HistoryClass] = {root.id: root}

    def __getitem__(self, cid: str) -> HistoryClass:
        return self.classes[cid]

    def __len__(self) -> int:
        return len(self.classes)

    def by_round(self, t: int) -> list:
        return [c for c in self.classes.values() if c.round == t]

    @property
    def max_round(self) -> int:
        return max(c.round for c in self.classes.values())

    def decision_classes(self) -> list:
        """Classes at which another round is still played."""
        return [c for c in self.classes.values() if not self.env.is_terminal(c.history)]


def enumerate_history_classes(env: AuctionEnvironment, profile,
                              class_budget: int = 500_000) -> ClassIndex:
    """Breadth-first expansion of the history-class quotient under ``profile``.

    The set is closed under Bayesian updating on path and under the rounding
    rule off path, because every event's successor is registered and the event
    tables contain the rounding rule's image.
    """
    tilings = profile.tilings
    root = make_root(env, tilings)
    index = ClassIndex(env, root)
    frontier = [root]
    while frontier:
        nxt = []
        for cls in frontier:
            # the last round's children are terminal and carry no decisions,
            # so those classes never need their event tables expanded here
            if env.is_terminal(cls.history) or cls.round >= env.n_rounds - 1:
                continue
            events = enumerate_events(env, cls, profile)
            for ev in events:
                beliefs = _child_beliefs(env, cls, ev)
                history = cls.history.child(ev.alloc_code)
                cid = class_id(history, beliefs)
                ev.succ_id = cid
                child = index.classes.get(cid)
                if child is None:
                    child = HistoryClass(id=cid, history=history, beliefs=beliefs,
                                         parent_id=cls.id,
                                         on_path=cls.on_path and ev.on_path)
                    index.classes[cid] = child
                    if len(index.classes) > class_budget:
                        raise ClassBudgetExceeded(
                            f"history-class enumeration exceeded budget {class_budget}")
                    nxt.append(child)
                elif cls.on_path and ev.on_path and not child.on_path:
                    child.on_path = True
        frontier = nxt
    return index


def sample_types(beliefs: BeliefProfile, count: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. type profiles from the product posterior, shape (count, n)."""
    if count <= 0:
        raise ContractViolation("sample count must be positive")
    cols = [b.sample(rng, count) for b in beliefs.beliefs]
    return np.stack(cols, axis=1)
