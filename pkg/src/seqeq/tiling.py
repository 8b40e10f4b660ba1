"""Hyperrectangular tilings of type spaces and piecewise-constant strategies.

A strategy assigns one bid vector to every (history class, tile) pair and is
constant on each half-open tile.  Strategies are versioned snapshots: updates
return new per-class arrays, so concurrent readers of one snapshot are safe.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .game import AuctionEnvironment, ContractViolation, TypeSpace

__all__ = [
    "Hyperrectangle",
    "Tiling",
    "locate_tile",
    "vertices",
    "PCStrategy",
    "PCStrategyProfile",
    "init_truthful",
    "update_rate",
    "update_strategy",
    "enforce_monotone",
    "isotonic_projection",
]


@dataclass(frozen=True)
class Hyperrectangle:
    """Half-open box [lower, upper) in R^d."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.size < 1 or lo.shape != hi.shape or not np.all(lo < hi):
            raise ContractViolation("hyperrectangle requires lower < upper componentwise, d >= 1")

    @property
    def dimension(self) -> int:
        return self.lower.size


def vertices(tile: Hyperrectangle) -> list[np.ndarray]:
    """The 2^d corner points of a tile."""
    corners = []
    for picks in itertools.product(*zip(tile.lower, tile.upper)):
        corners.append(np.array(picks, dtype=float))
    return corners


class Tiling:
    """Product grid of half-open tiles covering a :class:`TypeSpace`.

    ``breakpoints`` is one strictly increasing array per dimension, starting at
    the space's lower bound and ending at its upper bound.  Tiles are ordered
    lexicographically by their per-dimension cell index; for d = 1 this is the
    plain sorted grid.
    """

    def __init__(self, space: TypeSpace, breakpoints):
        self.space = space
        if np.ndim(breakpoints[0]) == 0:
            breakpoints = [breakpoints]
        self.breakpoints = [np.asarray(b, dtype=float) for b in breakpoints]
        if len(self.breakpoints) != space.dimension:
            raise ContractViolation("need one breakpoint grid per dimension")
        for d, b in enumerate(self.breakpoints):
            if b.size < 2 or np.any(np.diff(b) <= 0):
                raise ContractViolation("breakpoints must be strictly increasing with >= 2 entries")
            if not (np.isclose(b[0], space.lower[d]) and np.isclose(b[-1], space.upper[d])):
                raise ContractViolation("breakpoints must span the type space")
        self._cells = [b.size - 1 for b in self.breakpoints]

    @classmethod
    def uniform(cls, space: TypeSpace, cells_per_dim) -> "Tiling":
        if np.ndim(cells_per_dim) == 0:
            cells_per_dim = [int(cells_per_dim)] * space.dimension
        grids = [np.linspace(space.lower[d], space.upper[d], int(c) + 1)
                 for d, c in enumerate(cells_per_dim)]
        return cls(space, grids)

    def __len__(self) -> int:
        return int(np.prod(self._cells))

    @property
    def n_tiles(self) -> int:
        return len(self)

    def tile(self, index: int) -> Hyperrectangle:
        idx = np.unravel_index(index, self._cells)
        lo = np.array([self.breakpoints[d][i] for d, i in enumerate(idx)])
        hi = np.array([self.breakpoints[d][i + 1] for d, i in enumerate(idx)])
        return Hyperrectangle(lo, hi)

    def lower_vertices(self) -> np.ndarray:
        """Lower corner of every tile, shape (n_tiles, d)."""
        per_dim = [b[:-1] for b in self.breakpoints]
        mesh = np.meshgrid(*per_dim, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def upper_vertices(self) -> np.ndarray:
        per_dim = [b[1:] for b in self.breakpoints]
        mesh = np.meshgrid(*per_dim, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def widths(self) -> np.ndarray:
        """Tile volumes, shape (n_tiles,)."""
        per_dim = [np.diff(b) for b in self.breakpoints]
        mesh = np.meshgrid(*per_dim, indexing="ij")
        vol = np.ones_like(mesh[0])
        for m in mesh:
            vol = vol * m
        return vol.ravel()

    def locate(self, theta) -> int:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if not self.space.contains(theta):
            raise ContractViolation(f"type {theta!r} outside the tiled space")
        idx = []
        for d, b in enumerate(self.breakpoints):
            k = int(np.searchsorted(b, theta[d], side="right")) - 1
            # the closed upper boundary of the space folds into the last tile
            k = min(max(k, 0), self._cells[d] - 1)
            idx.append(k)
        return int(np.ravel_multi_index(idx, self._cells))

    def locate_batch(self, thetas: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`locate` for d = 1 inputs of shape (m,)."""
        b = self.breakpoints[0]
        k = np.searchsorted(b, thetas, side="right") - 1
        return np.clip(k, 0, self._cells[0] - 1)


def locate_tile(tiling: Tiling, theta) -> int:
    """Index of the unique half-open tile containing ``theta``."""
    return tiling.locate(theta)


class PCStrategy:
    """Piecewise-constant bid function of one bidder, keyed by history class.

    ``bids_at`` is total: a class never updated first falls back to the most
    recently stored bids for the same round and role constellation (a warm
    start for classes whose belief supports have drifted between updates) and
    only then to the truthful initialisation, which keeps the strategy
    well-defined on every reachable class.  ``key`` maps a history class to
    the storage key; the default keys on the class id, a solver in symmetric
    mode may key on the class signature instead to share bids across
    equivalent classes.
    """

    def __init__(self, bidder: int, tiling: Tiling, env: AuctionEnvironment, key=None):
        self.bidder = bidder
        self.tiling = tiling
        self.env = env
        self._key = key if key is not None else (lambda cls: cls.id)
        self._table: dict = {}
        self._coarse: dict = {}

    def storage_key(self, cls):
        return self._key(cls)

    def coarse_key(self, cls):
        """Round, own role and support, and opponent roles, ignoring the
        opponents' belief supports (the part that drifts between updates)."""
        active = self.env.active_mask(cls.history)
        own = (self.env.role_key(self.bidder, cls.history),
               cls.beliefs[self.bidder].support_key)
        opps = tuple(sorted(repr(self.env.role_key(j, cls.history))
                            for j in range(self.env.n_bidders)
                            if j != self.bidder and active[j]))
        return (cls.round, repr(own), opps)

    def bids_at(self, cls) -> np.ndarray:
        """Bid matrix (n_tiles, q) at history class ``cls``."""
        arr = self._table.get(self._key(cls))
        if arr is None:
            arr = self._coarse.get(self.coarse_key(cls))
            q = self.env.bid_dim(cls.history)
            if arr is None or arr.shape != (self.tiling.n_tiles, q):
                arr = self._default_bids(cls)
        return arr

    def has_entry(self, cls) -> bool:
        return self._key(cls) in self._table

    def set_bids(self, cls, bids: np.ndarray) -> None:
        bids = np.asarray(bids, dtype=float)
        q = self.env.bid_dim(cls.history)
        if bids.shape != (self.tiling.n_tiles, q):
            raise ContractViolation(
                f"bid table shape {bids.shape} does not match ({self.tiling.n_tiles}, {q})")
        self._table[self._key(cls)] = bids
        self._coarse[self.coarse_key(cls)] = bids

    def _default_bids(self, cls) -> np.ndarray:
        theta = self.tiling.lower_vertices()[:, 0]
        return self.env.truthful_bid(self.bidder, cls.history, theta)

    def copy(self) -> "PCStrategy":
        out = PCStrategy(self.bidder, self.tiling, self.env, self._key)
        out._table = dict(self._table)
        out._coarse = dict(self._coarse)
        return out


class PCStrategyProfile:
    """One :class:`PCStrategy` per bidder over a common environment."""

    def __init__(self, strategies: list[PCStrategy]):
        self.strategies = strategies

    def __getitem__(self, i: int) -> PCStrategy:
        return self.strategies[i]

    def __iter__(self):
        return iter(self.strategies)

    @property
    def tilings(self) -> list[Tiling]:
        return [s.tiling for s in self.strategies]

    def copy(self) -> "PCStrategyProfile":
        return PCStrategyProfile([s.copy() for s in self.strategies])


def init_truthful(env: AuctionEnvironment, tilings: list[Tiling], key=None) -> PCStrategyProfile:
    """Truthful piecewise-constant profile: every tile bids the valuation
    (cost, in reverse auctions) of its lower vertex, identically across
    history classes."""
    return PCStrategyProfile([PCStrategy(i, tilings[i], env, key) for i in range(env.n_bidders)])


def update_rate(loss, c: float, gamma_min: float, gamma_max: float) -> np.ndarray:
    """Damping factor: gamma = (2/pi) arctan(c * loss) (g_max - g_min) + g_min."""
    loss = np.maximum(np.asarray(loss, dtype=float), 0.0)
    return (2.0 / np.pi) * np.arctan(c * loss) * (gamma_max - gamma_min) + gamma_min


def update_strategy(old_bids: np.ndarray, br_bids: np.ndarray, losses: np.ndarray,
                    c: float, gamma_min: float, gamma_max: float,
                    per_tile: bool = True) -> np.ndarray:
    """Damped move from ``old_bids`` toward ``br_bids`` (both (n_tiles, q)).

    With ``per_tile`` the rate uses each tile's own immediate loss, otherwise
    a single rate from the maximum loss is applied to the whole table.
    """
    old_bids = np.asarray(old_bids, dtype=float)
    br_bids = np.asarray(br_bids, dtype=float)
    if old_bids.shape != br_bids.shape:
        raise ContractViolation("old and best-response bid tables must have equal shape")
    losses = np.asarray(losses, dtype=float)
    if per_tile:
        gamma = update_rate(losses, c, gamma_min, gamma_max)[:, None]
    else:
        gamma = update_rate(np.max(losses), c, gamma_min, gamma_max)
    return (1.0 - gamma) * old_bids + gamma * br_bids


def isotonic_projection(values: np.ndarray, increasing: bool = True) -> np.ndarray:
    """Equal-weight pool-adjacent-violators projection of a 1-d sequence."""
    v = np.asarray(values, dtype=float)
    if not increasing:
        return -isotonic_projection(-v, True)
    # (mean, count) blocks; merge while the tail violates monotonicity
    means: list[float] = []
    counts: list[int] = []
    for x in v:
        means.append(float(x))
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, c2 = means.pop(), counts.pop()
            m1, c1 = means.pop(), counts.pop()
            means.append((m1 * c1 + m2 * c2) / (c1 + c2))
            counts.append(c1 + c2)
    out = np.empty_like(v)
    pos = 0
    for m, c in zip(means, counts):
        out[pos:pos + c] = m
        pos += c
    return out


def enforce_monotone(bids: np.ndarray, direction: str = "nondecreasing") -> np.ndarray:
    """Project a (n_tiles, q) bid table onto the monotone cone in tile order.

    Only meaningful for 1-d type spaces, where tile order follows the type.
    The projection is applied per bundle coordinate and is idempotent.
    """
    if direction not in ("nondecreasing", "nonincreasing"):
        raise ContractViolation(f"unknown direction {direction!r}")
    bids = np.asarray(bids, dtype=float)
    out = np.empty_like(bids)
    for j in range(bids.shape[1]):
        out[:, j] = isotonic_projection(bids[:, j], direction == "nondecreasing")
    return out
