"""Core model of a sequential auction: types, priors, bids, round outcomes,
histories and quasi-linear round utilities.

Environments subclass :class:`AuctionEnvironment` and provide the allocation
and payment rules for each round plus valuations.  All values here are
immutable after construction and all operations are pure functions, so they
can be evaluated from any number of workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "TypeSpace",
    "UniformPrior",
    "make_prior",
    "RoundOutcome",
    "AllocationHistory",
    "AuctionEnvironment",
    "GameOverError",
    "ContractViolation",
    "apply_round",
    "round_utility",
]


class ContractViolation(ValueError):
    """An operation was called with arguments violating its contract."""


class GameOverError(ContractViolation):
    """A round was requested past the end of the auction."""


@dataclass(frozen=True)
class TypeSpace:
    """Axis-aligned box of admissible types, dimension ``d >= 1``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size < 1:
            raise ContractViolation("type space bounds must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise ContractViolation("type space requires lower < upper componentwise")

    @property
    def dimension(self) -> int:
        return self.lower.size

    def contains(self, theta) -> bool:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))


class UniformPrior:
    """Uniform distribution over a :class:`TypeSpace`."""

    family = "uniform"

    def __init__(self, space: TypeSpace):
        self.space = space

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """I.i.d. draws, shape ``(count, d)``."""
        return rng.uniform(self.space.lower, self.space.upper, size=(count, self.space.dimension))

    def box_mass(self, lower, upper) -> float:
        """Probability mass of the box ``[lower, upper)`` clipped to the space."""
        lo = np.maximum(np.atleast_1d(lower), self.space.lower)
        hi = np.minimum(np.atleast_1d(upper), self.space.upper)
        width = np.clip(hi - lo, 0.0, None)
        total = self.space.upper - self.space.lower
        return float(np.prod(width / total))

    def cdf1d(self, x: float) -> float:
        lo, hi = float(self.space.lower[0]), float(self.space.upper[0])
        return min(max((x - lo) / (hi - lo), 0.0), 1.0)


_PRIOR_FAMILIES = {"uniform": UniformPrior}


def make_prior(family: str, space: TypeSpace):
    """Registry entry point so other families can be plugged in."""
    try:
        return _PRIOR_FAMILIES[family](space)
    except KeyError:
        raise ContractViolation(f"unknown prior family {family!r}") from None


@dataclass(frozen=True)
class RoundOutcome:
    """Public result of one round: an allocation code plus a payment vector.

    ``alloc_code`` is an environment-specific integer identifying who got
    what this round; ``payments`` holds money paid per bidder (negative for
    money received in reverse auctions).
    """

    alloc_code: int
    payments: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "payments", np.asarray(self.payments, dtype=float))


@dataclass(frozen=True)
class AllocationHistory:
    """Sequence of allocation codes x_{1:t}.  Payments are intentionally not
    part of the history key; they only matter through the beliefs they induce.
    """

    codes: tuple = ()

    @property
    def round(self) -> int:
        return len(self.codes)

    def child(self, alloc_code: int) -> "AllocationHistory":
        return AllocationHistory(self.codes + (int(alloc_code),))


class AuctionEnvironment:
    """Base class for sequential auction environments.

    Subclasses define ``n_bidders``, ``n_rounds``, per-bidder type spaces and
    priors, and implement the vectorised outcome / utility hooks below.
    Valuations must be convex in the own type for every fixed allocation and
    history; the built-in environments satisfy this by construction.
    """

    n_bidders: int
    n_rounds: int
    type_spaces: Sequence[TypeSpace]
    priors: Sequence
    #: Assumption flag required by the verifier: posterior beliefs stay
    #: independent across bidders for every history.
    independent_beliefs: bool = True
    #: True if winning a round removes the bidder from all later rounds
    #: (its continuation utility is then zero).
    exits_on_win: bool = False
    #: Reverse (procurement) environments award to the lowest bid.
    reverse: bool = False
    #: When set, round outcomes of one allocation code are coarsened into at
    #: most this many contiguous price bins (caps the class-graph size).
    event_bins = None

    # ---- shape ----------------------------------------------------------
    def bid_dim(self, history: AllocationHistory) -> int:
        """Number of bundle entries in a bid for the round after ``history``."""
        raise NotImplementedError

    def bid_range(self, history: AllocationHistory) -> tuple[float, float]:
        """Closed interval containing all sensible bid entries."""
        raise NotImplementedError

    def level_coord(self, history: AllocationHistory) -> int:
        """Bid coordinate that determines the allocation ordering (used to
        sort piecewise-constant bid levels)."""
        return 0

    def active_mask(self, history: AllocationHistory) -> np.ndarray:
        """Boolean mask of bidders still bidding after ``history``."""
        return np.ones(self.n_bidders, dtype=bool)

    def is_terminal(self, history: AllocationHistory) -> bool:
        return history.round >= self.n_rounds

    # ---- rules ----------------------------------------------------------
    def outcome(self, history: AllocationHistory, bids: np.ndarray) -> RoundOutcome:
        """Allocation and payments for one round; ``bids`` has shape (n, q)."""
        codes, payments = self.outcome_batch(history, bids[None, :, :])
        return RoundOutcome(int(codes[0]), payments[0])

    def outcome_batch(self, history: AllocationHistory, bids: np.ndarray,
                      tie_favor=None):
        """Vectorised rules: ``bids`` (m, n, q) -> (codes (m,), payments (m, n)).

        Ties break toward the lowest bidder index so runs are reproducible.
        ``tie_favor=(i, sign)`` nudges bidder ``i``'s rank (never their price)
        by an infinitesimal so that exact ties resolve for (+1) or against
        (-1) that bidder; averaging the two gives a fair tie split.
        """
        raise NotImplementedError

    def utility_batch(self, i: int, theta, history: AllocationHistory,
                      codes: np.ndarray, payments: np.ndarray) -> np.ndarray:
        """Quasi-linear round utility v_i - p_i, vectorised over outcomes.

        ``theta`` broadcasts against ``codes``.
        """
        raise NotImplementedError

    def truthful_bid(self, i: int, history: AllocationHistory, theta: np.ndarray) -> np.ndarray:
        """Marginal-value (marginal-cost) bid used to initialise the search;
        ``theta`` (m,) -> (m, q)."""
        raise NotImplementedError

    # ---- structure hooks used by the belief engine ----------------------
    def role_key(self, i: int, history: AllocationHistory):
        """Hashable label of bidder ``i``'s strategic role after ``history``
        (e.g. still active, current split winner).  Two bidders with equal
        role keys, beliefs and opponent multisets face identical decision
        problems up to index tie-breaks."""
        return bool(self.active_mask(history)[i])

    def event_price(self, alloc_code: int, payments: np.ndarray) -> float:
        """Scalar that, together with ``alloc_code``, identifies a public
        outcome of a round.  Default: signed sum of payments."""
        return float(np.sum(payments))

    def event_price_batch(self, codes: np.ndarray, payments: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`event_price`; subclasses should override."""
        return np.array([self.event_price(int(c), p) for c, p in zip(codes, payments)])

    def win_alloc_code(self, history: AllocationHistory, i: int) -> Optional[int]:
        """Allocation code of the event 'bidder i wins this round', when that
        is a single well-defined event; None otherwise."""
        return None


def apply_round(env: AuctionEnvironment, history: AllocationHistory, bids: np.ndarray) -> RoundOutcome:
    """Run one round of ``env`` after ``history`` with one bid row per bidder."""
    if env.is_terminal(history):
        raise GameOverError(f"auction is over after round {history.round}")
    bids = np.asarray(bids, dtype=float)
    q = env.bid_dim(history)
    if bids.shape != (env.n_bidders, q):
        raise ContractViolation(f"expected bids of shape ({env.n_bidders}, {q}), got {bids.shape}")
    if np.any(bids < 0) or not np.all(np.isfinite(bids)):
        raise ContractViolation("bids must be finite and nonnegative")
    return env.outcome(history, bids)


def round_utility(env: AuctionEnvironment, i: int, theta, outcome: RoundOutcome,
                  history: AllocationHistory) -> float:
    """u_i = v_i(theta_i, x_t | h_{t-1}) - p_{i,t} for a single outcome."""
    if not env.type_spaces[i].contains(theta):
        raise ContractViolation(f"theta {theta!r} outside type space of bidder {i}")
    u = env.utility_batch(i, theta, history, np.array([outcome.alloc_code]),
                          outcome.payments[None, :])
    return float(u[0])
