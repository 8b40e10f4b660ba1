"""Piecewise-constant equilibrium search for sequential combinatorial
auctions with incomplete information, plus a certified exploitability bound.
"""

from .game import (AllocationHistory, AuctionEnvironment, ContractViolation,
                   GameOverError, RoundOutcome, TypeSpace, UniformPrior,
                   apply_round, make_prior, round_utility)
from .tiling import (Hyperrectangle, PCStrategy, PCStrategyProfile, Tiling,
                     enforce_monotone, init_truthful, isotonic_projection,
                     locate_tile, update_rate, update_strategy, vertices)
from .beliefs import (Belief, BeliefProfile, ClassBudgetExceeded, ClassIndex,
                      Event, HistoryClass, LevelTable, OffPathOutcome,
                      bayes_update, build_level_table, class_signature,
                      enumerate_history_classes, finite_belief_choice,
                      sample_types)
from .environments import (OracleUnavailable, SequentialSales, SplitAward,
                           analytical_sequential_sales, analytical_split_award,
                           l2_distance, l2_distance_values, make_environment)
from .solver import (Engine, EvalContext, SolveResult, SolverConfig,
                     build_tilings, run_search)
from .verifier import (BruteForceOracle, EpsilonReport, VerifierConfig,
                       VertexEngine, brute_force_exploitability,
                       convexity_check, convexity_rate,
                       decomposition_violation, epsilon_bound)
from .analysis import class_reach_counts, round_distances
from .config import RunConfig, load_config
from .serialize import (config_hash, load_checkpoint, save_checkpoint,
                        save_report, save_trace)

__version__ = "0.1.0"
