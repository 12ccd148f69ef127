"""Admission control and routing of deadline-sensitive jobs to parallel multi-server clusters.

Modules:

* ``model``: deadlines, clusters, and conditional miss probabilities
* ``bernoulli``: stationary miss rates and the optimal Bernoulli split
* ``indices``: IO, PI and RB index tables and index policies
* ``mdp``: exact optimum and policy evaluation on a truncated lattice
* ``simulate``: discrete-event simulation
* ``experiments``: parameter sweeps; ``cli`` exposes everything on the command line
"""

from .bernoulli import (BernoulliSplit, KktCertificate, LoadCase, QueueStatus, alpha_beta,
                        bs_objective, erlang_c, evaluate_split, inverse_marginal, kkt_certificate,
                        miss_rate, miss_rate_derivative, solve_optimal_bs, stationary_miss_prob)
from .indices import (REJECT, IndexKind, IndexPolicy, IndexTable, build_index_table, decide,
                      io_index, pi_index, rb_index, rb_index_closed_form_m1, rb_limit_m1)
from .mdp import (CostFormulation, LatticePolicy, PolicyEvaluation, TruncatedMdp,
                  achievable_region_sample, evaluate_policy, holding_cost, solve_optimal,
                  verify_equivalence)
from .model import (ClusterConfig, Constant, Exponential, MissProbTable, SystemConfig, Uniform,
                    erlang_survival, laplace_transform, miss_prob_constant, miss_prob_exponential,
                    miss_prob_uniform, miss_table, parse_deadline)
from .simulate import SimConfig, SimResult, estimate_pq_tradeoff

__version__ = "0.1.0"
__all__ = [n for n in dir() if not n.startswith('_')]
