# %% [markdown]
# # Optimal static split versus the exact optimum
#
# Base instance: pools of 4 and 8 servers at rates 5 and 3, deadline 1.

# %%
import math

import numpy as np

from deadline_dispatch import Constant, SystemConfig, solve_optimal_bs
from deadline_dispatch.bernoulli import evaluate_split
from deadline_dispatch.mdp import TruncatedMdp, evaluate_policy, solve_optimal
from deadline_dispatch.indices import IndexPolicy

cfg = SystemConfig.from_load(0.9, 4.0, (4, 8), (5.0, 3.0), Constant(1.0))
split, cert = solve_optimal_bs(cfg)
print("rates", np.round(split.rates, 4), "rejected", round(split.lam0, 4), cert.case.value)
print("KKT residual", cert.max_residual)
print(evaluate_split(cfg, split))

# %% [markdown]
# The truncated lattice (60 jobs per queue) gives the exact optimum and the
# exact cost of every heuristic.

# %%
mdp = TruncatedMdp(cfg)
sol = solve_optimal(mdp)
print("optimal cost per job", sol.cost_per_job, "sweeps", sol.iterations)
for name, pol in [("BS", split)] + [(k, IndexPolicy.build(cfg, k, split=split)) for k in ("IO", "PI", "RB")]:
    ev = evaluate_policy(mdp, pol)
    print(f"{name}: cost/job {ev.cost_per_job:.5f}  gap {ev.cost_per_job - sol.cost_per_job:.5f}  "
          f"p {ev.p:.4f}  q {ev.q:.4f}")

# %% [markdown]
# Where do the policies reject?  Count reject cells on the lattice.

# %%
from deadline_dispatch.experiments import emit_policy_structure, reject_cells

acts = emit_policy_structure(cfg, ("OPT", "PI", "RB"), B=60)
print({k: reject_cells(a) for k, a in acts.items()})
opt = acts["OPT"].reshape(61, 61)
print("first rejecting x2 for x1 = 0..10:",
      [int(np.argmax(opt[i] == -1)) if (opt[i] == -1).any() else None for i in range(11)])

# %% [markdown]
# Pure routing: no admission control, the optimum only routes.

# %%
cfg_inf = cfg.replace(R=math.inf)
sol_inf = solve_optimal(TruncatedMdp(cfg_inf))
print("pure routing optimum per job", sol_inf.cost_per_job)
