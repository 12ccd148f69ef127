# %% [markdown]
# # A load sweep and a simulation check
#
# A trimmed version of the load sweep in `configs/experiments.ini`.

# %%
from deadline_dispatch.experiments import load_specs, run_experiment

spec = load_specs("""
[load]
kind = LoadSweep
clusters = 4:5, 8:3
deadline = const:1
rho_grid = 0.5, 0.8, 0.95
R_grid = 5, inf
policies = BS, IO, PI, RB
""")[0]
res = run_experiment(spec)
for r in res.rows:
    print(f"rho={r['grid_value']:>5} R={r['R']:>4} {r['policy']:>3} cost/job={float(r['cost_per_job']):.5f}"
          f" gap={float(r['optimality_gap']):.5f}")

# %% [markdown]
# The simulator is an independent estimate of the same numbers.

# %%
from deadline_dispatch import Constant, SystemConfig
from deadline_dispatch.indices import IndexPolicy
from deadline_dispatch.mdp import TruncatedMdp, evaluate_policy
from deadline_dispatch.simulate import SimConfig, simulate

cfg = SystemConfig.from_load(0.9, 4.0, (4, 8), (5.0, 3.0), Constant(1.0))
pol = IndexPolicy.build(cfg, "PI")
exact = evaluate_policy(TruncatedMdp(cfg), pol).cost_per_job
est = simulate(SimConfig(cfg, pol, horizon=200_000, seed=1)).cost_per_job
print(f"exact {exact:.5f}  simulated {est.mean:.5f} +- {est.se:.5f}")
