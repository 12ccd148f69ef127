# %% [markdown]
# # Miss probabilities and routing indices
#
# A job that joins an M/M/m cluster behind `x` others misses its deadline
# with probability `P_miss(x)`.  Everything else is built on these tables.

# %%
import numpy as np

from deadline_dispatch import ClusterConfig, Constant, Exponential, Uniform, miss_table

fast, slow = ClusterConfig(4, 5.0), ClusterConfig(8, 3.0)
for d in (Constant(1.0), Uniform(0.3, 1.7), Exponential(1.0)):
    print(d, np.round(miss_table(fast, d, 12), 4))

# %% [markdown]
# The tables are flat while a server is free, then climb to one.  With a
# mean-one deadline, more variable deadlines hurt an idle cluster more.

# %%
from deadline_dispatch.bernoulli import stationary_miss_prob

lam = np.linspace(0.5, 19.5, 8)
print(np.round(stationary_miss_prob(fast, lam, Constant(1.0)), 5))

# %% [markdown]
# ## Three indices
#
# IO is the miss probability itself.  PI is one policy-improvement step from
# the optimal Bernoulli split.  RB is the admission-control index of a single
# queue fed by the whole stream.

# %%
from deadline_dispatch import build_index_table, SystemConfig

cfg = SystemConfig.from_load(0.9, 4.0, (4, 8), (5.0, 3.0), Constant(1.0))
tabs = {k: build_index_table(cfg, k, X_max=60) for k in ("IO", "PI", "RB")}
for k, t in tabs.items():
    print(k, "limits", np.round(t.limits, 3), "fast pool x=0,4,8,16:", np.round(t.values[0][[0, 4, 8, 16]], 4))

# %% [markdown]
# The RB index of a heavily loaded single server explodes: with `mu=1`,
# `t=2`, `lam=5` its limit is `(5 e^8 - 1)/4`.

# %%
from deadline_dispatch.indices import rb_index

nu, lim = rb_index(ClusterConfig(1, 1.0), 5.0, Constant(2.0), 200)
print(nu[[0, 5, 20, 50, 200]], lim, (5 * np.exp(8) - 1) / 4)
