# %% [markdown]
# # A desk-scale continual run
#
# Four two-class tasks, one MLP with a head per task. `lwi` fuses each newly
# trained model into the running one with shallow-max / deep-min matching,
# `all_max` uses max matching everywhere, `finetune` keeps training one model.

# %%
import numpy as np

from lwi.config import resolve, run_config
from lwi.continual import run_lwi
from lwi.data import SyntheticSpec, gen_synthetic

np.set_printoptions(precision=1, suppress=True)
stream = gen_synthetic(SyntheticSpec(seed=0))

# %%
for strategy in ("lwi", "all_max", "finetune"):
    _, log = run_lwi(stream, run_config(resolve({"seed": 0, "strategy": strategy})))
    print(f"== {strategy}")
    print(log.acc_matrix)
    print(f"final aware mean {log.final_aware_mean():.2f}  agnostic {log.agnostic_acc[-1]:.2f}  "
          f"forgetting {log.mean_forgetting():.2f}")
