# %% [markdown]
# # Activation pathways per task
#
# The probe averages |activation| of every last-layer channel over a task's
# test data. Tasks that use separate pathways share few of their top channels,
# which shows up as a low Jaccard overlap of the top-k sets. Single seeds go
# either way (this one has lwi above all_max); the acceptance suite compares
# medians pooled over five seeds.

# %%
import numpy as np

from lwi.config import resolve, run_config
from lwi.continual import pairwise_overlaps, run_lwi, top_k_channels
from lwi.data import SyntheticSpec, gen_synthetic

stream = gen_synthetic(SyntheticSpec(seed=2))

# %%
for strategy in ("lwi", "all_max"):
    _, log = run_lwi(stream, run_config(resolve({"seed": 2, "strategy": strategy})))
    print(f"== {strategy}")
    for t, levels in enumerate(log.activation_levels, start=1):
        print(f"task {t} top-10 channels", sorted(top_k_channels(levels, 10)))
    overlaps = [v for *_, v in pairwise_overlaps(log.activation_levels, 10)]
    print("pairwise overlaps", np.round(overlaps, 3), "median", round(float(np.median(overlaps)), 3))
