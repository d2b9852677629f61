# %% [markdown]
# # Soft and hard channel matching
#
# Two solvers turn a similarity matrix into a transport plan: Sinkhorn gives a
# doubly stochastic plan whose sharpness is set by `tau`, Hungarian gives the
# best permutation. `adaptive_match` picks between them.

# %%
import numpy as np

from lwi.matching import MatchConfig, adaptive_match, assignment_score, hungarian, round_to_permutation, sinkhorn

rng = np.random.default_rng(0)
sim = rng.normal(size=(5, 5))
np.set_printoptions(precision=3, suppress=True)

# %% Lower temperature sharpens the plan towards the optimal permutation.
best = hungarian(sim)
print("optimal permutation", best.perm, "score", round(assignment_score(sim, best), 4))
for tau in (1.0, 0.1, 0.01):
    plan = sinkhorn(sim, MatchConfig(tau=tau))
    print(f"tau={tau:<5} score={assignment_score(sim, plan):7.4f} converged={plan.converged} "
          f"rounded={round_to_permutation(plan).perm}")

# %% A deep layer negates the similarity, pairing each channel with its least similar partner.
cfg = MatchConfig(tau=1e-4)  # below tau_min, so the exact solver runs
print("shallow", adaptive_match(sim, cfg).perm)
print("deep   ", adaptive_match(sim, cfg, deep_layer=True).perm)

# %% Adding a constant to the similarity does not move the plan.
gap = np.abs(sinkhorn(sim + 42.0).matrix - sinkhorn(sim).matrix).max()
print("shift gap", gap)
