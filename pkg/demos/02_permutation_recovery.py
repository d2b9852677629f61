# %% [markdown]
# # Undoing a hidden-layer permutation
#
# Re-ordering the channels of a hidden layer (and the matching input columns of
# the next layer) leaves the network function unchanged. Hard-mode alignment
# should find that re-ordering, so fusing a model with its permuted copy gives
# back the original network.

# %%
import numpy as np

from lwi.align import FusionConfig, LayerPolicy, align_and_fuse
from lwi.netcore import LayerWeights, forward, init_model

rng = np.random.default_rng(1)
model = init_model(8, [32, 16], [4], rng)

perm = rng.permutation(32)
shuffled = model.copy()
first, second = shuffled.feature_layers
shuffled.feature_layers = [LayerWeights(first.weight[perm], first.bias[perm]),
                           LayerWeights(second.weight[:, perm], second.bias)]

x = rng.normal(size=(100, 8))
print("permuted copy, max output change:", np.abs(forward(shuffled, x) - forward(model, x)).max())

# %% Plain averaging without alignment destroys the function.
naive = [0.5 * (a.weight + b.weight) for a, b in zip(model.feature_layers, shuffled.feature_layers)]
print("first layer weight gap after naive averaging:", np.abs(naive[0] - model.feature_layers[0].weight).max())

# %% Aligned fusion recovers it (no deep layers, hard plans).
cfg = FusionConfig(k=0.5, policy=LayerPolicy(n_deep=0, mode="hard"))
fused, reports = align_and_fuse(model, shuffled, cfg, return_report=True)
print("recovered permutation:", np.array_equal(reports[0].plan.perm, np.argsort(perm)))
print("fused model, max output change:", np.abs(forward(fused, x) - forward(model, x)).max())
