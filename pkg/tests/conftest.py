import numpy as np
import pytest

from lwi.netcore import LayerWeights, Model


def random_model(rng, widths, head_sizes=(3,), scale=1.0):
    layers = [
        LayerWeights(scale * rng.normal(size=(b, a)), scale * rng.normal(size=b))
        for a, b in zip(widths, widths[1:])
    ]
    heads = [LayerWeights(rng.normal(size=(c, widths[-1])), rng.normal(size=c)) for c in head_sizes]
    return Model(layers, heads)


def permute_hidden(model, layer, perm):
    """Consistently re-order the output channels of feature layer ``layer`` (0-based)."""
    out = model.copy()
    w = out.feature_layers[layer]
    out.feature_layers[layer] = LayerWeights(w.weight[perm], w.bias[perm])
    if layer + 1 < len(out.feature_layers):
        nxt = out.feature_layers[layer + 1]
        out.feature_layers[layer + 1] = LayerWeights(nxt.weight[:, perm], nxt.bias)
    else:
        out.heads = [LayerWeights(h.weight[:, perm], h.bias) for h in out.heads]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Published five-task accuracy table (row = after step s, column = task j).
ACC_TABLE = np.array([
    [78.2, np.nan, np.nan, np.nan, np.nan],
    [75.3, 74.2, np.nan, np.nan, np.nan],
    [74.8, 76.6, 75.2, np.nan, np.nan],
    [75.3, 76.3, 75.7, 76.0, np.nan],
    [74.2, 75.3, 75.5, 77.2, 76.1],
])


# Filled by test_acceptance.py; printed at the end of the session.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
