"""Layer-wise channel alignment and fusion of two task models.

Channels of each feature layer are matched between the old (fused) model and
the newly trained one, using the rows of the weight matrices as channel
signatures. Shallow layers pair the most similar channels; the last
``n_deep`` layers pair the most dissimilar ones, so the fused network keeps
separate pathways for separate tasks. The aligned old weights are then
combined with the new ones as ``k * old + (1 - k) * new``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidInputError
from .matching import (
    HARD,
    SOFT,
    MatchConfig,
    TransportPlan,
    adaptive_match,
    assignment_score,
    round_to_permutation,
)
from .netcore import LayerWeights, Model

EUCLIDEAN = "euclidean"
COSINE = "cosine"
EQUAL_WEIGHT = "equal_weight"


@dataclass(frozen=True)
class LayerPolicy:
    n_deep: int = 1
    metric: str = EUCLIDEAN
    mode: str = SOFT

    def __post_init__(self):
        if self.n_deep < 0:
            raise InvalidInputError(f"n_deep must be >= 0, got {self.n_deep}")
        if self.metric not in (EUCLIDEAN, COSINE):
            raise InvalidInputError(f"unknown metric {self.metric!r}")
        if self.mode not in (SOFT, HARD):
            raise InvalidInputError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class FusionConfig:
    # A fixed coefficient in [0, 1], or "equal_weight": k = t / (t + 1) when
    # the old model already covers t tasks.
    k: float | str = EQUAL_WEIGHT
    policy: LayerPolicy = field(default_factory=LayerPolicy)
    match: MatchConfig = field(default_factory=MatchConfig)
    # "fuse" blends old-task heads with the new model's copies; "carry" keeps
    # the (re-indexed) old heads as they are.
    old_heads: str = "fuse"

    def __post_init__(self):
        if isinstance(self.k, str):
            if self.k != EQUAL_WEIGHT:
                raise InvalidInputError(f"k must be a number in [0, 1] or {EQUAL_WEIGHT!r}, got {self.k!r}")
        elif not 0.0 <= self.k <= 1.0:
            raise InvalidInputError(f"k must lie in [0, 1], got {self.k}")
        if self.old_heads not in ("fuse", "carry"):
            raise InvalidInputError(f"old_heads must be 'fuse' or 'carry', got {self.old_heads!r}")

    def coefficient(self, n_old_tasks: int) -> float:
        if self.k == EQUAL_WEIGHT:
            return n_old_tasks / (n_old_tasks + 1.0)
        return float(self.k)


@dataclass
class LayerReport:
    layer: int
    deep: bool
    mode: str
    score: float
    converged: bool
    plan: TransportPlan


def _weight(w):
    return w.weight if isinstance(w, LayerWeights) else np.asarray(w, dtype=np.float64)


def layer_similarity(old_aligned, new, metric: str = EUCLIDEAN) -> np.ndarray:
    """Channel-pair similarity between two layers (rows are channels).

    Euclidean: ``-||row_a(old) - row_b(new)||``. Cosine: the cosine of the
    two rows, with 0 for any pair involving a zero row. Biases are ignored.
    """
    a = _weight(old_aligned)
    b = _weight(new)
    if a.shape != b.shape:
        raise InvalidInputError(f"layer shapes differ: {a.shape} vs {b.shape}")
    if metric == EUCLIDEAN:
        return -cdist(a, b, metric="euclidean")
    if metric == COSINE:
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        denom = np.outer(na, nb)
        dots = a @ b.T
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    raise InvalidInputError(f"unknown metric {metric!r}")


def apply_layer_policy(sim, layer_index: int, policy: LayerPolicy, n_feature_layers: int):
    """Return ``(sim, deep)`` for 1-based ``layer_index``.

    The last ``policy.n_deep`` feature layers are deep. ``sim`` is passed
    through unchanged; the negation happens inside ``adaptive_match``.
    """
    if not 1 <= layer_index <= n_feature_layers:
        raise InvalidInputError(f"layer index {layer_index} outside 1..{n_feature_layers}")
    return sim, layer_index > n_feature_layers - policy.n_deep


def _plan_matrix(plan):
    return plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)


def permute_incoming(w: LayerWeights, p_prev) -> LayerWeights:
    """Re-index input columns: ``W @ P``."""
    p = _plan_matrix(p_prev)
    if w.weight.shape[1] != p.shape[0]:
        raise InvalidInputError(f"plan of size {p.shape} cannot act on {w.weight.shape[1]} input columns")
    return LayerWeights(w.weight @ p, w.bias.copy())


def permute_outgoing(w: LayerWeights, p) -> LayerWeights:
    """Re-index output channels: ``P.T @ W`` and ``P.T @ b``."""
    p = _plan_matrix(p)
    if w.weight.shape[0] != p.shape[0]:
        raise InvalidInputError(f"plan of size {p.shape} cannot act on {w.weight.shape[0]} output channels")
    return LayerWeights(p.T @ w.weight, p.T @ w.bias)


def _blend(old: LayerWeights, new: LayerWeights, k: float) -> LayerWeights:
    return LayerWeights(k * old.weight + (1.0 - k) * new.weight, k * old.bias + (1.0 - k) * new.bias)


def _check_compatible(model_old: Model, model_new: Model):
    old_shapes = [l.shape for l in model_old.feature_layers]
    new_shapes = [l.shape for l in model_new.feature_layers]
    if old_shapes != new_shapes:
        raise InvalidInputError(f"feature layers differ: {old_shapes} vs {new_shapes}")
    if len(model_new.heads) < len(model_old.heads):
        raise InvalidInputError(
            f"new model has {len(model_new.heads)} heads, old model has {len(model_old.heads)}"
        )
    if model_new.head_sizes[:len(model_old.heads)] != model_old.head_sizes:
        raise InvalidInputError(
            f"head sizes differ: old {model_old.head_sizes}, new {model_new.head_sizes}"
        )


def align(model_old: Model, model_new: Model, cfg: FusionConfig):
    """Align ``model_old`` onto ``model_new`` channel by channel.

    Returns ``(aligned_old, reports)``: the old model with every feature
    layer re-indexed by its plan (and head inputs re-indexed by the hard
    rounding of the last plan), and one ``LayerReport`` per feature layer.
    """
    _check_compatible(model_old, model_new)
    n_layers = len(model_old.feature_layers)
    if cfg.policy.n_deep > n_layers:
        raise InvalidInputError(f"n_deep={cfg.policy.n_deep} exceeds {n_layers} feature layers")
    aligned_layers = []
    reports = []
    prev = None
    for l, (w_old, w_new) in enumerate(zip(model_old.feature_layers, model_new.feature_layers), start=1):
        w_tilde = w_old if prev is None else permute_incoming(w_old, prev)
        sim = layer_similarity(w_tilde, w_new, cfg.policy.metric)
        sim, deep = apply_layer_policy(sim, l, cfg.policy, n_layers)
        plan = adaptive_match(sim, cfg.match, deep_layer=deep)
        if cfg.policy.mode == HARD and plan.mode != HARD:
            plan = round_to_permutation(plan)
        aligned_layers.append(permute_outgoing(w_tilde, plan))
        reports.append(LayerReport(l, deep, plan.mode, assignment_score(sim, plan), plan.converged, plan))
        prev = plan
    heads = [h.copy() for h in model_old.heads]
    if prev is not None:
        head_plan = prev if prev.mode == HARD else round_to_permutation(prev)
        heads = [permute_incoming(h, head_plan) for h in heads]
    return Model(aligned_layers, heads), reports


def align_and_fuse(model_old: Model, model_new: Model, cfg: FusionConfig | None = None,
                   return_report: bool = False):
    """Align the old model to the new one and blend them layer by layer.

    Feature layers and old-task heads become ``k * aligned_old + (1 - k) *
    new``; heads that only exist in ``model_new`` are copied unchanged.
    """
    cfg = cfg or FusionConfig()
    k = cfg.coefficient(len(model_old.heads))
    aligned, reports = align(model_old, model_new, cfg)
    layers = [_blend(a, b, k) for a, b in zip(aligned.feature_layers, model_new.feature_layers)]
    heads = []
    for j, new_head in enumerate(model_new.heads):
        if j >= len(aligned.heads):
            heads.append(new_head.copy())
        elif cfg.old_heads == "carry":
            heads.append(aligned.heads[j])
        else:
            heads.append(_blend(aligned.heads[j], new_head, k))
    fused = Model(layers, heads)
    if return_report:
        return fused, reports
    return fused
