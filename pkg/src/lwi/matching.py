"""Assignment solvers for channel matching.

Two solvers work on a square similarity matrix (higher = more similar):

* ``sinkhorn`` produces a soft, doubly stochastic plan through
  entropy-regularised alternating row/column normalisation.
* ``hungarian`` produces the exact maximum-similarity permutation.

``adaptive_match`` picks between them from the temperature and negates the
similarity for deep layers, so that the most *dissimilar* channels are paired.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

SOFT = "soft"
HARD = "hard"

# Relative tolerance under which two assignment costs count as tied.
_TIE_RTOL = 1e-9
# Scaling magnitude at which Sinkhorn folds u, v into the log potentials.
_ABSORB = 1e30


@dataclass(frozen=True)
class MatchConfig:
    tau: float = 0.05
    tau_min: float = 1e-3
    max_iters: int = 300
    marginal_tol: float = 1e-6
    # Affinely map the similarity onto [0, 1] before exponentiation so that
    # ``tau`` has the same meaning whatever the scale of the weights.
    rescale: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidInputError(f"tau must be positive, got {self.tau}")
        if not self.tau_min > 0:
            raise InvalidInputError(f"tau_min must be positive, got {self.tau_min}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise InvalidInputError(f"max_iters must be an integer >= 1, got {self.max_iters}")
        if not self.marginal_tol > 0:
            raise InvalidInputError(f"marginal_tol must be positive, got {self.marginal_tol}")


@dataclass(frozen=True)
class TransportPlan:
    """A soft (doubly stochastic) or hard (permutation) matching matrix.

    ``matrix[a, b]`` is the mass sent from old channel ``a`` to new channel
    ``b``. ``converged`` and ``n_iter`` are only meaningful for soft plans.
    """

    matrix: np.ndarray
    mode: str
    converged: bool = True
    n_iter: int = 0

    @property
    def perm(self) -> np.ndarray:
        """Row -> column map of a hard plan."""
        if self.mode != HARD:
            raise InvalidInputError("perm is only defined for hard plans")
        return np.argmax(self.matrix, axis=1)

    @property
    def shape(self):
        return self.matrix.shape


def _as_square(sim, name="similarity matrix") -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] == 0:
        raise InvalidInputError(f"{name} must be a non-empty square matrix, got shape {sim.shape}")
    if not np.all(np.isfinite(sim)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return sim


def permutation_matrix(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.intp)
    n = perm.shape[0]
    mat = np.zeros((n, n))
    mat[np.arange(n), perm] = 1.0
    return mat


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def sinkhorn(sim, cfg: MatchConfig | None = None) -> TransportPlan:
    """Entropy-regularised soft matching of a square similarity matrix.

    The kernel is ``exp(sim / tau)``; rows and then columns are normalised to
    sum to one until every row sum is within ``cfg.marginal_tol`` of one
    (columns are exact after each sweep). The iteration runs on log
    potentials, so small ``tau`` cannot overflow. Hitting ``cfg.max_iters``
    is not an error: the plan comes back with ``converged=False``.
    """
    cfg = cfg or MatchConfig()
    sim = _as_square(sim)
    n = sim.shape[0]
    if cfg.rescale:
        lo, hi = sim.min(), sim.max()
        scaled = (sim - lo) / (hi - lo) if hi > lo else np.zeros_like(sim)
    else:
        scaled = sim - sim.max()
    log_k = scaled / cfg.tau

    # Log potentials f, g hold the bulk of the scaling; u, v are plain-domain
    # corrections folded back into f, g before they can overflow. If the
    # kernel underflows (very small tau) the loop continues purely in log space.
    f = -_logsumexp(log_k, axis=1)
    g = np.zeros(n)
    kernel = np.exp(log_k + f[:, None])
    u = np.ones(n)
    v = np.ones(n)
    log_only = False
    converged = False
    it = 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for it in range(1, int(cfg.max_iters) + 1):
            if log_only:
                g = -_logsumexp(log_k + f[:, None], axis=0)
                row_lse = _logsumexp(log_k + g[None, :], axis=1)
                if np.abs(np.expm1(f + row_lse)).max() <= cfg.marginal_tol:
                    converged = True
                    break
                f = -row_lse
                continue
            v_next = 1.0 / (kernel.T @ u)
            kv = kernel @ v_next
            # Columns now sum to one; the row sums are u * (K v).
            err = np.abs(u * kv - 1.0).max()
            if not math.isfinite(err):
                log_only = True
                f = f + np.log(u)
                g = g + np.log(v)
                continue
            v = v_next
            if err <= cfg.marginal_tol:
                converged = True
                break
            u = 1.0 / kv
            if u.max() > _ABSORB or v.max() > _ABSORB:
                f = f + np.log(u)
                g = g + np.log(v)
                kernel = np.exp(log_k + f[:, None] + g[None, :])
                u = np.ones(n)
                v = np.ones(n)
        if not log_only:
            f = f + np.log(u)
            g = g + np.log(v)
    plan = np.exp(log_k + f[:, None] + g[None, :])
    if converged:
        # Re-check on the materialised plan so the flag is a guarantee.
        converged = bool(
            np.abs(plan.sum(axis=1) - 1.0).max() <= cfg.marginal_tol
            and np.abs(plan.sum(axis=0) - 1.0).max() <= cfg.marginal_tol
        )
    return TransportPlan(plan, SOFT, converged=converged, n_iter=it)


def _min_cost_assignment(cost):
    """Shortest-augmenting-path Hungarian method on a square cost matrix.

    Returns ``(col_of_row, u, v)`` where ``u``/``v`` are optimal row/column
    potentials: ``cost - u[:, None] - v[None, :] >= 0`` everywhere and is
    zero on every optimal pair.
    """
    n = cost.shape[0]
    # Index 0 of the column arrays is a virtual column, as in the textbook
    # 1-based formulation.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.intp)  # 1-based row owning column j, 0 = free
    way = np.zeros(n + 1, dtype=np.intp)
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.intp)
    col_of_row[row_of[1:] - 1] = np.arange(n)
    return col_of_row, u[1:], v[1:]


def _lexicographic_refine(tight, col_of_row):
    """Lexicographically smallest perfect matching inside ``tight``.

    ``col_of_row`` must be a perfect matching using only tight pairs. Rows
    are fixed in order, each to the lowest column that still admits a
    completion; feasibility is an alternating-path search over the unfixed
    rows.
    """
    n = tight.shape[0]
    col_of_row = col_of_row.copy()
    row_of_col = np.empty(n, dtype=np.intp)
    row_of_col[col_of_row] = np.arange(n)
    tight_cols = [np.flatnonzero(tight[r]) for r in range(n)]

    for i in range(n):
        current = col_of_row[i]
        for j in tight_cols[i]:
            if j >= current:
                break
            r = row_of_col[j]
            if r < i:
                continue
            # Give j to i; r must reach the column i releases.
            path = _alternating_path(r, current, j, i, tight_cols, row_of_col)
            if path is None:
                continue
            for row, col in path:
                col_of_row[row] = col
                row_of_col[col] = row
            col_of_row[i] = j
            row_of_col[j] = i
            break
    return col_of_row


def _alternating_path(start_row, target_col, banned_col, fixed_upto, tight_cols, row_of_col):
    """BFS for a chain of reassignments freeing ``start_row`` toward ``target_col``.

    Returns ``[(row, new_col), ...]`` or ``None``. Rows ``<= fixed_upto`` and
    ``banned_col`` are off limits.
    """
    parent = {}  # column -> row that claims it
    seen = {banned_col}
    queue = deque([start_row])
    while queue:
        row = queue.popleft()
        for c in tight_cols[row]:
            if c in seen:
                continue
            owner = row_of_col[c]
            if c != target_col and owner <= fixed_upto:
                continue
            seen.add(c)
            parent[c] = row
            if c != target_col:
                queue.append(owner)
                continue
            path = []
            while True:
                claimant = parent[c]
                path.append((claimant, c))
                if claimant == start_row:
                    return path
                # The claimant was reached through the column it owns.
                c = next(col for col, r in parent.items() if row_of_col[col] == claimant)
    return None


def linear_assignment(sim) -> np.ndarray:
    """Permutation ``perm`` maximising ``sum(sim[a, perm[a]])``.

    Among optimal permutations the lexicographically smallest is returned
    (lowest row first gets the lowest column). Costs within a relative
    ``1e-9`` of each other count as tied.
    """
    sim = _as_square(sim)
    cost = -sim
    col_of_row, u, v = _min_cost_assignment(cost)
    reduced = cost - u[:, None] - v[None, :]
    scale = max(1.0, float(np.max(np.abs(sim))))
    tight = reduced <= _TIE_RTOL * scale * sim.shape[0]
    tight[np.arange(sim.shape[0]), col_of_row] = True
    return _lexicographic_refine(tight, col_of_row)


def hungarian(sim) -> TransportPlan:
    """Exact maximum-similarity matching as a hard plan."""
    perm = linear_assignment(sim)
    return TransportPlan(permutation_matrix(perm), HARD)


def adaptive_match(sim, cfg: MatchConfig | None = None, deep_layer: bool = False) -> TransportPlan:
    """Choose the solver from the temperature, negating ``sim`` for deep layers.

    ``cfg.tau <= cfg.tau_min`` selects the exact Hungarian solver, otherwise
    Sinkhorn.
    """
    cfg = cfg or MatchConfig()
    sim = _as_square(sim)
    if deep_layer:
        sim = -sim
    if cfg.tau <= cfg.tau_min:
        return hungarian(sim)
    return sinkhorn(sim, cfg)


def round_to_permutation(plan) -> TransportPlan:
    """Nearest hard permutation to a soft plan (max-weight assignment on its entries)."""
    matrix = plan.matrix if isinstance(plan, TransportPlan) else plan
    return hungarian(_as_square(matrix, "plan"))


def assignment_score(sim, plan) -> float:
    """Frobenius inner product ``sum(plan * sim)``."""
    matrix = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    sim = np.asarray(sim, dtype=np.float64)
    if matrix.shape != sim.shape:
        raise InvalidInputError(f"plan shape {matrix.shape} does not match similarity shape {sim.shape}")
    return float(np.sum(matrix * sim))
