"""Multi-head ReLU MLP with hand-written backprop and SGD training.

A model is a stack of dense feature layers (ReLU after each) followed by one
linear head per task, all reading the final feature vector. Weight matrices
are stored ``(out, in)`` so a layer computes ``h @ W.T + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass
class LayerWeights:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise InvalidInputError(f"weight must be a non-empty matrix, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise InvalidInputError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )

    @property
    def shape(self):
        return self.weight.shape

    def copy(self) -> "LayerWeights":
        return LayerWeights(self.weight.copy(), self.bias.copy())


@dataclass
class Model:
    feature_layers: list[LayerWeights]
    heads: list[LayerWeights] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.feature_layers, self.feature_layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise InvalidInputError(
                    f"layer shapes do not compose: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        for i, head in enumerate(self.heads):
            if head.weight.shape[1] != self.feature_width:
                raise InvalidInputError(
                    f"head {i} reads {head.weight.shape[1]} features, model has {self.feature_width}"
                )

    @property
    def input_width(self) -> int:
        if self.feature_layers:
            return self.feature_layers[0].weight.shape[1]
        return self.heads[0].weight.shape[1]

    @property
    def feature_width(self) -> int:
        if self.feature_layers:
            return self.feature_layers[-1].weight.shape[0]
        return self.heads[0].weight.shape[1]

    @property
    def head_sizes(self) -> list[int]:
        return [h.weight.shape[0] for h in self.heads]

    def architecture(self) -> dict:
        widths = [self.input_width] + [layer.weight.shape[0] for layer in self.feature_layers]
        return {"widths": widths, "head_sizes": self.head_sizes}

    def copy(self) -> "Model":
        return Model([l.copy() for l in self.feature_layers], [h.copy() for h in self.heads])

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.feature_layers + self.heads:
            out.extend([layer.weight, layer.bias])
        return out


def _uniform_layer(n_in, n_out, rng):
    bound = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-bound, bound, size=(n_out, n_in))
    b = rng.uniform(-bound, bound, size=n_out)
    return LayerWeights(w, b)


def init_model(input_dim: int, hidden: list[int], head_sizes: list[int], rng) -> Model:
    """Fan-in scaled uniform initialisation, drawn layer by layer from ``rng``."""
    widths = [input_dim] + list(hidden)
    layers = [_uniform_layer(a, b, rng) for a, b in zip(widths, widths[1:])]
    heads = [_uniform_layer(widths[-1], c, rng) for c in head_sizes]
    return Model(layers, heads)


def add_head(model: Model, n_classes: int, rng) -> Model:
    """Return a copy of ``model`` with a freshly initialised head appended."""
    out = model.copy()
    out.heads.append(_uniform_layer(model.feature_width, n_classes, rng))
    return out


def _select_heads(model, heads):
    if heads is None or heads == "all":
        return list(range(len(model.heads)))
    if isinstance(heads, (int, np.integer)):
        heads = [int(heads)]
    heads = list(heads)
    for h in heads:
        if not 0 <= h < len(model.heads):
            raise InvalidInputError(f"unknown head {h}; model has {len(model.heads)} heads")
    return heads


def features(model: Model, x) -> list[np.ndarray]:
    """Post-ReLU activations of every feature layer, input first."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.input_width:
        raise InvalidInputError(f"input width {x.shape[1]} does not match model input {model.input_width}")
    acts = [x]
    h = x
    for layer in model.feature_layers:
        h = np.maximum(h @ layer.weight.T + layer.bias, 0.0)
        acts.append(h)
    return acts


def forward(model: Model, x, heads="all", return_activations=False):
    """Logits of the selected heads, concatenated in head order.

    ``heads`` is ``"all"``, a head index or a list of indices. With
    ``return_activations`` the post-ReLU activations of each feature layer
    are returned as well.
    """
    idx = _select_heads(model, heads)
    acts = features(model, x)
    h = acts[-1]
    if idx:
        logits = np.concatenate([h @ model.heads[i].weight.T + model.heads[i].bias for i in idx], axis=1)
    else:
        logits = np.zeros((h.shape[0], 0))
    if return_activations:
        return logits, acts[1:]
    return logits


def softmax(z, temperature=1.0):
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z, temperature=1.0):
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ce_loss(logits, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise InvalidInputError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidInputError(f"labels must lie in [0, {logits.shape[1]})")
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def kd_loss(student_logits, teacher_logits, temperature=2.0) -> float:
    """``KL(softmax(teacher/T) || softmax(student/T))`` averaged over the batch."""
    s = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    if s.shape != t.shape:
        raise InvalidInputError(f"student logits {s.shape} and teacher logits {t.shape} differ")
    p = softmax(t, temperature)
    log_p = log_softmax(t, temperature)
    log_q = log_softmax(s, temperature)
    # p * log p is taken as 0 where p underflows to 0.
    kl = np.sum(np.where(p > 0, p * (log_p - log_q), 0.0), axis=1)
    return float(kl.mean())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    lr_decay_epochs: tuple = (20,)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    lambda_kd: float = 1.0
    kd_temperature: float = 2.0
    kd_mode: str = "output"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.lr < 0:
            raise InvalidInputError("lr must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise InvalidInputError("lr_decay_factor must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.lambda_kd < 0:
            raise InvalidInputError("lambda_kd must be non-negative")
        if not self.kd_temperature > 0:
            raise InvalidInputError("kd_temperature must be positive")
        if self.kd_mode not in ("none", "output"):
            raise InvalidInputError(f"kd_mode must be 'none' or 'output', got {self.kd_mode!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch`` after step decays."""
        n_decays = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** n_decays


def _check_teacher(student: Model, teacher: Model, task_id: int):
    if [l.shape for l in teacher.feature_layers] != [l.shape for l in student.feature_layers]:
        raise InvalidInputError("teacher feature layers do not match the student")
    if len(teacher.heads) < task_id or teacher.head_sizes[:task_id] != student.head_sizes[:task_id]:
        raise InvalidInputError("teacher does not provide the student's old-task heads")


def loss_and_grads(model: Model, x, y, task_id: int, teacher_logits=None,
                   lambda_kd=0.0, temperature=2.0):
    """Total loss ``CE(current head) + lambda * KD(old heads)`` and its gradient.

    ``teacher_logits`` is a list with one array per old head (heads
    ``0..task_id-1``). The KD term is the mean over old heads of
    ``kd_loss``. Returns ``(losses, grads)`` where ``grads`` is a ``Model``
    holding the gradient of every parameter.
    """
    acts = features(model, x)
    h = acts[-1]
    n = h.shape[0]
    grads = Model(
        [LayerWeights(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.feature_layers],
        [LayerWeights(np.zeros_like(hd.weight), np.zeros_like(hd.bias)) for hd in model.heads],
    )
    dh = np.zeros_like(h)

    head = model.heads[task_id]
    z = h @ head.weight.T + head.bias
    ce = ce_loss(z, y)
    dz = softmax(z)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads.heads[task_id].weight += dz.T @ h
    grads.heads[task_id].bias += dz.sum(axis=0)
    dh += dz @ head.weight

    kd = 0.0
    if teacher_logits is not None and task_id > 0 and lambda_kd > 0:
        if len(teacher_logits) != task_id:
            raise InvalidInputError(f"expected teacher logits for {task_id} old heads")
        for j, t_logits in enumerate(teacher_logits):
            old = model.heads[j]
            zs = h @ old.weight.T + old.bias
            kd += kd_loss(zs, t_logits, temperature) / task_id
            dzs = (softmax(zs, temperature) - softmax(t_logits, temperature))
            dzs *= lambda_kd / (temperature * n * task_id)
            grads.heads[j].weight += dzs.T @ h
            grads.heads[j].bias += dzs.sum(axis=0)
            dh += dzs @ old.weight

    for l in range(len(model.feature_layers) - 1, -1, -1):
        da = dh * (acts[l + 1] > 0)
        grads.feature_layers[l].weight += da.T @ acts[l]
        grads.feature_layers[l].bias += da.sum(axis=0)
        dh = da @ model.feature_layers[l].weight

    losses = {"ce": ce, "kd": kd, "total": ce + lambda_kd * kd}
    return losses, grads


def train_step(model: Model, x, y, task_id: int, cfg: TrainConfig, teacher: Model | None = None,
               velocity: list | None = None, lr: float | None = None):
    """One SGD-with-momentum update on a batch; returns ``(model, velocity, losses)``.

    The input model is left untouched. ``velocity`` is the momentum buffer
    from the previous step (``None`` starts from zero).
    """
    use_kd = cfg.kd_mode == "output" and teacher is not None and task_id > 0
    teacher_logits = None
    if use_kd:
        _check_teacher(model, teacher, task_id)
        teacher_logits = [forward(teacher, x, heads=j) for j in range(task_id)]
    losses, grads = loss_and_grads(
        model, x, y, task_id, teacher_logits,
        lambda_kd=cfg.lambda_kd if use_kd else 0.0, temperature=cfg.kd_temperature,
    )
    lr = cfg.lr if lr is None else lr
    new = model.copy()
    params = new.parameters()
    gs = grads.parameters()
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    else:
        velocity = [v.copy() for v in velocity]
    for p, g, v in zip(params, gs, velocity):
        v *= cfg.momentum
        v += g
        p -= lr * v
    return new, velocity, losses


def train(model: Model, x, y, task_id: int, cfg: TrainConfig, rng, teacher: Model | None = None):
    """Train ``model`` on one task for ``cfg.epochs`` epochs of shuffled mini-batches.

    Returns ``(model, history)``; ``history`` holds the mean losses per epoch.
    A non-finite loss raises ``FloatingPointError``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if task_id >= len(model.heads):
        raise InvalidInputError(f"model has no head for task {task_id}")
    velocity = None
    history = []
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        sums = {"ce": 0.0, "kd": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model, velocity, losses = train_step(model, x[idx], y[idx], task_id, cfg, teacher, velocity, lr)
            if not np.isfinite(losses["total"]):
                raise FloatingPointError(f"training diverged in epoch {epoch + 1} (non-finite loss); lower lr")
            for key in sums:
                sums[key] += losses[key]
            batches += 1
        history.append({key: val / batches for key, val in sums.items()})
    return model, history
