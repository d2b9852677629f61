"""Continual-learning driver, evaluation metrics and the pathway probe."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import FusionConfig, align_and_fuse
from .data import Dataset, TaskStream
from .errors import InvalidInputError
from .netcore import Model, TrainConfig, add_head, features, forward, init_model, train

LWI = "lwi"
ALL_MAX = "all_max"
FINETUNE = "finetune"
STRATEGIES = (LWI, ALL_MAX, FINETUNE)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    strategy: str = LWI
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidInputError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy in (LWI, ALL_MAX) and self.fusion is None:
            raise InvalidInputError(f"strategy {self.strategy!r} needs a fusion config")

    def effective_fusion(self) -> FusionConfig:
        if self.strategy == ALL_MAX:
            policy = dataclasses.replace(self.fusion.policy, n_deep=0)
            return dataclasses.replace(self.fusion, policy=policy)
        return self.fusion


@dataclass
class MetricsLog:
    # acc_matrix[s, j]: task-aware accuracy (%) on task j after step s; NaN for j > s.
    acc_matrix: np.ndarray
    agnostic_acc: list = field(default_factory=list)
    forgetting: list = field(default_factory=list)
    activation_levels: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.agnostic_acc)

    def final_aware_mean(self) -> float:
        s = self.n_steps - 1
        return float(np.mean(self.acc_matrix[s, :s + 1]))

    def mean_forgetting(self) -> float:
        return float(self.forgetting[-1]) if self.forgetting else 0.0


def _check_heads(model: Model, stream: TaskStream):
    if len(model.heads) < len(stream):
        raise InvalidInputError(f"model has {len(model.heads)} heads for {len(stream)} tasks")
    if model.head_sizes[:len(stream)] != stream.head_sizes:
        raise InvalidInputError(f"head sizes {model.head_sizes} do not fit tasks {stream.head_sizes}")


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    return 100.0 * float(np.sum(pred == labels)) / len(labels)


def eval_task_aware(model: Model, stream: TaskStream, split: str = "test") -> np.ndarray:
    """Accuracy (%) per task, predicting by argmax within that task's own head."""
    _check_heads(model, stream)
    out = []
    for t, task in enumerate(stream):
        ds = getattr(task, split)
        logits = forward(model, ds.features, heads=t)
        out.append(accuracy(np.argmax(logits, axis=1), ds.labels))
    return np.array(out)


def eval_task_agnostic(model: Model, stream: TaskStream, split: str = "test") -> float:
    """Accuracy (%) over all tasks' examples, argmax across every head's outputs.

    A prediction is correct when the global argmax equals the task offset
    plus the local label.
    """
    _check_heads(model, stream)
    heads = list(range(len(stream)))
    correct = 0
    total = 0
    for task in stream:
        ds = getattr(task, split)
        logits = forward(model, ds.features, heads=heads)
        correct += int(np.sum(np.argmax(logits, axis=1) == ds.labels + task.class_offset))
        total += len(ds)
    return 100.0 * correct / total


def forgetting(acc_matrix, include_current: bool = True) -> list[float]:
    """Average forgetting after each step ``s >= 2`` (returned in step order).

    For every earlier task ``j`` the reference is the best accuracy it ever
    had from the step it was learned up to step ``s`` (inclusive by default;
    with ``include_current=False`` only steps before ``s`` count and the
    value can go negative under backward transfer). An empty list is
    returned for fewer than two steps.
    """
    acc = np.asarray(acc_matrix, dtype=np.float64)
    n = acc.shape[0]
    out = []
    for s in range(1, n):
        stop = s + 1 if include_current else s
        terms = [np.max(acc[j:stop, j]) - acc[s, j] for j in range(s)]
        out.append(float(np.mean(terms)))
    return out


def activation_levels(model: Model, data) -> np.ndarray:
    """Mean |activation| per channel of the last feature layer over ``data``."""
    x = data.features if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError("activation probe needs a non-empty batch")
    h = features(model, x)[-1]
    return np.abs(h).mean(axis=0)


def top_k_channels(levels, top_k: int) -> set:
    levels = np.asarray(levels, dtype=np.float64)
    # Stable sort on the negated levels: ties go to the lower index.
    order = np.argsort(-levels, kind="stable")
    return set(order[:top_k].tolist())


def pathway_overlap(levels_a, levels_b, top_k: int = 10) -> float:
    """Jaccard index of the top-``top_k`` channel sets of two activation profiles."""
    a = np.asarray(levels_a)
    b = np.asarray(levels_b)
    if a.shape != b.shape:
        raise InvalidInputError(f"activation vectors differ in length: {a.shape} vs {b.shape}")
    if top_k < 1 or top_k > a.shape[0]:
        raise InvalidInputError(f"top_k must lie in 1..{a.shape[0]}, got {top_k}")
    sa = top_k_channels(a, top_k)
    sb = top_k_channels(b, top_k)
    return len(sa & sb) / len(sa | sb)


def pairwise_overlaps(levels: list, top_k: int = 10) -> list[tuple[int, int, float]]:
    return [
        (i, j, pathway_overlap(levels[i], levels[j], top_k))
        for i in range(len(levels))
        for j in range(i + 1, len(levels))
    ]


def run_lwi(stream: TaskStream, cfg: RunConfig | None = None, on_step=None):
    """Train over ``stream`` task by task and return ``(result_model, MetricsLog)``.

    The first task trains a fresh model with cross-entropy. Each later task
    appends a head to the current result model, trains it with
    cross-entropy plus distillation towards that result model, and (for
    ``lwi``/``all_max``) fuses it back in with ``align_and_fuse``;
    ``finetune`` simply keeps the trained model. ``on_step(step, model)`` is
    called with the result model after every task.
    """
    cfg = cfg or RunConfig()
    if len(stream) < 1:
        raise InvalidInputError("empty task stream")
    rng = np.random.default_rng(cfg.train.seed)
    n_tasks = len(stream)
    log = MetricsLog(np.full((n_tasks, n_tasks), np.nan))
    fusion = cfg.effective_fusion() if cfg.strategy != FINETUNE else None
    result = None
    for t, task in enumerate(stream):
        if t == 0:
            model = init_model(stream.dim, list(cfg.hidden), [task.class_count], rng)
            result, _ = train(model, task.train.features, task.train.labels, 0, cfg.train, rng)
        else:
            student = add_head(result, task.class_count, rng)
            teacher = result if cfg.strategy != FINETUNE else None
            student, _ = train(student, task.train.features, task.train.labels, t, cfg.train, rng, teacher)
            result = student if fusion is None else align_and_fuse(result, student, fusion)
        seen = stream.prefix(t + 1)
        log.acc_matrix[t, :t + 1] = eval_task_aware(result, seen)
        log.agnostic_acc.append(eval_task_agnostic(result, seen))
        if t > 0:
            log.forgetting.append(forgetting(log.acc_matrix[:t + 1, :t + 1])[-1])
        if on_step is not None:
            on_step(t, result)
    log.activation_levels = [activation_levels(result, task.test) for task in stream]
    return result, log


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_metrics(log: MetricsLog, out_dir, top_k: int | None = None) -> None:
    """Export a ``MetricsLog`` as CSV files (1-based step and task ids)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = log.n_steps
    with open(out / "acc_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "task", "accuracy"])
        for s in range(n):
            for j in range(s + 1):
                w.writerow([s + 1, j + 1, _fmt(log.acc_matrix[s, j])])
    with open(out / "agnostic.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "accuracy"])
        for s, a in enumerate(log.agnostic_acc):
            w.writerow([s + 1, _fmt(a)])
    with open(out / "forgetting.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "forgetting"])
        for s, f in enumerate(log.forgetting, start=2):
            w.writerow([s, _fmt(f)])
    write_activations(log.activation_levels, out / "activations.csv")
    if top_k is not None and len(log.activation_levels) > 1:
        write_overlaps(pairwise_overlaps(log.activation_levels, top_k), out / "overlap.csv")


def write_activations(levels: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "channel_index", "level"])
        for t, vec in enumerate(levels):
            for c, v in enumerate(vec):
                w.writerow([t + 1, c, _fmt(v)])


def write_overlaps(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_a", "task_b", "jaccard"])
        for i, j, v in rows:
            w.writerow([i + 1, j + 1, _fmt(v)])
