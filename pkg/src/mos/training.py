"""Per-task adapter training, prototype and Gaussian statistics extraction.

Training minimises the mean cross-entropy of a task-local linear head on top
of ``phi(x; A_b)`` with momentum SGD and a per-step cosine learning rate.
When earlier adapters exist the trainee is EMA-merged with them after every
optimizer step.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .adapters import AdapterRegistry, freeze_and_register, init_adapter
from .backbone import AdapterSet, FrozenBackbone, TaskHead, backward, forward, softmax_xent
from .numerics import gaussian_factor, make_rng, sample_gaussian
from .stream import Dataset


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 48
    lr0: float = 0.01
    momentum: float = 0.9
    alpha: float = 0.1
    r: int = 16
    merge: bool = True
    merge_per_epoch: bool = False
    align_classifier: bool = False
    align_multiplier: int = 5
    align_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.r < 1 or self.align_multiplier < 1:
            raise ValueError("r and align_multiplier must be >= 1")


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from ``lr0`` at step 0 to 0 at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError("need 0 <= step <= total_steps and total_steps >= 1")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


class SGDMomentum:
    """``v <- m*v - lr*g; p <- p + v`` over a fixed list of arrays."""

    def __init__(self, params: list[np.ndarray], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v -= lr * g
            p += v


class DataAccessAudit:
    """Records which task's data each training stage touched."""

    def __init__(self):
        self.stage: int | None = None
        self.reads: dict[int, set] = {}

    def touch(self, data: Dataset) -> None:
        if self.stage is not None:
            self.reads.setdefault(self.stage, set()).add(data.task)

    def exemplar_free(self) -> bool:
        return all(tasks == {stage} for stage, tasks in self.reads.items())


@dataclass
class TrainResult:
    adapter: AdapterSet
    head: TaskHead
    trace: list[tuple]


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_task(data: Dataset, backbone: FrozenBackbone, registry: AdapterRegistry,
               config: TrainConfig, classes=None, audit: DataAccessAudit | None = None) -> TrainResult:
    """Train ``A_b`` (b = ``len(registry)``) on ``data`` and register it frozen.

    ``classes`` lists the task's global class ids in head-column order; it
    defaults to the sorted labels present.  The head is returned for
    inspection only; inference uses prototypes.
    """
    if len(data) == 0:
        raise ValueError("empty task dataset")
    if audit is not None:
        audit.touch(data)
    classes = sorted(set(data.labels.tolist())) if classes is None else list(classes)
    col = {c: k for k, c in enumerate(classes)}
    try:
        y_local = np.array([col[c] for c in data.labels.tolist()])
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} is outside the task's classes") from None

    task = len(registry)
    cfg = backbone.config
    rng = make_rng(config.seed, task)
    adapter = init_adapter(task, cfg.num_blocks, cfg.embed_dim, config.r, rng)
    head = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(cfg.embed_dim, len(classes)))
    registry.current = adapter

    params = [*adapter.arrays(), head]
    opt = SGDMomentum(params, config.momentum)
    steps_per_epoch = math.ceil(len(data) / config.batch_size)
    total = config.epochs * steps_per_epoch
    merging = config.merge and len(registry) > 0
    trace = []
    step = 0
    for epoch in range(config.epochs):
        for idx in iter_batches(len(data), config.batch_size, rng):
            lr = cosine_lr(step, total, config.lr0)
            loss, g = backward(data.features[idx], y_local[idx], backbone, adapter, head)
            opt.step([*g.down, *g.up, g.head], lr)
            if merging and not config.merge_per_epoch:
                _merge_in_place(adapter, registry)
            trace.append((task, step, epoch, lr, loss))
            step += 1
        if merging and config.merge_per_epoch:
            _merge_in_place(adapter, registry)

    freeze_and_register(registry, adapter)
    return TrainResult(registry[task], TaskHead(head, classes), trace)


def _merge_in_place(adapter: AdapterSet, registry: AdapterRegistry) -> None:
    merged = registry.merge(adapter)
    # in place, so the optimizer keeps pointing at the live arrays
    for dst, src in zip(adapter.arrays(), merged.arrays()):
        dst[...] = src


def write_trace(trace, path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["task", "step", "epoch", "lr", "loss"])
        for task, step, epoch, lr, loss in trace:
            w.writerow([task, step, epoch, f"{lr:.10e}", f"{loss:.10e}"])


def exact_mean(rows: np.ndarray) -> np.ndarray:
    """Column means with correctly rounded sums (order independent)."""
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    return np.array([math.fsum(rows[:, j]) for j in range(rows.shape[1])]) / n


class PrototypeBank:
    """Class prototypes keyed by ``(adapter index, class)``.

    Extracted prototypes are exact class means.  An adapter trained at stage
    ``t`` never sees data of earlier classes, so those entries are filled by
    :meth:`complete` and kept apart from the extracted ones.
    """

    def __init__(self):
        self._protos: dict[tuple[int, int], np.ndarray] = {}
        self._filled: dict[tuple[int, int], np.ndarray] = {}

    def __contains__(self, key):
        return key in self._protos or key in self._filled

    def __len__(self):
        return len(self._protos)

    def get(self, adapter: int, cls: int) -> np.ndarray:
        key = (adapter, cls)
        return self._protos[key] if key in self._protos else self._filled[key]

    def set(self, adapter: int, cls: int, proto) -> None:
        self._protos[(adapter, cls)] = np.asarray(proto, dtype=np.float64)
        self._filled.pop((adapter, cls), None)

    def adapters(self) -> list[int]:
        return sorted({a for a, _ in self._protos})

    def coverage(self) -> set:
        """Keys of extracted (not filled) prototypes."""
        return set(self._protos)

    def filled(self) -> set:
        return set(self._filled)

    def complete(self, num_adapters: int, num_classes: int, method: str = "drift") -> None:
        """Fill every missing ``(adapter, class)`` entry without touching data.

        A missing class ``c`` under adapter ``t`` is copied from the newest
        adapter ``s < t`` that has it.  With ``method="drift"`` the copy is
        shifted by the mean difference ``p[k, t] - p[k, s]`` over classes
        ``k`` extracted under both adapters.
        """
        if method not in ("copy", "drift"):
            raise ValueError(f"unknown completion method {method!r}")
        self._filled.clear()
        for t in range(num_adapters):
            own_t = {c for a, c in self._protos if a == t}
            for c in range(num_classes):
                if (t, c) in self._protos:
                    continue
                sources = [s for s in range(t) if (s, c) in self._protos]
                if not sources:
                    continue
                s = sources[-1]
                proto = self._protos[(s, c)]
                if method == "drift":
                    shared = sorted(k for k in own_t if (s, k) in self._protos)
                    if shared:
                        shift = np.mean([self._protos[(t, k)] - self._protos[(s, k)] for k in shared], axis=0)
                        proto = proto + shift
                self._filled[(t, c)] = proto

    def matrix(self, adapter: int, num_classes: int) -> np.ndarray:
        """``(num_classes, d)`` prototype matrix for one adapter."""
        try:
            return np.stack([self.get(adapter, c) for c in range(num_classes)])
        except KeyError as exc:
            raise KeyError(f"no prototype for (adapter, class) = {exc.args[0]}") from None


def extract_prototypes(data: Dataset, backbone: FrozenBackbone, adapter: AdapterSet,
                       bank: PrototypeBank, audit: DataAccessAudit | None = None,
                       embeddings: np.ndarray | None = None) -> PrototypeBank:
    """Insert the mean embedding of every class in ``data`` under ``adapter``."""
    if audit is not None:
        audit.touch(data)
    emb = forward(data.features, backbone, adapter) if embeddings is None else embeddings
    for c in np.unique(data.labels):
        bank.set(adapter.task_index, int(c), exact_mean(emb[data.labels == c]))
    return bank


@dataclass
class ClassStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int


@dataclass
class GaussianStats:
    classes: dict[int, ClassStats] = field(default_factory=dict)

    def update(self, other: "GaussianStats") -> None:
        self.classes.update(other.classes)


def compute_gaussian_stats(data: Dataset, backbone: FrozenBackbone, adapter: AdapterSet,
                           audit: DataAccessAudit | None = None,
                           embeddings: np.ndarray | None = None) -> GaussianStats:
    """Per-class mean and biased (1/K) covariance of embeddings."""
    if audit is not None:
        audit.touch(data)
    emb = forward(data.features, backbone, adapter) if embeddings is None else embeddings
    out = GaussianStats()
    for c in np.unique(data.labels):
        rows = emb[data.labels == c]
        mu = exact_mean(rows)
        diff = rows - mu
        sigma = diff.T @ diff / len(rows)
        sigma = 0.5 * (sigma + sigma.T)
        out.classes[int(c)] = ClassStats(mu, sigma, len(rows))
    return out


def align_classifier(head: np.ndarray, stats: GaussianStats, config: TrainConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Fine-tune a global linear head on features replayed from class Gaussians.

    Column ``c`` of ``head`` is class ``c``.  Each class contributes
    ``align_multiplier * batch_size`` samples; the head is trained for
    ``align_epochs`` epochs of momentum SGD at ``lr0 / 10``.
    """
    head = np.array(head, dtype=np.float64)
    if not config.align_classifier:
        return head
    feats, labels = replay_features(stats, head.shape[1], config.align_multiplier * config.batch_size, rng)
    opt = SGDMomentum([head], config.momentum)
    lr0 = config.lr0 / 10.0
    steps_per_epoch = math.ceil(len(labels) / config.batch_size)
    total = config.align_epochs * steps_per_epoch
    step = 0
    for _ in range(config.align_epochs):
        for idx in iter_batches(len(labels), config.batch_size, rng):
            _, g = softmax_xent(feats[idx] @ head, labels[idx])
            opt.step([feats[idx].T @ g], cosine_lr(step, total, lr0))
            step += 1
    return head


def replay_features(stats: GaussianStats, num_classes: int, per_class: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = [], []
    for c in range(num_classes):
        if c not in stats.classes:
            raise KeyError(f"missing Gaussian statistics for class {c}")
        st = stats.classes[c]
        feats.append(sample_gaussian(st.mu, gaussian_factor(st.sigma), per_class, rng))
        labels.append(np.full(per_class, c))
    return np.vstack(feats), np.concatenate(labels)


def save_gaussian_stats(stats: GaussianStats, path) -> int:
    ids = sorted(stats.classes)
    d = stats.classes[ids[0]].mu.shape[0] if ids else 0
    header = [len(ids), d, *ids, *[stats.classes[c].count for c in ids]]
    tensors = [stats.classes[c].mu for c in ids] + [stats.classes[c].sigma for c in ids]
    return ckpt.write_container(path, ckpt.KIND_GAUSSIAN, header, tensors,
                                {"num_classes": len(ids), "embed_dim": d})


def load_gaussian_stats(path) -> GaussianStats:
    (n, d), _ = ckpt.read_container(path, ckpt.KIND_GAUSSIAN, 2)
    header, rd = ckpt.read_container(path, ckpt.KIND_GAUSSIAN, 2 + 2 * n)
    ids, counts = header[2:2 + n], header[2 + n:]
    mus = [rd.floats(d) for _ in ids]
    sigmas = [rd.floats(d, d) for _ in ids]
    rd.done()
    return GaussianStats({c: ClassStats(m, s, k) for c, m, s, k in zip(ids, mus, sigmas, counts)})
