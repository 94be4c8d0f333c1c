"""Test-time adapter retrieval and prediction.

Every adapter carries prototypes for all classes seen so far, so each one
is a complete cosine classifier over the seen classes.  Retrieval starts
from the first adapter's prediction, re-embeds with the adapter of the
predicted task, and repeats until the predicted task stops changing.

Task indices here are 0-based positions in the adapter history.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .numerics import normalize_rows
from .stream import ClassTaskMap
from .training import PrototypeBank

FIXED_POINT = "fixed_point"
CYCLE = "cycle_detected"
MAX_ITER = "max_iter"


@dataclass
class RefineTrace:
    visited: list[int] = field(default_factory=list)
    reason: str = FIXED_POINT
    iterations: int = 0
    evaluations: int = 0


def cosine_logits(embedding, prototypes: np.ndarray) -> np.ndarray:
    """Cosine similarity of each embedding row with each prototype row."""
    emb = normalize_rows(np.atleast_2d(embedding))
    out = np.clip(emb @ normalize_rows(prototypes).T, -1.0, 1.0)
    return out[0] if np.ndim(embedding) == 1 else out


def predict_with_adapter(embedding, adapter_index: int, bank: PrototypeBank,
                         num_classes: int) -> np.ndarray:
    """Cosine logits over classes ``0..num_classes-1``.

    ``embedding`` must already be ``phi(x; A_adapter_index)`` (one row or a
    batch).
    """
    return cosine_logits(embedding, bank.matrix(adapter_index, num_classes))


def infer_task_id(logits, task_map: ClassTaskMap) -> int:
    """Task owning the argmax class; ties go to the lowest class index."""
    logits = np.asarray(logits)
    if logits.shape[-1] != task_map.num_classes:
        raise ValueError("logit count does not match the class map")
    return task_map(int(np.argmax(logits)))


def self_refine(logits_for: Callable[[int], np.ndarray], task_map: ClassTaskMap,
                max_iter: int | None = None) -> tuple[int, RefineTrace]:
    """Iterate ``i <- task(argmax f(x | A_i))`` from the first adapter.

    ``logits_for(t)`` returns ``f(x | A_t)``.  Each adapter is evaluated at
    most once, so at most ``num_tasks`` evaluations happen.  Stops at a fixed
    point, or when a task is revisited (returning that task, the first of
    the cycle), or after ``max_iter`` refinement evaluations.
    """
    n_tasks = task_map.num_tasks
    max_iter = n_tasks if max_iter is None else max_iter
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    trace = RefineTrace()
    seen: dict[int, int] = {}

    def step(t: int) -> int:
        if t not in seen:
            seen[t] = infer_task_id(logits_for(t), task_map)
            trace.evaluations += 1
        return seen[t]

    i = step(0)
    trace.visited.append(i)
    while True:
        if i not in seen:
            if trace.iterations >= max_iter:
                trace.reason = MAX_ITER
                return i, trace
            trace.iterations += 1
        j = step(i)
        trace.visited.append(j)
        if j == i:
            trace.reason = FIXED_POINT
            return j, trace
        if j in trace.visited[:-1]:
            trace.reason = CYCLE
            return j, trace
        i = j


@dataclass
class Prediction:
    label: int
    task: int
    trace: RefineTrace
    first_logits: np.ndarray
    second_logits: np.ndarray


def ensemble_predict(logits_for: Callable[[int], np.ndarray], task_map: ClassTaskMap,
                     max_iter: int | None = None) -> Prediction:
    """``argmax(f(x|A_0) + f(x|A_j))`` with ``j`` from :func:`self_refine`."""
    j, trace = self_refine(logits_for, task_map, max_iter)
    first = logits_for(0)
    second = logits_for(j)
    return Prediction(int(np.argmax(first + second)), j, trace, first, second)


class CachedLogits:
    """Memoising ``logits_for`` callable over one query's per-adapter embeddings."""

    def __init__(self, embed: Callable[[int], np.ndarray], bank: PrototypeBank, num_classes: int):
        self.embed = embed
        self.bank = bank
        self.num_classes = num_classes
        self.cache: dict[int, np.ndarray] = {}
        self.calls = 0

    def __call__(self, t: int) -> np.ndarray:
        if t not in self.cache:
            self.calls += 1
            self.cache[t] = predict_with_adapter(self.embed(t), t, self.bank, self.num_classes)
        return self.cache[t]


DIAGNOSTIC_FIELDS = ["stage", "instance", "true_label", "true_task", "initial_task", "final_task",
                     "iterations", "reason", "top1_before", "top1_after"]


def write_diagnostics(rows: list[dict], path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerows(rows)
