"""Adapter lifecycle: init, EMA merge, frozen history and persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import AdapterSet, load_adapter, save_adapter


class FrozenAdapterModified(RuntimeError):
    """A registered adapter no longer matches its stored checksum."""


def init_adapter(task_index: int, num_blocks: int, embed_dim: int, r: int,
                 rng: np.random.Generator, scale: float = 0.02) -> AdapterSet:
    """Fresh adapter: ``W_down ~ U[-scale, scale]``, ``W_up = 0``.

    The zero up-projection makes a new adapter an exact no-op.
    """
    if r < 1:
        raise ValueError("adapter rank r must be >= 1")
    down = [rng.uniform(-scale, scale, size=(embed_dim, r)) for _ in range(num_blocks)]
    up = [np.zeros((r, embed_dim)) for _ in range(num_blocks)]
    return AdapterSet(down, up, task_index)


def _check_same_shape(a: AdapterSet, b: AdapterSet):
    if a.num_blocks != b.num_blocks or any(
        x.shape != y.shape for x, y in zip(a.arrays(), b.arrays())
    ):
        raise ValueError("adapter dimensions differ")


def ema_merge(current: AdapterSet, history: list[AdapterSet], alpha: float) -> AdapterSet:
    """``(1 - alpha) * current + alpha * mean(history)``, element-wise.

    Applied to every ``W_down`` and ``W_up``.  History must be non-empty:
    the first stage has nothing to merge with.
    """
    if not history:
        raise ValueError("ema_merge needs at least one historical adapter")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    for h in history:
        _check_same_shape(current, h)
    if alpha == 0.0:
        return current.copy()
    coef = alpha / len(history)
    merged = []
    for k, w in enumerate(current.arrays()):
        acc = np.zeros_like(w)
        for h in history:
            acc = acc + h.arrays()[k]
        merged.append((1.0 - alpha) * w + coef * acc)
    L = current.num_blocks
    return AdapterSet(merged[:L], merged[L:], current.task_index)


@dataclass
class AdapterRegistry:
    alpha: float = 0.1
    history: list[AdapterSet] = field(default_factory=list)
    checksums: list[str] = field(default_factory=list)
    current: AdapterSet | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def __len__(self):
        return len(self.history)

    def __getitem__(self, i) -> AdapterSet:
        return self.history[i]

    def merge(self, current: AdapterSet) -> AdapterSet:
        return ema_merge(current, self.history, self.alpha)

    def audit(self) -> None:
        """Raise if any frozen adapter changed since registration."""
        for a, digest in zip(self.history, self.checksums):
            if a.checksum() != digest:
                raise FrozenAdapterModified(f"adapter for task {a.task_index} was modified")


def freeze_and_register(registry: AdapterRegistry, adapter: AdapterSet) -> AdapterRegistry:
    """Append ``adapter`` (task index must equal ``len(history)``) and freeze it."""
    if adapter.task_index != len(registry.history):
        raise ValueError(
            f"expected task index {len(registry.history)}, got {adapter.task_index}"
        )
    frozen = adapter.copy()
    for arr in frozen.arrays():
        arr.setflags(write=False)
    registry.history.append(frozen)
    registry.checksums.append(frozen.checksum())
    registry.current = None
    return registry


def save_registry(registry: AdapterRegistry, directory) -> int:
    """One checkpoint per adapter plus ``adapters.json``; returns adapter bytes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    total = 0
    entries = []
    for a in registry.history:
        name = f"adapter_{a.task_index:03d}.mos"
        nbytes = save_adapter(a, directory / name)
        total += nbytes
        entries.append({"task_index": a.task_index, "file": name, "bytes": nbytes,
                        "checksum": a.checksum()})
    rank = registry.history[0].rank if registry.history else None
    index = {"alpha": registry.alpha, "rank": rank, "adapters": entries}
    (directory / "adapters.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return total


def load_registry(directory) -> AdapterRegistry:
    directory = Path(directory)
    index = json.loads((directory / "adapters.json").read_text())
    reg = AdapterRegistry(alpha=index["alpha"])
    for e in index["adapters"]:
        freeze_and_register(reg, load_adapter(directory / e["file"]))
    return reg
