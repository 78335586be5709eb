"""Fixed-budget exemplar memory and per-step training-set assembly."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InputContractError, StreamContractError
from .herding import herding_select
from .losses import ClassCounts

__all__ = ["Exemplar", "ExemplarMemory", "TrainingSet", "rebuild_memory", "build_training_set"]


@dataclass(frozen=True)
class Exemplar:
    x: np.ndarray
    step: int  # step whose data the sample came from
    index: int  # position in the source dataset


@dataclass
class ExemplarMemory:
    budget: int
    classes: dict[int, list[Exemplar]] = field(default_factory=dict)

    def __post_init__(self):
        if self.budget < 1:
            raise InputContractError("memory budget must be >= 1")

    def __len__(self) -> int:
        return sum(len(v) for v in self.classes.values())

    def labels(self) -> list[int]:
        return sorted(self.classes)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for label in self.labels():
            for ex in self.classes[label]:
                xs.append(ex.x)
                ys.append(label)
        if not xs:
            return np.empty((0,)), np.empty((0,), dtype=np.int64)
        return np.stack(xs), np.asarray(ys, dtype=np.int64)

    def manifest(self) -> dict:
        return {
            "budget": self.budget,
            "classes": {
                str(label): [{"step": ex.step, "index": ex.index} for ex in self.classes[label]]
                for label in self.labels()
            },
        }

    def save_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))

    @classmethod
    def from_manifest(cls, manifest: dict, source_x: np.ndarray) -> "ExemplarMemory":
        """Rebuild a memory from a saved manifest and the dataset it indexes."""
        mem = cls(int(manifest["budget"]))
        for label, entries in manifest["classes"].items():
            mem.classes[int(label)] = [
                Exemplar(np.asarray(source_x[e["index"]]), int(e["step"]), int(e["index"])) for e in entries
            ]
        return mem


def _normalised_features(model, x: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        z = model.features(torch.as_tensor(np.asarray(x)))
        if isinstance(z, tuple):
            z = z[0]
        z = z.double()
        z = z / z.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return z.numpy()


def rebuild_memory(model, previous: ExemplarMemory | None, recent, budget: int, recent_step: int) -> ExemplarMemory:
    """Select exemplars for every seen class with herding in ``model``'s feature space.

    ``model`` is the network as it stood at the end of ``recent_step`` (a live
    model or a :class:`~iclkit.model.FrozenSnapshot`). Classes already held
    in ``previous`` are reselected from their stored exemplars only; the
    classes of ``recent`` (the step's training data, anything with ``x``,
    ``y``, ``index`` and ``classes``) are selected from that data.
    """
    memory = ExemplarMemory(budget)
    pools: dict[int, list[Exemplar]] = {}
    if previous is not None:
        for label, items in previous.classes.items():
            pools[label] = list(items)
    for label in recent.classes:
        if label in pools:
            raise StreamContractError(f"class {label} is both in memory and in the recent step")
        rows = np.flatnonzero(recent.y == label)
        pools[label] = [Exemplar(recent.x[r], recent_step, int(recent.index[r])) for r in rows]
    seen = set(getattr(model, "seen_classes", pools))
    for label in sorted(pools):
        if label not in seen:
            raise StreamContractError(f"class {label} is not known to the model")
        pool = pools[label]
        if not pool:
            raise InputContractError(f"no samples available for seen class {label}")
        feats = _normalised_features(model, np.stack([ex.x for ex in pool]))
        memory.classes[label] = [pool[i] for i in herding_select(feats, budget)]
    return memory


@dataclass
class TrainingSet:
    x: np.ndarray
    y: np.ndarray  # labels
    is_memory: np.ndarray
    counts: ClassCounts

    def __len__(self) -> int:
        return len(self.y)


def build_training_set(memory: ExemplarMemory | None, incoming) -> TrainingSet:
    """Union of the memory and the incoming step data, with per-class counts."""
    x_new = np.asarray(incoming.x)
    y_new = np.asarray(incoming.y, dtype=np.int64)
    if memory is None or len(memory) == 0:
        x, y = x_new, y_new
        is_mem = np.zeros(len(y), dtype=bool)
    else:
        overlap = set(memory.labels()) & set(np.unique(y_new).tolist())
        if overlap:
            raise StreamContractError(f"labels in both memory and incoming data: {sorted(overlap)}")
        x_mem, y_mem = memory.arrays()
        x = np.concatenate([x_mem.astype(x_new.dtype), x_new])
        y = np.concatenate([y_mem, y_new])
        is_mem = np.concatenate([np.ones(len(y_mem), dtype=bool), np.zeros(len(y_new), dtype=bool)])
    return TrainingSet(x, y, is_mem, ClassCounts.from_labels(y))
