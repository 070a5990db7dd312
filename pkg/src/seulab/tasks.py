"""Task sequences built from a cached base dataset (permuted or class-split)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .datasets import BaseDataset, load


@dataclass
class TaskSpec:
    task_id: int
    n_classes: int
    train_x: torch.Tensor
    train_y: torch.Tensor
    eval_x: torch.Tensor
    eval_y: torch.Tensor
    descriptor: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.train_x.shape[1:])

    @property
    def n_train(self) -> int:
        return len(self.train_y)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t in (self.train_x, self.train_y, self.eval_x, self.eval_y):
            h.update(t.numpy().tobytes())
        return h.hexdigest()


@dataclass
class SequenceSpec:
    tasks: List[TaskSpec]
    seed: int
    descriptor: dict

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    @property
    def input_shape(self):
        return self.tasks[0].input_shape


def _cap(n: int, cap: Optional[int], rng: np.random.Generator) -> np.ndarray:
    idx = np.arange(n)
    if cap is not None and cap < n:
        idx = np.sort(rng.permutation(n)[:cap])
    return idx


def _tensor(base: BaseDataset, x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(base.normalize(x)))


def make_permuted_sequence(base: BaseDataset, n_tasks: int, seed: int, cap: Optional[int] = None,
                           eval_cap: Optional[int] = None) -> SequenceSpec:
    """Task m sees every image through its own fixed pixel permutation (task 1: identity)."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    rng = np.random.default_rng(seed)
    n_pix = int(np.prod(base.input_shape))
    tasks = []
    for m in range(1, n_tasks + 1):
        perm = np.arange(n_pix) if m == 1 else rng.permutation(n_pix)
        tr = _cap(len(base.train_y), cap, rng)
        ev = _cap(len(base.test_y), eval_cap, rng)

        def permute(x):
            return x.reshape(len(x), -1)[:, perm].reshape(x.shape)

        tasks.append(TaskSpec(
            task_id=m,
            n_classes=base.n_classes,
            train_x=_tensor(base, permute(base.train_x[tr])),
            train_y=torch.from_numpy(base.train_y[tr].astype(np.int64)),
            eval_x=_tensor(base, permute(base.test_x[ev])),
            eval_y=torch.from_numpy(base.test_y[ev].astype(np.int64)),
            descriptor={"permutation_sha256": hashlib.sha256(perm.tobytes()).hexdigest()},
        ))
    desc = {"kind": "permuted", "dataset": base.name, "n_tasks": n_tasks, "seed": seed,
            "cap": cap, "eval_cap": eval_cap}
    return SequenceSpec(tasks, seed, desc)


def make_split_sequence(base: BaseDataset, classes_per_task: int, seed: int, cap: Optional[int] = None,
                        eval_cap: Optional[int] = None, shuffle_classes: bool = False,
                        n_tasks: Optional[int] = None) -> SequenceSpec:
    """Partition the classes into consecutive groups; labels remapped to 0..k-1."""
    n_classes = base.n_classes
    if classes_per_task < 1 or n_classes % classes_per_task:
        raise ValueError(f"{n_classes} classes cannot be split into groups of {classes_per_task}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_classes) if shuffle_classes else np.arange(n_classes)
    groups = [order[i:i + classes_per_task] for i in range(0, n_classes, classes_per_task)]
    if n_tasks is not None:
        if not 1 <= n_tasks <= len(groups):
            raise ValueError(f"n_tasks must lie in 1..{len(groups)}")
        groups = groups[:n_tasks]
    tasks = []
    for m, classes in enumerate(groups, start=1):
        remap = {int(c): k for k, c in enumerate(classes)}

        def subset(x, y, limit):
            idx = np.flatnonzero(np.isin(y, classes))
            idx = idx[_cap(len(idx), limit, rng)]
            labels = np.array([remap[int(v)] for v in y[idx]], dtype=np.int64)
            return _tensor(base, x[idx]), torch.from_numpy(labels)

        trx, try_ = subset(base.train_x, base.train_y, cap)
        evx, evy = subset(base.test_x, base.test_y, eval_cap)
        tasks.append(TaskSpec(m, classes_per_task, trx, try_, evx, evy,
                              descriptor={"classes": [int(c) for c in classes]}))
    desc = {"kind": "split", "dataset": base.name, "classes_per_task": classes_per_task,
            "n_tasks": len(groups), "seed": seed, "cap": cap, "eval_cap": eval_cap,
            "shuffle_classes": shuffle_classes}
    return SequenceSpec(tasks, seed, desc)


def build_sequence(descriptor: dict, cache=None) -> SequenceSpec:
    """Materialize a sequence from its serialized descriptor."""
    d = dict(descriptor)
    kind = d.pop("kind")
    base = load(d.pop("dataset"), cache)
    if kind == "permuted":
        return make_permuted_sequence(base, d["n_tasks"], d.get("seed", 0), d.get("cap"), d.get("eval_cap"))
    if kind == "split":
        return make_split_sequence(base, d["classes_per_task"], d.get("seed", 0), d.get("cap"),
                                   d.get("eval_cap"), d.get("shuffle_classes", False), d.get("n_tasks"))
    raise ValueError(f"unknown sequence kind {kind!r}")
