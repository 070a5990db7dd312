"""The growing multi-head super model: EU slots per layer, task heads and routing."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .search_space import CellArchitecture, CellShapePlan, build_cell, count_params, arch_param_count
from .training import derive_seed, tensor_hash

CHECKPOINT_VERSION = 1


class ModelStateError(RuntimeError):
    """An operation was called in the wrong pipeline stage."""


@dataclass(frozen=True)
class TaskModelRef:
    """One slot index per layer (0-based) plus the task whose head is used."""

    slots: Tuple[int, ...]
    head: int

    def to_dict(self) -> dict:
        return {"slots": list(self.slots), "head": self.head}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskModelRef":
        return cls(tuple(int(s) for s in d["slots"]), int(d["head"]))


class EUSlot(nn.Module):
    def __init__(self, arch: CellArchitecture, cell: nn.Module, owner_task: int, layer_index: int):
        super().__init__()
        self.arch = arch
        self.cell = cell
        self.owner_task = owner_task
        self.layer_index = layer_index
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True
        for p in self.cell.parameters():
            p.requires_grad_(False)

    def forward(self, s0, s1):
        return self.cell(s0, s1)


class Head(nn.Module):
    """Global average pooling followed by a linear classifier."""

    def __init__(self, in_channels: int, n_classes: int):
        super().__init__()
        self.n_classes = n_classes
        self.fc = nn.Linear(in_channels, n_classes)
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True
        for p in self.fc.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.fc(x.mean(dim=(2, 3)))


class SuperModel(nn.Module):
    def __init__(self, plan: CellShapePlan, seed: int = 0):
        super().__init__()
        self.plan = plan
        self.seed = seed
        self.stem = plan.stem()
        self.layers = nn.ModuleList(nn.ModuleList() for _ in range(plan.n_layers))
        self.heads = nn.ModuleDict()
        self.routing: Dict[int, TaskModelRef] = {}
        self.pending_task: Optional[int] = None
        self.eval()

    # -- structure -------------------------------------------------------

    @property
    def n_layers(self) -> int:
        return self.plan.n_layers

    def ne(self) -> List[int]:
        """Committed slot count per layer (excludes a pending new slot)."""
        pending = 1 if self.pending_task is not None else 0
        return [len(layer) - pending for layer in self.layers]

    def slot(self, layer: int, index: int) -> EUSlot:
        return self.layers[layer][index]

    def slots(self) -> Iterator[Tuple[int, int, EUSlot]]:
        for j, layer in enumerate(self.layers):
            for k, s in enumerate(layer):
                yield j, k, s

    def head(self, task: int) -> Head:
        return self.heads[str(task)]

    def has_head(self, task: int) -> bool:
        return str(task) in self.heads

    def expand(self, arch: CellArchitecture, task: int) -> "SuperModel":
        """Append one fresh, trainable slot built from ``arch`` to every layer."""
        if self.pending_task is not None:
            raise ModelStateError(f"expansion for task {self.pending_task} has not been pruned yet")
        for j, shape in enumerate(self.plan.layers()):
            cell = build_cell(arch, shape, seed=derive_seed(self.seed, "slot", task, j))
            self.layers[j].append(EUSlot(arch, cell, task, j))
        self.pending_task = task
        self.eval()
        return self

    def add_head(self, task: int, n_classes: int) -> Head:
        if self.has_head(task):
            raise ModelStateError(f"task {task} already has a head")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(self.seed, "head", task))
            head = Head(self.plan.output_channels, n_classes)
        self.heads[str(task)] = head
        self.eval()
        return head

    def new_slot_index(self, layer: int) -> int:
        if self.pending_task is None:
            raise ModelStateError("no pending expansion")
        return len(self.layers[layer]) - 1

    def check_ref(self, ref: TaskModelRef) -> None:
        if len(ref.slots) != self.n_layers:
            raise ModelStateError(f"ref has {len(ref.slots)} layers, model has {self.n_layers}")
        for j, k in enumerate(ref.slots):
            if not 0 <= k < len(self.layers[j]):
                raise ModelStateError(f"ref selects missing slot {k} in layer {j}")
        if not self.has_head(ref.head):
            raise ModelStateError(f"no head for task {ref.head}")

    def prune_unselected(self, ref: TaskModelRef) -> "SuperModel":
        """Keep each pending new slot only where ``ref`` selects it; register routing."""
        if self.pending_task is None:
            raise ModelStateError("prune without a pending expansion")
        self.check_ref(ref)
        for j, k in enumerate(ref.slots):
            last = len(self.layers[j]) - 1
            if k != last:
                del self.layers[j][last]
        self.routing[ref.head] = ref
        self.pending_task = None
        return self

    def freeze_task(self, task: int) -> "SuperModel":
        if task not in self.routing:
            raise ValueError(f"unknown task {task}")
        ref = self.routing[task]
        for j, k in enumerate(ref.slots):
            self.layers[j][k].freeze()
        self.head(ref.head).freeze()
        return self

    def trainable_parameters(self, ref: TaskModelRef, new_only: bool = False) -> List[nn.Parameter]:
        """Parameters a stage may update for ``ref``.

        With ``new_only`` only the pending expansion slots count as updatable,
        otherwise every unfrozen slot in the ref; the ref's head is always
        included unless frozen.
        """
        params = []
        for j, k in enumerate(ref.slots):
            slot = self.layers[j][k]
            if slot.frozen:
                continue
            if new_only and (self.pending_task is None or k != len(self.layers[j]) - 1):
                continue
            params.extend(slot.cell.parameters())
        head = self.head(ref.head)
        if not head.frozen:
            params.extend(head.parameters())
        return params

    # -- computation ------------------------------------------------------

    def forward_ref(self, ref: TaskModelRef, x: torch.Tensor) -> torch.Tensor:
        s0 = s1 = self.stem(x)
        for j, k in enumerate(ref.slots):
            s0, s1 = s1, self.layers[j][k](s0, s1)
        return self.head(ref.head)(s1)

    def forward(self, task: int, x: torch.Tensor) -> torch.Tensor:
        if task not in self.routing:
            raise ModelStateError(f"no routing entry for task {task}")
        return self.forward_ref(self.routing[task], x)

    def param_count(self) -> int:
        return count_params(self)

    def slot_param_count(self, arch: CellArchitecture) -> int:
        return sum(arch_param_count(arch, shape) for shape in self.plan.layers())

    def slot_hashes(self) -> Dict[Tuple[int, int], str]:
        return {(j, k): tensor_hash(s.cell) for j, k, s in self.slots()}

    def head_hashes(self) -> Dict[int, str]:
        return {int(t): tensor_hash(h) for t, h in self.heads.items()}

    # -- persistence ------------------------------------------------------

    def save(self, directory) -> Path:
        if self.pending_task is not None:
            raise ModelStateError("cannot checkpoint mid-expansion")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        layers = []
        for j, layer in enumerate(self.layers):
            entries = []
            for k, s in enumerate(layer):
                fname = f"slot_{j}_{k}.pt"
                torch.save(s.cell.state_dict(), directory / fname)
                entries.append({"arch": s.arch.encode(), "owner_task": s.owner_task,
                                "frozen": s.frozen, "file": fname})
            layers.append(entries)
        heads = {}
        for t, h in self.heads.items():
            fname = f"head_{t}.pt"
            torch.save(h.state_dict(), directory / fname)
            heads[t] = {"classes": h.n_classes, "frozen": h.frozen, "file": fname}
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "shape_plan": self.plan.to_dict(),
            "layers": layers,
            "heads": heads,
            "routing": {str(t): r.to_dict() for t, r in self.routing.items()},
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> "SuperModel":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise ModelStateError(f"unsupported checkpoint version {manifest.get('format_version')}")
        model = cls(CellShapePlan.from_dict(manifest["shape_plan"]), seed=manifest["seed"])
        shapes = model.plan.layers()
        for j, entries in enumerate(manifest["layers"]):
            for e in entries:
                arch = CellArchitecture.decode(e["arch"])
                cell = build_cell(arch, shapes[j])
                cell.load_state_dict(torch.load(directory / e["file"], weights_only=True))
                slot = EUSlot(arch, cell, e["owner_task"], j)
                if e["frozen"]:
                    slot.freeze()
                model.layers[j].append(slot)
        for t, e in manifest["heads"].items():
            head = Head(model.plan.output_channels, e["classes"])
            head.load_state_dict(torch.load(directory / e["file"], weights_only=True))
            if e["frozen"]:
                head.freeze()
            model.heads[t] = head
        model.routing = {int(t): TaskModelRef.from_dict(r) for t, r in manifest["routing"].items()}
        model.eval()
        return model
