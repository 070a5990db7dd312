"""Per-task loop: search an EU, expand, create the task model, train, freeze.

Every stage that involves training accepts an optional ``evaluator`` so the
MDL machinery can be driven by a synthetic score in tests.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import mdl
from .metrics import RunRecord
from .search_space import EDGES, N_OPS, CellArchitecture, CellShapePlan
from .supermodel import ModelStateError, SuperModel, TaskModelRef
from .tasks import SequenceSpec, TaskSpec
from .training import accuracy, cosine_lr, derive_seed, make_sgd, train_epoch

log = logging.getLogger(__name__)
progress_log = logging.getLogger("seulab.progress")


@dataclass
class SearchConfig:
    samples: int = 100
    depth: int = 4
    batch_size: int = 512
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    alpha: float = 0.01
    channels: int = 8
    holdout: float = 0.2


@dataclass
class CreateConfig:
    epochs: int = 100
    batch_size: int = 128
    alpha: float = 0.01
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    split_seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4


@dataclass
class ModelConfig:
    n_layers: int = 4
    init_channels: int = 8
    reduction_layers: Optional[List[int]] = None
    stem_stride: int = 1

    def plan(self, input_shape) -> CellShapePlan:
        return CellShapePlan.build(input_shape, self.n_layers, self.init_channels,
                                   self.reduction_layers, self.stem_stride)


def _check_positive(cfg) -> None:
    for k, v in asdict(cfg).items():
        if isinstance(v, (int, float)) and not isinstance(v, bool) and k != "split_seed" and v <= 0:
            if k == "weight_decay" and v == 0:
                continue
            raise ValueError(f"{type(cfg).__name__}.{k} must be positive, got {v}")


def _log_round(stage: str, task, k: int, selection, acc: float, state: mdl.MdlState) -> None:
    progress_log.info(json.dumps({
        "stage": stage, "task": task, "round": k, "selection": list(map(int, selection)),
        "accuracy": acc, "max_prob": state.max_probs(),
    }))


# ---------------------------------------------------------------------------
# EU search
# ---------------------------------------------------------------------------

def proxy_evaluator(x: torch.Tensor, y: torch.Tensor, n_classes: int, cfg: SearchConfig,
                    seed: int, stem_stride: int = 1) -> Callable[[CellArchitecture], float]:
    """Score a genotype by training a small chain of its cells for one epoch."""
    n = len(y)
    n_hold = max(1, int(round(n * cfg.holdout)))
    if n - n_hold < 1:
        raise ValueError("search data too small for a held-out split")
    order = torch.randperm(n, generator=torch.Generator().manual_seed(derive_seed(seed, "holdout")))
    fit_idx, hold_idx = order[n_hold:], order[:n_hold]
    plan = CellShapePlan.build(tuple(x.shape[1:]), cfg.depth, cfg.channels, stem_stride=stem_stride)
    calls = [0]

    def evaluate(arch: CellArchitecture) -> float:
        calls[0] += 1
        net = SuperModel(plan, seed=derive_seed(seed, "proxy", calls[0]))
        net.expand(arch, 0)
        net.add_head(0, n_classes)
        ref = TaskModelRef(tuple(0 for _ in range(plan.n_layers)), 0)
        net.prune_unselected(ref)
        opt = make_sgd(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
        gen = torch.Generator().manual_seed(derive_seed(seed, "proxy-batches", calls[0]))
        net.train()
        train_epoch(lambda b: net.forward_ref(ref, b), opt, x[fit_idx], y[fit_idx], cfg.batch_size, gen)
        net.eval()
        return accuracy(lambda b: net.forward_ref(ref, b), x[hold_idx], y[hold_idx])

    return evaluate


def search_eu(task: Optional[TaskSpec], cfg: SearchConfig, rng: np.random.Generator,
              evaluator: Optional[Callable[[CellArchitecture], float]] = None,
              seed: int = 0, return_state: bool = False, stem_stride: int = 1):
    """MDL search over one op per edge; returns the most probable genotype."""
    if cfg.samples < 1:
        raise ValueError("search needs at least one sample (samples >= 1)")
    if evaluator is None:
        if task is None or task.n_train == 0:
            raise ValueError("search data is empty")
        evaluator = proxy_evaluator(task.train_x, task.train_y, task.n_classes, cfg, seed, stem_stride)
    state = mdl.init([N_OPS] * len(EDGES), cfg.alpha)
    task_id = task.task_id if task is not None else None
    for k in range(cfg.samples):
        sel = mdl.sample(state, rng)
        arch = CellArchitecture.from_indices(sel)
        acc = float(evaluator(arch))
        mdl.update(state, sel, acc)
        _log_round("search", task_id, k, sel, acc, state)
    best = CellArchitecture.from_indices(mdl.argmax_selection(state))
    return (best, state) if return_state else best


# ---------------------------------------------------------------------------
# task-model creation
# ---------------------------------------------------------------------------

def half_split(n: int, seed: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Fixed shuffled split: first half trains, second half evaluates."""
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    order = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    return order[: n // 2], order[n // 2:]


def create_task_model(model: SuperModel, task: TaskSpec, cfg: CreateConfig, rng: np.random.Generator,
                      evaluator: Optional[Callable[[TaskModelRef], float]] = None,
                      return_state: bool = False):
    """Select one slot per layer by MDL, training only the pending new slots.

    ``evaluator(ref)`` replaces the train-one-epoch-then-score step when given.
    """
    if model.pending_task is None:
        raise ModelStateError("create_task_model requires a pending expansion")
    if not model.has_head(task.task_id):
        model.add_head(task.task_id, task.n_classes)
    state = mdl.init([len(layer) for layer in model.layers], cfg.alpha)

    if evaluator is None:
        fit_idx, eval_idx = half_split(task.n_train, cfg.split_seed)
        fit_x, fit_y = task.train_x[fit_idx], task.train_y[fit_idx]
        ev_x, ev_y = task.train_x[eval_idx], task.train_y[eval_idx]
        gen = torch.Generator().manual_seed(derive_seed(cfg.split_seed, "create", task.task_id))

        def evaluator(ref: TaskModelRef) -> float:
            opt = make_sgd(model.trainable_parameters(ref, new_only=True), cfg.lr, cfg.momentum,
                           cfg.weight_decay)
            model.train()
            train_epoch(lambda b: model.forward_ref(ref, b), opt, fit_x, fit_y, cfg.batch_size, gen)
            model.eval()
            return accuracy(lambda b: model.forward_ref(ref, b), ev_x, ev_y)

    for k in range(cfg.epochs):
        sel = mdl.sample(state, rng)
        ref = TaskModelRef(tuple(sel), task.task_id)
        acc = float(evaluator(ref))
        mdl.update(state, sel, acc)
        _log_round("create", task.task_id, k, sel, acc, state)
    best = TaskModelRef(tuple(mdl.argmax_selection(state)), task.task_id)
    return (best, state) if return_state else best


# ---------------------------------------------------------------------------
# final training
# ---------------------------------------------------------------------------

def train_task_model(model: SuperModel, ref: TaskModelRef, task: TaskSpec, cfg: TrainConfig,
                     seed: int = 0) -> dict:
    """SGD with cosine-annealed lr on every unfrozen part of ``ref``.

    Returns per-epoch losses and learning rates.
    """
    if model.pending_task is not None:
        raise ModelStateError("prune the expansion before final training")
    if task.n_train == 0:
        raise ValueError("training data is empty")
    model.check_ref(ref)
    params = model.trainable_parameters(ref)
    opt = make_sgd(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    gen = torch.Generator().manual_seed(derive_seed(seed, "train", task.task_id))
    history = {"loss": [], "lr": []}
    model.train()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        if opt is not None:
            for group in opt.param_groups:
                group["lr"] = lr
        loss = train_epoch(lambda b: model.forward_ref(ref, b), opt, task.train_x, task.train_y,
                           cfg.batch_size, gen)
        history["loss"].append(loss)
        history["lr"].append(lr)
    model.eval()
    return history


# ---------------------------------------------------------------------------
# whole sequence
# ---------------------------------------------------------------------------

@dataclass
class SeuConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    create: CreateConfig = field(default_factory=CreateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def evaluate_tasks(forward: Callable[[int, torch.Tensor], torch.Tensor], tasks: Sequence[TaskSpec]) -> List[float]:
    """Percent accuracy on each task's evaluation set."""
    return [100.0 * accuracy(lambda b, t=t: forward(t.task_id, b), t.eval_x, t.eval_y) for t in tasks]


def run_sequence(seq: SequenceSpec, cfg: SeuConfig, seed: int = 0, out_dir=None,
                 callback: Optional[Callable[[str, int, SuperModel], None]] = None,
                 config_snapshot: Optional[dict] = None) -> Tuple[RunRecord, SuperModel]:
    """Learn the tasks one by one; returns the run record and the final super model.

    ``callback(stage, task_id, model)`` fires after each stage
    (expanded, created, pruned, trained, frozen, evaluated).
    """
    if len(seq) == 0:
        raise ValueError("task sequence is empty")
    for c in (cfg.search, cfg.create, cfg.train):
        _check_positive(c)
    plan = cfg.model.plan(seq.input_shape)
    model = SuperModel(plan, seed=derive_seed(seed, "supermodel"))
    snapshot = config_snapshot if config_snapshot is not None else {
        "method": "seu", "seu": asdict(cfg), "sequence": seq.descriptor}
    record = RunRecord(method="seu", seed=seed, config=snapshot)
    notify = callback or (lambda *a: None)
    try:
        for i, task in enumerate(seq):
            t = task.task_id
            t0 = time.perf_counter()
            rng = np.random.default_rng(derive_seed(seed, "mdl", t))
            arch = search_eu(task, cfg.search, rng, seed=derive_seed(seed, "search", t),
                             stem_stride=cfg.model.stem_stride)
            model.expand(arch, t)
            model.add_head(t, task.n_classes)
            notify("expanded", t, model)
            ref = create_task_model(model, task, cfg.create, rng)
            notify("created", t, model)
            model.prune_unselected(ref)
            notify("pruned", t, model)
            train_task_model(model, ref, task, cfg.train, seed=seed)
            notify("trained", t, model)
            model.freeze_task(t)
            notify("frozen", t, model)
            row = evaluate_tasks(model, seq.tasks[: i + 1])
            record.add_row(row, model.param_count(), arch.encode(), list(ref.slots))
            notify("evaluated", t, model)
            log.info("task %s done in %.1fs: row=%s params=%d ref=%s", t, time.perf_counter() - t0,
                     [round(v, 2) for v in row], model.param_count(), ref.slots)
        record.complete = True
    except Exception as exc:
        record.error = f"{type(exc).__name__}: {exc}"
        if out_dir is not None:
            record.save(out_dir)
        raise
    if out_dir is not None:
        record.save(out_dir)
        model.save(Path(out_dir) / "checkpoint")
    return record, model
