"""Naive sequential fine-tuning: one shared trunk, one head per task, no protection."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .metrics import RunRecord
from .pipeline import TrainConfig, evaluate_tasks, _check_positive
from .tasks import SequenceSpec
from .training import cosine_lr, derive_seed, make_sgd, train_epoch

log = logging.getLogger(__name__)


@dataclass
class TrunkConfig:
    channels: List[int] = field(default_factory=lambda: [16, 32])
    hidden: int = 128


class BaselineModel(nn.Module):
    """Small conv trunk shared by all tasks; heads are created up front so the
    parameter count stays fixed over the sequence."""

    def __init__(self, input_shape: Sequence[int], n_classes: Sequence[int], trunk: TrunkConfig):
        super().__init__()
        c, h, w = input_shape
        layers: List[nn.Module] = []
        for width in trunk.channels:
            layers += [nn.Conv2d(c, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c, h, w = width, h // 2, w // 2
        layers += [nn.Flatten(), nn.Linear(c * h * w, trunk.hidden), nn.ReLU()]
        self.trunk = nn.Sequential(*layers)
        self.heads = nn.ModuleList(nn.Linear(trunk.hidden, k) for k in n_classes)

    def forward(self, task: int, x):
        return self.heads[task - 1](self.trunk(x))

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def trunk_param_count(self) -> int:
        return sum(p.numel() for p in self.trunk.parameters())


def run_sgd_baseline(seq: SequenceSpec, cfg: TrainConfig, seed: int = 0,
                     trunk: Optional[TrunkConfig] = None, out_dir=None,
                     config_snapshot: Optional[dict] = None) -> Tuple[RunRecord, BaselineModel]:
    if len(seq) == 0:
        raise ValueError("task sequence is empty")
    _check_positive(cfg)
    trunk = trunk or TrunkConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "baseline"))
        model = BaselineModel(seq.input_shape, [t.n_classes for t in seq], trunk)
    model.eval()
    snapshot = config_snapshot if config_snapshot is not None else {
        "method": "sgd_baseline", "train": asdict(cfg), "trunk": asdict(trunk), "sequence": seq.descriptor}
    record = RunRecord(method="sgd_baseline", seed=seed, config=snapshot)
    try:
        for i, task in enumerate(seq):
            if task.n_train == 0:
                raise ValueError(f"task {task.task_id} has no training data")
            params = list(model.trunk.parameters()) + list(model.heads[task.task_id - 1].parameters())
            opt = make_sgd(params, cfg.lr, cfg.momentum, cfg.weight_decay)
            gen = torch.Generator().manual_seed(derive_seed(seed, "baseline-batches", task.task_id))
            model.train()
            for epoch in range(cfg.epochs):
                for group in opt.param_groups:
                    group["lr"] = cosine_lr(cfg.lr, epoch, cfg.epochs)
                train_epoch(lambda b, t=task.task_id: model(t, b), opt, task.train_x, task.train_y,
                            cfg.batch_size, gen)
            model.eval()
            row = evaluate_tasks(model, seq.tasks[: i + 1])
            record.add_row(row, model.param_count())
            log.info("baseline task %s: row=%s", task.task_id, [round(v, 2) for v in row])
        record.complete = True
    except Exception as exc:
        record.error = f"{type(exc).__name__}: {exc}"
        if out_dir is not None:
            record.save(out_dir)
        raise
    if out_dir is not None:
        record.save(out_dir)
    return record, model
