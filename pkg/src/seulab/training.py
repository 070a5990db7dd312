"""Small shared training helpers: seeding, SGD with cosine annealing, evaluation."""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def use_cpu_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from arbitrary labels (independent of PYTHONHASHSEED)."""
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def batches(x: torch.Tensor, y: torch.Tensor, batch_size: int,
            generator: Optional[torch.Generator] = None) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    n = len(x)
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def make_sgd(params: Iterable[nn.Parameter], lr: float, momentum: float,
             weight_decay: float) -> Optional[torch.optim.SGD]:
    params = [p for p in params if p.requires_grad]
    if not params:
        return None
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def train_epoch(forward: Callable[[torch.Tensor], torch.Tensor], optimizer: Optional[torch.optim.Optimizer],
                x: torch.Tensor, y: torch.Tensor, batch_size: int,
                generator: Optional[torch.Generator] = None) -> float:
    """One pass of cross-entropy training; returns the mean training loss."""
    total, count = 0.0, 0
    for xb, yb in batches(x, y, batch_size, generator):
        loss = F.cross_entropy(forward(xb), yb)
        if optimizer is not None:
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        total += float(loss.detach()) * len(xb)
        count += len(xb)
    return total / max(count, 1)


@torch.no_grad()
def accuracy(forward: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, y: torch.Tensor,
             batch_size: int = 256) -> float:
    """Top-1 accuracy as a fraction in [0, 1]."""
    if len(x) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(x), batch_size):
        logits = forward(x[start:start + batch_size])
        correct += int((logits.argmax(1) == y[start:start + batch_size]).sum())
    return correct / len(x)


def tensor_hash(module_or_tensors) -> str:
    h = hashlib.sha256()
    if isinstance(module_or_tensors, nn.Module):
        items = module_or_tensors.state_dict().items()
    else:
        items = enumerate(module_or_tensors)
    for name, t in items:
        h.update(str(name).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
