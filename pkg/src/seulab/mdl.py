"""Multinomial distribution learning over independent categorical variables.

Each variable keeps a probability vector, the accuracy observed the last time
each candidate was chosen, and how many times each candidate was chosen.  A
chosen candidate gains probability for every rival it beats on accuracy while
having been tried fewer times, and loses probability for every rival that beats
it the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

PROB_FLOOR = 1e-6


@dataclass
class MdlState:
    probs: List[np.ndarray]
    acc: List[np.ndarray]
    epochs: List[np.ndarray]
    alpha: float
    steps: int = 0

    @property
    def n_vars(self) -> int:
        return len(self.probs)

    @property
    def cardinalities(self) -> List[int]:
        return [len(p) for p in self.probs]

    def copy(self) -> "MdlState":
        return MdlState([p.copy() for p in self.probs], [a.copy() for a in self.acc],
                        [e.copy() for e in self.epochs], self.alpha, self.steps)

    def max_probs(self) -> List[float]:
        return [float(p.max()) for p in self.probs]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "steps": self.steps,
            "vars": [
                {"P": p.tolist(), "A": a.tolist(), "E": e.tolist()}
                for p, a, e in zip(self.probs, self.acc, self.epochs)
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MdlState":
        vs = d["vars"]
        return cls([np.asarray(v["P"], dtype=np.float64) for v in vs],
                   [np.asarray(v["A"], dtype=np.float64) for v in vs],
                   [np.asarray(v["E"], dtype=np.int64) for v in vs],
                   float(d["alpha"]), int(d.get("steps", 0)))


def init(cardinalities: Sequence[int], alpha: float) -> MdlState:
    cards = [int(c) for c in cardinalities]
    if any(c < 1 for c in cards):
        raise ValueError(f"every cardinality must be >= 1, got {cards}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return MdlState(
        probs=[np.full(c, 1.0 / c) for c in cards],
        acc=[np.zeros(c) for c in cards],
        epochs=[np.zeros(c, dtype=np.int64) for c in cards],
        alpha=float(alpha),
    )


def sample(state: MdlState, rng: np.random.Generator) -> List[int]:
    """Draw one index per variable from its categorical distribution."""
    out = []
    for p in state.probs:
        # inverse-CDF draw; float rounding at the top end maps to the last index
        u = rng.random()
        k = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
        out.append(min(k, len(p) - 1))
    return out


def reward_penalty(acc: np.ndarray, epochs: np.ndarray, s: int) -> Tuple[int, int]:
    """Dominance counts of candidate ``s`` against every rival in one variable."""
    reward = int(np.sum((acc[s] > acc) & (epochs[s] < epochs)))
    penalty = int(np.sum((acc[s] < acc) & (epochs[s] > epochs)))
    return reward, penalty


def update(state: MdlState, selection: Sequence[int], accuracy: float) -> MdlState:
    """Record ``accuracy`` for the selected candidates and shift probabilities.

    Mutates and returns ``state``.
    """
    accuracy = float(accuracy)
    if not 0.0 <= accuracy <= 1.0 or np.isnan(accuracy):
        raise ValueError(f"accuracy must be a fraction in [0, 1], got {accuracy}")
    if len(selection) != state.n_vars:
        raise ValueError(f"selection has {len(selection)} entries for {state.n_vars} variables")
    for v, s in enumerate(selection):
        if not 0 <= s < len(state.probs[v]):
            raise ValueError(f"selection {s} out of range for variable {v}")
    for v, s in enumerate(selection):
        p, a, e = state.probs[v], state.acc[v], state.epochs[v]
        a[s] = accuracy
        e[s] += 1
        reward, penalty = reward_penalty(a, e, s)
        p[s] += state.alpha * (reward - penalty)
        np.maximum(p, PROB_FLOOR, out=p)
        p /= p.sum()
    state.steps += 1
    return state


def argmax_selection(state: MdlState) -> List[int]:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest index
    return [int(np.argmax(p)) for p in state.probs]
