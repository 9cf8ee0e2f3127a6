"""AdamW with decoupled weight decay and per-parameter-group learning rates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from ..errors import TrainingError
from .tensor import DTensor


@dataclass
class AdamWState:
    """Optimizer state for a named parameter set.

    ``lr_overrides`` maps parameter names to a group learning rate; anything
    not listed uses ``lr``. Decay and adaptive update are decoupled: the
    decay term is ``-lr * weight_decay * theta`` applied alongside, not
    through, the moment estimates.
    """
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lr_overrides: Dict[str, float] = field(default_factory=dict)
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        return self.lr_overrides.get(name, self.lr)


def adamw_step(params: Dict[str, DTensor], state: AdamWState) -> None:
    """One in-place AdamW update over every trainable parameter.

    Frozen parameters (``trainable`` False) are skipped entirely; a trainable
    parameter without a populated gradient is an error.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if not p.trainable:
            continue
        if p.grad is None:
            raise TrainingError(f"parameter {name!r} has no gradient; "
                                f"run backward() before adamw_step")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        lr = state.lr_for(name)
        if state.weight_decay:
            p.data = p.data * (1.0 - lr * state.weight_decay)
        mhat = m / bc1
        vhat = v / bc2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)


def build_lr_overrides(params: Dict[str, DTensor],
                       group_lr: float,
                       predicate: Callable[[str], bool]) -> Dict[str, float]:
    """Assign ``group_lr`` to every parameter whose name satisfies predicate."""
    return {name: group_lr for name in params if predicate(name)}
