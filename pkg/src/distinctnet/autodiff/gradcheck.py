"""Finite-difference verification of reverse-mode gradients.

Central differences with h = 1e-5 in double precision, compared against the
gradient produced by backward(). For large tensors a random subset of
coordinates is probed; the relative error uses max(|a|, |n|, 1) as scale so
near-zero gradients are compared absolutely.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..errors import UsageError
from .tensor import DTensor


@dataclass
class CheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    per_input: Dict[str, float] = field(default_factory=dict)
    probes: int = 0

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"grad_check {verdict}: max rel error {self.max_rel_error:.3e} "
                f"(tol {self.tol:.0e}, {self.probes} probes)")


def grad_check(op_closure: Callable[[Sequence[DTensor]], DTensor],
               inputs: Sequence[DTensor],
               tol: float = 1e-4,
               h: float = 1e-5,
               max_probes_per_input: int = 32,
               rng: Optional[np.random.Generator] = None) -> CheckReport:
    """Compare reverse-mode gradients of a scalar closure to central
    finite differences.

    The closure is called as op_closure(inputs) and must return a scalar
    DTensor. Inputs are probed in float64 copies; the originals are left
    untouched.
    """
    rng = rng or np.random.default_rng(0)
    work = [DTensor(t.data.astype(np.float64), requires_grad=True, name=t.name)
            for t in inputs]

    out = op_closure(work)
    if not isinstance(out, DTensor) or out.size != 1:
        raise UsageError("grad_check closure must return a scalar DTensor")
    out.backward()

    max_err = 0.0
    per_input: Dict[str, float] = {}
    probes = 0
    for idx, t in enumerate(work):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n_coords = flat.size
        if n_coords > max_probes_per_input:
            coords = rng.choice(n_coords, size=max_probes_per_input, replace=False)
        else:
            coords = np.arange(n_coords)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = op_closure(work).item()
            flat[c] = orig - h
            f_minus = op_closure(work).item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)
            probes += 1
        name = t.name or f"input{idx}"
        per_input[name] = worst
        max_err = max(max_err, worst)
    return CheckReport(max_rel_error=max_err, tol=tol,
                       passed=max_err <= tol, per_input=per_input,
                       probes=probes)
