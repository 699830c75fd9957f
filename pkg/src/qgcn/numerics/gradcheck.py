"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

STEP = 1e-5
MIN_PROBES = 200


@dataclass
class TensorReport:
    name: str
    shape: tuple[int, ...]
    probed: int
    max_rel_error: float
    worst_index: tuple[int, ...] | None


@dataclass
class GradcheckReport:
    tol: float
    tensors: list[TensorReport] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    @property
    def probed(self) -> int:
        return sum(t.probed for t in self.tensors)

    def summary(self) -> str:
        worst = max(self.tensors, key=lambda t: t.max_rel_error) if self.tensors else None
        status = "PASS" if self.passed else "FAIL"
        where = f" worst={worst.name}{list(worst.worst_index or ())}" if worst else ""
        return (
            f"gradcheck {status}: max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e} "
            f"tensors={len(self.tensors)} probes={self.probed}{where}"
        )


def rel_error(a, n):
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-4,
    step: float = STEP,
    probes: int = MIN_PROBES,
    seed: int = 0,
) -> GradcheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Tensors with more than ``probes`` entries are subsampled (seeded);
    smaller ones are probed exhaustively.  Inputs are perturbed in place,
    so ``f`` must recompute everything from them on every call.
    """
    for t in inputs:
        t.grad = None
    loss = f(*inputs)
    loss.backward(params=inputs)
    analytic = [t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol)
    for i, (t, ga) in enumerate(zip(inputs, analytic)):
        flat = t.data.reshape(-1)
        if flat.size <= probes:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=probes, replace=False))
        errs = np.empty(idx.size)
        gaf = ga.reshape(-1)
        with no_grad():
            for j, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + step
                fp = f(*inputs).item()
                flat[k] = orig - step
                fm = f(*inputs).item()
                flat[k] = orig
                errs[j] = rel_error(gaf[k], (fp - fm) / (2 * step))
        worst = int(np.argmax(errs)) if errs.size else None
        report.tensors.append(
            TensorReport(
                name=t.name or f"input{i}",
                shape=t.shape,
                probed=int(idx.size),
                max_rel_error=float(errs.max()) if errs.size else 0.0,
                worst_index=None if worst is None else tuple(int(x) for x in np.unravel_index(idx[worst], t.shape)),
            )
        )
    return report
