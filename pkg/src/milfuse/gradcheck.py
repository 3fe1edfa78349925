"""Finite-difference verification of analytic gradients.

Central differences at a fixed step are compared entry-by-entry against the
gradients produced by ``backward``. The check runs the computation in
float64 storage so the difference quotient is not drowned by rounding;
the gradient formulas being verified are precision-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonDeterministicError
from .tensor import Parameter, backward, no_grad, reset_tape, using_dtype


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    step: float
    tol: float
    params: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def lines(self):
        for p in self.params:
            status = "ok" if p.passed else "FAIL"
            yield f"{status:4s} {p.name:40s} max_rel_err={p.max_rel_err:.3e}"


def _named(params):
    out = []
    for item in params:
        if isinstance(item, Parameter):
            out.append((item.name, item))
        else:
            out.append((str(item[0]), item[1]))
    return out


def grad_check(f, params, step: float = 1e-3, tol: float = 1e-2,
               dtype=np.float64) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``params`` is an iterable of Parameters or ``(name, tensor)`` pairs whose
    entries are perturbed in place. The relative error denominator is
    ``max(|analytic|, |numeric|, 1e-8)`` per entry; a parameter passes when
    its worst entry stays within ``tol``. Raises ``NonDeterministicError``
    if two evaluations of ``f`` at the same point disagree.
    """
    named = _named(params)
    report = GradCheckReport(step=step, tol=tol)

    with using_dtype(dtype):
        with no_grad():
            v1 = f().item()
            v2 = f().item()
        if v1 != v2:
            raise NonDeterministicError(
                f"f() returned {v1!r} then {v2!r} at the same point"
            )

        for _, p in named:
            p.grad = None
        reset_tape()
        loss = f()
        if loss.requires_grad:
            backward(loss)
        reset_tape()

        analytic = {
            name: (np.zeros(p.shape) if p.grad is None
                   else p.grad.astype(np.float64).copy())
            for name, p in named
        }

        with no_grad():
            for name, p in named:
                flat = p.data.reshape(-1)
                num = np.zeros(flat.shape, dtype=np.float64)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    hi_x = float(flat[i])
                    hi = f().item()
                    flat[i] = orig - step
                    lo_x = float(flat[i])
                    lo = f().item()
                    flat[i] = orig
                    num[i] = (hi - lo) / (hi_x - lo_x)
                ana = analytic[name].reshape(-1)
                denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
                rel = np.abs(ana - num) / denom
                worst = int(np.argmax(rel))
                report.params.append(
                    ParamCheck(
                        name=name,
                        max_rel_err=float(rel[worst]),
                        worst_index=np.unravel_index(worst, p.shape) if p.ndim else (),
                        passed=bool(rel[worst] <= tol),
                    )
                )
    return report
