"""Central finite-difference verification of analytic gradients.

The closure under test maps a named parameter collection to a scalar loss
tensor. The checker differentiates it twice: once through the reverse-mode
tape, once numerically coordinate by coordinate, and reports the worst
relative disagreement per parameter. Run it under
:func:`~vokenret.numerics.tensor.verification_mode` so the numeric side has
float64 headroom.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Graph, Tensor, backpropagate, no_grad, zero_grads


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} (tol={self.tol:g})"]
        for name, err in sorted(self.per_param.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {name}: max rel err {err:.3e}")
        return "\n".join(lines)


def finite_difference_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    Relative error per coordinate is |g_a - g_n| / (|g_a| + |g_n| + 1e-12);
    the report carries the max over each parameter. ``f`` must be
    deterministic in its parameters.
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            warnings.warn("finite_difference_check outside float64 mode is unreliable")
            break

    zero_grads(params)
    with Graph() as graph:
        loss = f(params)
    backpropagate(graph, loss, params)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    zero_grads(params)

    def eval_loss() -> float:
        with no_grad():
            return float(f(params).data)

    per_param: dict[str, float] = {}
    for name, p in params.items():
        base = p.data
        numeric = np.zeros_like(base)
        num_flat = numeric.reshape(-1)
        for i in range(base.size):
            orig = base.flat[i]
            base.flat[i] = orig + eps
            up = eval_loss()
            base.flat[i] = orig - eps
            down = eval_loss()
            base.flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * eps)
        g_a = analytic[name]
        rel = np.abs(g_a - numeric) / (np.abs(g_a) + np.abs(numeric) + 1e-12)
        per_param[name] = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(per_param=per_param, tol=tol)
