"""Gradients of scalar objectives and their finite-difference audit.

Analytic gradients come from torch's reverse-mode autodiff. Objectives are
callables taking a ``{name: tensor}`` mapping of parameter blocks and
returning a scalar tensor; stochastic objectives must close over a fixed
noise tensor so that both sides of every finite-difference probe see the
same draws.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import torch

from .errors import FlowError, NumericalError
from .linalg import DTYPE

Objective = Callable[[Mapping[str, torch.Tensor]], torch.Tensor]

REL_FLOOR = 1e-8


@dataclass
class GradientReport:
    block: str
    analytic: torch.Tensor
    numeric: torch.Tensor
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4

    def as_dict(self) -> dict:
        return {"block": self.block, "size": int(self.analytic.numel()),
                "max_rel_error": self.max_rel_error}


def relative_error(a: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    return (a - f).abs() / torch.clamp(a.abs() + f.abs(), min=REL_FLOOR)


def gradients(objective: Objective, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of ``objective`` with respect to every block in ``params``.

    Raises :class:`NumericalError` naming the first block with a non-finite entry.
    """
    leaves = {n: p.detach().clone().to(DTYPE).requires_grad_(True) for n, p in params.items()}
    value = objective(leaves)
    if value.numel() != 1:
        raise ValueError("objective must return a scalar")
    if not value.requires_grad:
        return {n: torch.zeros_like(p) for n, p in leaves.items()}
    grads = torch.autograd.grad(value.reshape(()), list(leaves.values()), allow_unused=True)
    out = {}
    for (name, leaf), g in zip(leaves.items(), grads):
        g = torch.zeros_like(leaf) if g is None else g.detach()
        if not bool(torch.isfinite(g).all()):
            raise NumericalError(f"non-finite gradient in block {name!r}", block=name)
        out[name] = g
    return out


@torch.no_grad()
def finite_difference(objective: Objective, params: Mapping[str, torch.Tensor],
                      fd_step: float = 1e-5) -> dict[str, torch.Tensor]:
    """Central-difference gradient, one coordinate at a time."""
    base = {n: p.detach().clone().to(DTYPE) for n, p in params.items()}
    out = {}
    for name, p in base.items():
        g = torch.zeros_like(p)
        flat, gflat = p.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + fd_step
            up = float(objective(base))
            flat[i] = orig - fd_step
            down = float(objective(base))
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * fd_step)
        out[name] = g
    return out


def grad_check(objective: Objective, params: Mapping[str, torch.Tensor],
               fd_step: float = 1e-5) -> list[GradientReport]:
    """Compare analytic and central-difference gradients block by block.

    Never raises on numerical trouble; a failing block reports an infinite error.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    try:
        analytic = gradients(objective, params)
    except FlowError:
        analytic = None
    try:
        numeric = finite_difference(objective, params, fd_step)
    except FlowError:
        numeric = None
    reports = []
    for name, p in params.items():
        if analytic is None or numeric is None:
            nan = torch.full_like(p, float("nan"), dtype=DTYPE)
            reports.append(GradientReport(name, nan if analytic is None else analytic[name],
                                          nan if numeric is None else numeric[name], float("inf")))
            continue
        a, f = analytic[name], numeric[name]
        err = float(relative_error(a, f).max()) if a.numel() else 0.0
        reports.append(GradientReport(name, a, f, err))
    return reports
