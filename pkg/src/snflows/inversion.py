"""Constructive inverses of planar and Sylvester flows.

The Sylvester inverse splits ``z'`` into its component in ``span(Q)`` and the
orthogonal complement. The complement passes through unchanged; coordinates
in ``span(Q)`` are recovered by back-substitution from the last coordinate to
the first, each step solving a strictly increasing scalar equation. When
``R~`` is not diagonal the problem is first mapped through ``g(v) = R~ v``.

Inverses are diagnostics: training only ever needs the forward direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConvergenceError, NonInvertibleError
from .flows import (
    TANH,
    Activation,
    FlowStack,
    GeneralSylvesterParams,
    IAFParams,
    PlanarParams,
    SylvesterParams,
    made_outputs,
)
from .linalg import as_tensor, back_substitute

DEFAULT_TOL = 1e-12
BISECT_WIDTH = 1e-6
OFFDIAG_TOL = 1e-14
DIAG_DELTA = 1e-9
PLANAR_MARGIN = 1e-9


@dataclass(frozen=True)
class ScalarRootProblem:
    """Solve ``v + r h(r_tilde v + b) = target`` for ``v``."""

    r: float
    r_tilde: float
    b: float
    target: float
    activation: Activation = TANH

    def __post_init__(self):
        if not 1.0 + self.activation.deriv_bound * self.r * self.r_tilde > 0:
            raise NonInvertibleError(
                f"1 + |h'|_inf r r~ = {1.0 + self.r * self.r_tilde:.3e} <= 0; f is not monotone"
            )

    def f(self, v):
        pre = as_tensor(self.r_tilde * as_tensor(v) + self.b)
        return as_tensor(v) + self.r * self.activation(pre)

    def fprime(self, v):
        pre = as_tensor(self.r_tilde * as_tensor(v) + self.b)
        return 1.0 + self.r * self.r_tilde * self.activation.deriv(pre)

    def bracket(self) -> tuple[float, float]:
        # |f(v) - v| <= |r| because |h| <= 1
        return self.target - abs(self.r), self.target + abs(self.r)


def solve_monotone(r, r_tilde, b, target, act: Activation = TANH, tol: float = DEFAULT_TOL,
                   max_newton: int = 60) -> torch.Tensor:
    """Elementwise root of ``v + r h(r_tilde v + b) = target`` for increasing ``f``.

    Bisects the bracket ``[target - |r|, target + |r|]`` down to width 1e-6,
    then polishes with Newton steps, falling back to bisection whenever a
    Newton step leaves the current bracket. Convergence is declared when
    ``|f(v) - target| <= tol * max(1, |target|)``.
    """
    r, r_tilde, b, target = torch.broadcast_tensors(
        as_tensor(r), as_tensor(r_tilde), as_tensor(b), as_tensor(target))

    def resid(v):
        return v + r * act(r_tilde * v + b) - target

    scale = torch.clamp(target.abs(), min=1.0)
    lo = target - r.abs()
    hi = target + r.abs()
    while bool(((hi - lo) > BISECT_WIDTH * scale).any()):
        mid = 0.5 * (lo + hi)
        pos = resid(mid) > 0
        hi = torch.where(pos, mid, hi)
        lo = torch.where(pos, lo, mid)
    v = 0.5 * (lo + hi)
    for _ in range(max_newton):
        fv = resid(v)
        if bool((fv.abs() <= tol * scale).all()):
            return v
        pos = fv > 0
        hi = torch.where(pos, v, hi)
        lo = torch.where(pos, lo, v)
        step = v - fv / (1.0 + r * r_tilde * act.deriv(r_tilde * v + b))
        inside = (step > lo) & (step < hi)
        v = torch.where(inside, step, 0.5 * (lo + hi))
    worst = float(resid(v).abs().max())
    if worst <= tol * float(scale.max()):
        return v
    raise ConvergenceError("scalar inversion did not converge", worst)


def invert_scalar(p: ScalarRootProblem, tol: float = DEFAULT_TOL) -> float:
    return float(solve_monotone(p.r, p.r_tilde, p.b, p.target, p.activation, tol))


def _solve_triangular_system(r, diag, bias, v_prime, act, tol):
    """Back-substitute ``v' = v + R h(diag * v + bias)`` for ``v`` when ``R~`` is diagonal."""
    m = r.shape[-1]
    v = [None] * m
    for k in range(m - 1, -1, -1):
        g = v_prime[..., k]
        for j in range(k + 1, m):
            g = g - r[..., k, j] * act(diag[..., j] * v[j] + bias[..., j])
        v[k] = solve_monotone(r[..., k, k], diag[..., k], bias[..., k], g, act, tol)
    return torch.stack(torch.broadcast_tensors(*v), dim=-1)


def inversion_case(p: SylvesterParams) -> int:
    """Classify the inversion path.

    1: ``R`` and ``R~`` both diagonal (independent scalar solves);
    2: ``R~`` diagonal, ``R`` upper triangular (back-substitution);
    3: ``R~`` non-diagonal (solve in ``u = R~ v`` coordinates, then a triangular solve).
    """
    def offdiag(x):
        return float(torch.triu(x, diagonal=1).abs().max()) if x.shape[-1] > 1 else 0.0

    if offdiag(p.r_tilde) >= OFFDIAG_TOL:
        return 3
    return 1 if offdiag(p.r) < OFFDIAG_TOL else 2


@torch.no_grad()
def invert_sylvester(p: SylvesterParams, z_prime, act: Activation = TANH,
                     tol: float = DEFAULT_TOL) -> torch.Tensor:
    """Return ``z`` with ``sylvester_forward(p, z) == z_prime``."""
    z_prime = as_tensor(z_prime)
    margin = p.diagonal_margin(act)
    if not bool((margin > 0).all()):
        raise NonInvertibleError("diagonal condition r_ii r~_ii > -1/|h'|_inf violated")
    v_prime = p.q_transpose(z_prime)
    z_perp = z_prime - p.q_apply(v_prime)
    rt_diag = torch.diagonal(p.r_tilde, dim1=-2, dim2=-1)
    if inversion_case(p) < 3:
        v = _solve_triangular_system(p.r, rt_diag, p.bias, v_prime, act, tol)
    else:
        if bool((rt_diag.abs() < DIAG_DELTA).any()):
            raise NonInvertibleError(f"R~ has a diagonal entry below {DIAG_DELTA:g}; cannot invert")
        # in u = R~ v coordinates the map is u' = u + (R~ R) h(u + b)
        rr = p.r_tilde @ p.r
        u_prime = (p.r_tilde @ v_prime.unsqueeze(-1)).squeeze(-1)
        ones = torch.ones_like(rt_diag)
        u = _solve_triangular_system(rr, ones, p.bias, u_prime, act, tol)
        v = back_substitute(p.r_tilde, u)
    return z_perp + p.q_apply(v)


@torch.no_grad()
def invert_planar(p: PlanarParams, z_prime, act: Activation = TANH,
                  tol: float = DEFAULT_TOL) -> torch.Tensor:
    """Invert ``z' = z + u h(w^T z + b)`` through the scalar ``alpha = w^T z``.

    ``w^T z' = alpha + (w^T u) h(alpha + b)`` is the one-unit version of the
    triangular system above, with ``r = w^T u`` and ``r~ = 1``.
    """
    z_prime = as_tensor(z_prime)
    wtu = (p.u * p.w).sum(-1)
    if not bool((wtu > -1.0 + PLANAR_MARGIN).all()):
        raise NonInvertibleError(f"u^T w = {float(wtu.min()):.12g} is not > -1; planar flow not invertible")
    target = (p.w * z_prime).sum(-1)
    alpha = solve_monotone(wtu, torch.ones_like(wtu), p.b, target, act, tol)
    return z_prime - p.u * act(alpha + p.b).unsqueeze(-1)


@torch.no_grad()
def invert_iaf(p: IAFParams, z_prime, act: Activation = TANH) -> torch.Tensor:
    """Invert a gated IAF step one coordinate at a time.

    Coordinate ``i`` of ``(mu, s)`` depends only on ``z_{<i}``, so after ``D``
    passes every coordinate has been solved from already-final predecessors.
    """
    z_prime = as_tensor(z_prime)
    zp = z_prime.flip(-1) if p.reverse else z_prime
    z = zp.clone()
    for i in range(zp.shape[-1]):
        mu, s = made_outputs(p.made, z, p.context)
        gate = torch.sigmoid(s[..., i])
        z[..., i] = (zp[..., i] - (1.0 - gate) * mu[..., i]) / gate
    return z.flip(-1) if p.reverse else z


def invert_flow(p, z_prime, act: Activation = TANH, tol: float = DEFAULT_TOL) -> torch.Tensor:
    if isinstance(p, PlanarParams):
        return invert_planar(p, z_prime, act, tol)
    if isinstance(p, SylvesterParams):
        return invert_sylvester(p, z_prime, act, tol)
    if isinstance(p, IAFParams):
        return invert_iaf(p, z_prime, act)
    if isinstance(p, GeneralSylvesterParams):
        raise NonInvertibleError("general Sylvester flows have no constructive inverse")
    raise TypeError(f"unknown flow type {type(p).__name__}")


def invert_stack(s: FlowStack, z_k, tol: float = DEFAULT_TOL) -> torch.Tensor:
    """Map ``z_K`` back to ``z_0`` through the flows in reverse order."""
    z = as_tensor(z_k)
    for f in reversed(s.flows):
        z = invert_flow(f, z, s.activation, tol)
    return z
