"""Dense real linear algebra used by the flows and their test oracles.

Tensors are float64 ``torch.Tensor`` objects. Matrix-valued routines accept
arbitrary leading batch dimensions unless documented otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConvergenceError, DimensionError, SpectralNormError

DTYPE = torch.float64

DEFAULT_ORTHO_TOL = 1e-6
DEFAULT_BJORCK_STEPS = 30
MAX_DET_DIM = 64


def as_tensor(x) -> torch.Tensor:
    """Return ``x`` as a float64 tensor without copying when possible."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def dense_det(m) -> float:
    """Determinant by Gaussian elimination with partial pivoting.

    This is the brute-force oracle used throughout the test-suite, so it is
    written independently of LAPACK.
    """
    a = np.array(m.detach().cpu().numpy() if isinstance(m, torch.Tensor) else m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"dense_det needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n > MAX_DET_DIM:
        raise DimensionError(f"dense_det supports n <= {MAX_DET_DIM}, got {n}")
    det = 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if a[p, k] == 0.0:
            return 0.0
        if p != k:
            a[[k, p]] = a[[p, k]]
            det = -det
        det *= a[k, k]
        a[k + 1:, k:] -= np.outer(a[k + 1:, k] / a[k, k], a[k, k:])
    return float(det)


def sylvester_identity_check(a, b) -> tuple[float, float]:
    """Return ``(det(I_D + AB), det(I_M + BA))`` evaluated with :func:`dense_det`."""
    a = np.asarray(a.detach().numpy() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach().numpy() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0] or a.shape[0] != b.shape[1]:
        raise DimensionError(f"A{a.shape} and B{b.shape} do not conform")
    d, m = a.shape
    return dense_det(np.eye(d) + a @ b), dense_det(np.eye(m) + b @ a)


def ortho_residual(q: torch.Tensor) -> torch.Tensor:
    """Frobenius norm of ``Q^T Q - I`` for each matrix in the batch."""
    m = q.shape[-1]
    gram = q.transpose(-1, -2) @ q
    return torch.linalg.matrix_norm(gram - torch.eye(m, dtype=q.dtype), ord="fro")


def spectral_norm(x: torch.Tensor, iters: int = 50, tol: float = 1e-10) -> torch.Tensor:
    """Largest singular value per matrix, estimated by power iteration on ``X^T X``.

    The start vector is drawn from a fixed-seed generator so the estimate is
    deterministic.
    """
    x = as_tensor(x).detach()
    gen = torch.Generator().manual_seed(0)
    v = torch.randn(*x.shape[:-2], x.shape[-1], 1, generator=gen, dtype=DTYPE)
    v = v / torch.linalg.vector_norm(v, dim=-2, keepdim=True)
    xtx = x.transpose(-1, -2) @ x
    est = torch.zeros(x.shape[:-2], dtype=DTYPE)
    for _ in range(iters):
        w = xtx @ v
        nrm = torch.linalg.vector_norm(w, dim=-2, keepdim=True)
        new_est = nrm.squeeze(-1).squeeze(-1).sqrt()
        v = torch.where(nrm > 0, w / nrm.clamp_min(1e-300), v)
        done = bool(torch.all((new_est - est).abs() <= tol * new_est.clamp_min(1.0)))
        est = new_est
        if done:
            break
    return est


@dataclass(frozen=True)
class OrthonormalColumns:
    """A (batch of) ``D x M`` matrices whose columns are orthonormal.

    ``steps`` and ``residuals`` are populated by :func:`bjorck_orthogonalize`;
    ``residuals[k]`` holds the per-matrix Frobenius residual before step ``k``.
    """

    matrix: torch.Tensor
    steps: int = 0
    residuals: torch.Tensor | None = None
    tol: float = field(default=DEFAULT_ORTHO_TOL, repr=False)

    def __post_init__(self):
        if self.matrix.ndim < 2 or self.matrix.shape[-1] > self.matrix.shape[-2]:
            raise DimensionError(f"need D x M with M <= D, got {tuple(self.matrix.shape)}")
        with torch.no_grad():
            res = float(ortho_residual(self.matrix).max()) if self.matrix.numel() else 0.0
        if not res <= self.tol:
            raise ConvergenceError("columns are not orthonormal", res)

    @property
    def ambient_dim(self) -> int:
        return self.matrix.shape[-2]

    @property
    def num_cols(self) -> int:
        return self.matrix.shape[-1]

    @property
    def residual(self) -> torch.Tensor:
        with torch.no_grad():
            return ortho_residual(self.matrix)


def bjorck_orthogonalize(
    q0,
    eps: float = DEFAULT_ORTHO_TOL,
    max_steps: int = DEFAULT_BJORCK_STEPS,
    *,
    fixed_steps: int | None = None,
    check_precondition: bool = True,
) -> OrthonormalColumns:
    """Orthonormalize the columns of ``q0`` with the Bjorck iteration.

    Iterates ``Q <- Q (I + (I - Q^T Q) / 2)`` until every matrix in the batch
    has ``||Q^T Q - I||_F <= eps``. The loop is plain tensor arithmetic, so
    autograd differentiates through exactly the steps that were executed.

    With ``fixed_steps`` set, exactly that many steps run and the tolerance is
    only checked at the end. Raises :class:`SpectralNormError` if
    ``||Q0^T Q0 - I||_2 >= 1`` and :class:`ConvergenceError` when the tolerance
    is not met.
    """
    q = as_tensor(q0)
    if q.ndim < 2 or q.shape[-1] > q.shape[-2]:
        raise DimensionError(f"need D x M with M <= D, got {tuple(q.shape)}")
    m = q.shape[-1]
    eye = torch.eye(m, dtype=DTYPE)
    if check_precondition:
        with torch.no_grad():
            gap = q.transpose(-1, -2) @ q - eye
            norm = float(spectral_norm(gap).max()) if gap.numel() else 0.0
        if norm >= 1.0:
            raise SpectralNormError(norm)

    limit = fixed_steps if fixed_steps is not None else max_steps
    history = []
    steps = 0
    while True:
        with torch.no_grad():
            res = ortho_residual(q)
        history.append(res)
        if fixed_steps is None and bool(torch.all(res <= eps)):
            break
        if steps >= limit:
            break
        q = q @ (eye + 0.5 * (eye - q.transpose(-1, -2) @ q))
        steps += 1

    final = float(history[-1].max()) if history[-1].numel() else 0.0
    if not final <= eps:
        raise ConvergenceError(f"Bjorck iteration did not reach eps={eps:g} in {steps} steps", final)
    return OrthonormalColumns(q, steps, torch.stack(history), tol=eps)


@dataclass(frozen=True)
class HouseholderChain:
    """Ordered reflections ``H_1, ..., H_H`` stored as rows of ``vectors`` (``..., H, D``).

    Applying the chain to ``z`` computes ``H_H ... H_1 z``.
    """

    vectors: torch.Tensor

    def __post_init__(self):
        if self.vectors.ndim < 2:
            raise DimensionError("vectors must have shape (..., H, D)")
        with torch.no_grad():
            norms = torch.linalg.vector_norm(self.vectors, dim=-1)
        if norms.numel() and not bool(torch.all(norms > 0)):
            raise DimensionError("Householder vectors must be nonzero")

    @property
    def ambient_dim(self) -> int:
        return self.vectors.shape[-1]

    @property
    def num_reflections(self) -> int:
        return self.vectors.shape[-2]

    def apply(self, z: torch.Tensor, transpose: bool = False) -> torch.Tensor:
        """Apply the chain (or its transpose) in ``O(H D)`` per vector."""
        if z.shape[-1] != self.ambient_dim:
            raise DimensionError(f"z has dim {z.shape[-1]}, chain has {self.ambient_dim}")
        order = range(self.num_reflections)
        if transpose:
            order = reversed(order)
        for h in order:
            v = self.vectors[..., h, :]
            coef = (v * z).sum(-1, keepdim=True) / (v * v).sum(-1, keepdim=True)
            z = z - 2.0 * coef * v
        return z


def householder_apply(chain: HouseholderChain, z) -> torch.Tensor:
    return chain.apply(as_tensor(z))


def householder_materialize(chain: HouseholderChain) -> OrthonormalColumns:
    """Explicit ``D x D`` product of the chain; for oracles and tests only."""
    d = chain.ambient_dim
    batch = chain.vectors.shape[:-2]
    eye = torch.eye(d, dtype=DTYPE).expand(*batch, d, d)
    # row j of eye is e_j; P e_j is column j of P
    spread = HouseholderChain(chain.vectors.unsqueeze(-3))
    return OrthonormalColumns(spread.apply(eye).transpose(-1, -2), tol=1e-10)


def back_substitute(r: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Solve ``R x = y`` for upper-triangular ``R`` (``..., M, M``) and ``y`` (``..., M``)."""
    m = r.shape[-1]
    if r.shape[-2] != m or y.shape[-1] != m:
        raise DimensionError(f"R{tuple(r.shape)} and y{tuple(y.shape)} do not conform")
    xs = [None] * m
    for i in range(m - 1, -1, -1):
        acc = y[..., i]
        for j in range(i + 1, m):
            acc = acc - r[..., i, j] * xs[j]
        xs[i] = acc / r[..., i, i]
    return torch.stack(xs, dim=-1)


def is_upper_triangular(r: torch.Tensor) -> bool:
    return bool(torch.all(torch.tril(r, diagonal=-1) == 0))
