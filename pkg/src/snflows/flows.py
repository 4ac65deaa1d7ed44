"""Flow transforms and their log-det-Jacobians.

Every ``*_forward`` function maps ``z`` of shape ``(..., D)`` to
``(z_out, log_det)`` with ``log_det`` of shape ``(...)``. Parameter tensors may
carry leading batch dimensions that broadcast against those of ``z``; this is
how amortized (per-datapoint) parameters are evaluated for many samples.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

from .errors import DimensionError, NonInvertibleError, SingularJacobianError
from .linalg import DTYPE, HouseholderChain, OrthonormalColumns, is_upper_triangular

SINGULAR_TOL = 1e-12


class Activation(enum.Enum):
    TANH = "tanh"

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(x)

    def deriv(self, x: torch.Tensor) -> torch.Tensor:
        return 1.0 - torch.tanh(x) ** 2

    @property
    def deriv_bound(self) -> float:
        """``sup |h'|``."""
        return 1.0


TANH = Activation.TANH


class Permutation(enum.Enum):
    """Fixed orthogonal factor of a triangular Sylvester flow."""

    IDENTITY = "identity"
    REVERSE = "reverse"


class Variant(enum.Enum):
    ORTHOGONAL = "O"
    HOUSEHOLDER = "H"
    TRIANGULAR = "T"


def guarded_log_abs(x: torch.Tensor, what: str = "Jacobian factor") -> torch.Tensor:
    with torch.no_grad():
        bad = x.abs() < SINGULAR_TOL
        if bool(bad.any()):
            raise SingularJacobianError(
                f"|{what}| = {float(x.abs().min()):.3e} < {SINGULAR_TOL:g}; density undefined"
            )
    return torch.log(x.abs())


def _matvec(m: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return (m @ v.unsqueeze(-1)).squeeze(-1)


# --------------------------------------------------------------------- planar


@dataclass(frozen=True)
class PlanarParams:
    """``z' = z + u h(w^T z + b)``. ``u`` is used as given; see :func:`project_planar`."""

    u: torch.Tensor
    w: torch.Tensor
    b: torch.Tensor

    def __post_init__(self):
        if self.u.shape[-1] != self.w.shape[-1]:
            raise DimensionError("u and w must have the same length")

    @property
    def dim(self) -> int:
        return self.u.shape[-1]


def project_planar(u: torch.Tensor, w: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """Return ``u_hat`` with ``u_hat^T w = -1 + softplus(u^T w) > -1``.

    A zero ``w`` raises unless ``strict`` is false, in which case ``u`` is
    returned unchanged for those entries (the flow is then a translation).
    """
    wtu = (w * u).sum(-1, keepdim=True)
    w_sq = (w * w).sum(-1, keepdim=True)
    zero = w_sq == 0
    if strict and bool(zero.any()):
        raise DimensionError("project_planar requires w != 0")
    m = -1.0 + F.softplus(wtu)
    return u + torch.where(zero, 0.0, (m - wtu) / torch.where(zero, 1.0, w_sq)) * w


def planar_forward(p: PlanarParams, z: torch.Tensor, act: Activation = TANH):
    pre = (p.w * z).sum(-1) + p.b
    z_out = z + p.u * act(pre).unsqueeze(-1)
    factor = 1.0 + act.deriv(pre) * (p.u * p.w).sum(-1)
    return z_out, guarded_log_abs(factor, "1 + u^T h'(w^T z + b) w")


# ------------------------------------------------------------ general Sylvester


@dataclass(frozen=True)
class GeneralSylvesterParams:
    """``z' = z + A h(B z + b)`` with ``A`` (D x M), ``B`` (M x D)."""

    a: torch.Tensor
    b_mat: torch.Tensor
    bias: torch.Tensor

    def __post_init__(self):
        d, m = self.a.shape[-2:]
        if self.b_mat.shape[-2:] != (m, d) or self.bias.shape[-1] != m:
            raise DimensionError(
                f"A{tuple(self.a.shape)}, B{tuple(self.b_mat.shape)}, b{tuple(self.bias.shape)} do not conform"
            )
        if m > d:
            raise DimensionError(f"need M <= D, got M={m}, D={d}")

    @property
    def dim(self) -> int:
        return self.a.shape[-2]


def general_sylvester_forward(p: GeneralSylvesterParams, z: torch.Tensor, act: Activation = TANH):
    """Forward map with ``log|det(I_M + diag(h'(Bz+b)) B A)|`` from an ``M x M`` determinant.

    Intended as an oracle companion to the structured flows; no inverse exists in general.
    """
    pre = _matvec(p.b_mat, z) + p.bias
    z_out = z + _matvec(p.a, act(pre))
    m = p.a.shape[-1]
    small = torch.eye(m, dtype=DTYPE) + act.deriv(pre).unsqueeze(-1) * (p.b_mat @ p.a)
    sign, logabs = torch.linalg.slogdet(small)
    with torch.no_grad():
        if bool((sign == 0).any()) or bool((logabs < torch.log(torch.tensor(SINGULAR_TOL))).any()):
            raise SingularJacobianError("I_M + diag(h') B A is singular")
    return z_out, logabs


# ---------------------------------------------------------------- QR Sylvester

OrthogonalFactor = Union[OrthonormalColumns, HouseholderChain, Permutation]


@dataclass(frozen=True)
class SylvesterParams:
    """``z' = z + Q R h(R~ Q^T z + b)`` with upper-triangular ``R``, ``R~``.

    ``q`` is a Bjorck-orthogonalized matrix (variant O), a Householder chain
    (variant H) or a fixed permutation (variant T).
    """

    q: OrthogonalFactor
    r: torch.Tensor
    r_tilde: torch.Tensor
    bias: torch.Tensor
    variant: Variant

    def __post_init__(self):
        m = self.r.shape[-1]
        if self.r.shape[-2] != m or self.r_tilde.shape[-2:] != (m, m) or self.bias.shape[-1] != m:
            raise DimensionError("R, R~ must be M x M and b of length M")
        expected = {
            Variant.ORTHOGONAL: OrthonormalColumns,
            Variant.HOUSEHOLDER: HouseholderChain,
            Variant.TRIANGULAR: Permutation,
        }[self.variant]
        if not isinstance(self.q, expected):
            raise TypeError(f"variant {self.variant.value} needs q of type {expected.__name__}")
        if isinstance(self.q, OrthonormalColumns):
            if self.q.num_cols != m:
                raise DimensionError(f"Q has {self.q.num_cols} columns, R is {m} x {m}")
        elif isinstance(self.q, HouseholderChain) and self.q.ambient_dim != m:
            raise DimensionError("Householder Sylvester flows require M = D")
        with torch.no_grad():
            if not (is_upper_triangular(self.r) and is_upper_triangular(self.r_tilde)):
                raise NonInvertibleError("R and R~ must be upper triangular")
            margin = self.diagonal_margin()
            if margin.numel() and not bool((margin > 0).all()):
                raise NonInvertibleError(
                    f"diagonal condition r_ii r~_ii > -1/|h'|_inf violated (margin {float(margin.min()):.3e})"
                )

    @property
    def dim(self) -> int:
        if isinstance(self.q, Permutation):
            return self.r.shape[-1]
        return self.q.ambient_dim

    @property
    def bottleneck(self) -> int:
        return self.r.shape[-1]

    def diagonal_margin(self, act: Activation = TANH) -> torch.Tensor:
        """``min_i (1 + |h'|_inf r_ii r~_ii)`` per batch element; positive when invertible."""
        prod = torch.diagonal(self.r, dim1=-2, dim2=-1) * torch.diagonal(self.r_tilde, dim1=-2, dim2=-1)
        return (1.0 + act.deriv_bound * prod).min(-1).values

    def q_transpose(self, z: torch.Tensor) -> torch.Tensor:
        """Coordinates ``Q^T z`` in the span of ``Q``."""
        q = self.q
        if isinstance(q, Permutation):
            return z.flip(-1) if q is Permutation.REVERSE else z
        if isinstance(q, HouseholderChain):
            return q.apply(z, transpose=True)
        return (z.unsqueeze(-2) @ q.matrix).squeeze(-2)

    def q_apply(self, v: torch.Tensor) -> torch.Tensor:
        """``Q v`` for coordinates ``v``."""
        q = self.q
        if isinstance(q, Permutation):
            return v.flip(-1) if q is Permutation.REVERSE else v
        if isinstance(q, HouseholderChain):
            return q.apply(v)
        return _matvec(q.matrix, v)


def upper_triangular(raw: torch.Tensor) -> torch.Tensor:
    """Upper triangle of ``raw`` with the diagonal squashed through tanh.

    Keeps ``r_ii r~_ii > -1`` for any pair built this way.
    """
    return torch.triu(raw, diagonal=1) + torch.diag_embed(torch.tanh(torch.diagonal(raw, dim1=-2, dim2=-1)))


def sylvester_forward(p: SylvesterParams, z: torch.Tensor, act: Activation = TANH):
    """Forward map; the log-det uses only the diagonals of ``R`` and ``R~``."""
    v = p.q_transpose(z)
    pre = _matvec(p.r_tilde, v) + p.bias
    z_out = z + p.q_apply(_matvec(p.r, act(pre)))
    diag = torch.diagonal(p.r, dim1=-2, dim2=-1) * torch.diagonal(p.r_tilde, dim1=-2, dim2=-1)
    factor = 1.0 + act.deriv(pre) * diag
    return z_out, guarded_log_abs(factor, "1 + h'_i (R~R)_ii").sum(-1)


# ------------------------------------------------------------------------ IAF


def made_masks(dim: int, width: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Masks for a D -> C -> C -> D MADE with natural ordering 1..D.

    Output ``i`` only sees inputs ``j < i``, so output 1 is constant in ``z``.
    """
    in_deg = torch.arange(1, dim + 1)
    if dim > 1:
        hid_deg = torch.arange(width) % (dim - 1) + 1
    else:
        hid_deg = torch.zeros(width, dtype=torch.long)
    m_in = (hid_deg.unsqueeze(-1) >= in_deg.unsqueeze(0)).to(DTYPE)
    m_hid = (hid_deg.unsqueeze(-1) >= hid_deg.unsqueeze(0)).to(DTYPE)
    m_out = (in_deg.unsqueeze(-1) > hid_deg.unsqueeze(0)).to(DTYPE)
    return m_in, m_hid, m_out


@dataclass(frozen=True)
class MadeParams:
    """Weights of one gated IAF step; masks are applied at evaluation time."""

    w_in: torch.Tensor
    b_in: torch.Tensor
    w_hid: torch.Tensor
    b_hid: torch.Tensor
    w_mu: torch.Tensor
    b_mu: torch.Tensor
    w_s: torch.Tensor
    b_s: torch.Tensor

    def __post_init__(self):
        c, d = self.w_in.shape
        if (self.w_hid.shape != (c, c) or self.w_mu.shape != (d, c) or self.w_s.shape != (d, c)
                or self.b_in.shape != (c,) or self.b_hid.shape != (c,)
                or self.b_mu.shape != (d,) or self.b_s.shape != (d,)):
            raise DimensionError("MADE weight shapes do not match D -> C -> C -> D")
        if c < d:
            raise DimensionError(f"MADE width C={c} must be >= D={d}")

    @property
    def dim(self) -> int:
        return self.w_in.shape[1]

    @property
    def width(self) -> int:
        return self.w_in.shape[0]

    def masks(self):
        return made_masks(self.dim, self.width)

    @classmethod
    def init(cls, dim: int, width: int, generator: torch.Generator, head_scale: float = 0.01,
             gate_bias: float = 0.0) -> "MadeParams":
        """Hidden layers scaled by ``1/sqrt(fan_in)``; output heads start at ``head_scale``.

        Small heads keep the step close to ``z' = sigmoid(gate_bias) z``.
        """
        def w(rows, cols, scale):
            return scale * torch.randn(rows, cols, generator=generator, dtype=DTYPE)

        def zeros(n):
            return torch.zeros(n, dtype=DTYPE)

        return cls(w(width, dim, dim ** -0.5), zeros(width), w(width, width, width ** -0.5), zeros(width),
                   w(dim, width, head_scale), zeros(dim), w(dim, width, head_scale),
                   torch.full((dim,), gate_bias, dtype=DTYPE))


def made_outputs(p: MadeParams, z: torch.Tensor, context: torch.Tensor):
    """Return ``(mu, s)`` of the gated IAF step."""
    m_in, m_hid, m_out = p.masks()
    h = F.elu(F.linear(z, p.w_in * m_in, p.b_in))
    h = h + context
    h = F.elu(F.linear(h, p.w_hid * m_hid, p.b_hid))
    return F.linear(h, p.w_mu * m_out, p.b_mu), F.linear(h, p.w_s * m_out, p.b_s)


def iaf_forward(p: MadeParams, z: torch.Tensor, context: torch.Tensor):
    """Gated IAF step ``z' = sigmoid(s) z + (1 - sigmoid(s)) mu``.

    The Jacobian is lower triangular with diagonal ``sigmoid(s)``.
    """
    if context.shape[-1] != p.width:
        raise DimensionError(f"context has size {context.shape[-1]}, MADE width is {p.width}")
    mu, s = made_outputs(p, z, context)
    gate = torch.sigmoid(s)
    with torch.no_grad():
        if bool((gate == 0).any()):
            raise SingularJacobianError("sigmoid(s) underflowed to 0")
    z_out = gate * z + (1.0 - gate) * mu
    return z_out, F.logsigmoid(s).sum(-1)


@dataclass(frozen=True)
class IAFParams:
    """One IAF step in a stack: shared MADE weights plus the datapoint's context.

    With ``reverse`` set the step acts on the reversed variable order.
    """

    made: MadeParams
    context: torch.Tensor
    reverse: bool = False

    @property
    def dim(self) -> int:
        return self.made.dim


def _iaf_step(p: IAFParams, z: torch.Tensor, act: Activation):
    if p.reverse:
        out, ld = iaf_forward(p.made, z.flip(-1), p.context)
        return out.flip(-1), ld
    return iaf_forward(p.made, z, p.context)


# ---------------------------------------------------------------------- stack

FlowParams = Union[PlanarParams, GeneralSylvesterParams, SylvesterParams, IAFParams]

_FORWARD = {
    PlanarParams: planar_forward,
    GeneralSylvesterParams: general_sylvester_forward,
    SylvesterParams: sylvester_forward,
    IAFParams: _iaf_step,
}


def flow_forward(p: FlowParams, z: torch.Tensor, act: Activation = TANH):
    return _FORWARD[type(p)](p, z, act)


@dataclass(frozen=True)
class FlowStack:
    """``f_K o ... o f_1`` with a shared activation."""

    flows: tuple = ()
    activation: Activation = TANH

    def __post_init__(self):
        object.__setattr__(self, "flows", tuple(self.flows))
        dims = {f.dim for f in self.flows}
        if len(dims) > 1:
            raise DimensionError(f"flows disagree on D: {sorted(dims)}")
        tags = [f.q for f in self.flows
                if isinstance(f, SylvesterParams) and f.variant is Variant.TRIANGULAR]
        for k, tag in enumerate(tags):
            want = Permutation.IDENTITY if k % 2 == 0 else Permutation.REVERSE
            if tag is not want:
                raise ValueError(f"T-SNF flow {k} must use {want.value}, got {tag.value}")

    def __len__(self):
        return len(self.flows)

    @property
    def dim(self) -> int | None:
        return self.flows[0].dim if self.flows else None


def stack_forward(s: FlowStack, z0: torch.Tensor, keep_trajectory: bool = False):
    """Apply the flows in order; returns ``(z_K, sum_k log|det J_k|, trajectory or None)``."""
    z = z0
    total = torch.zeros(z0.shape[:-1], dtype=DTYPE)
    traj = [z0] if keep_trajectory else None
    for f in s.flows:
        z, ld = flow_forward(f, z, s.activation)
        total = total + ld
        if keep_trajectory:
            traj.append(z)
    return z, total, traj
