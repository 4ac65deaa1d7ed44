"""Seeded random flow instances for property suites and tests."""

from __future__ import annotations

import math

import torch

from .flows import (
    GeneralSylvesterParams,
    IAFParams,
    MadeParams,
    Permutation,
    PlanarParams,
    SylvesterParams,
    Variant,
    project_planar,
    upper_triangular,
)
from .linalg import DTYPE, HouseholderChain, bjorck_orthogonalize

VARIANTS = ("planar", "general", "osnf", "hsnf", "tsnf", "iaf")


def _randn(gen, *shape, scale=1.0):
    return scale * torch.randn(*shape, generator=gen, dtype=DTYPE)


def random_orthonormal(gen: torch.Generator, d: int, m: int, eps: float = 1e-14):
    """Orthonormal ``d x m`` frame from a random Bjorck seed, converged to ``eps``."""
    raw = _randn(gen, d, m)
    raw = raw * (0.4 / float(torch.linalg.matrix_norm(raw)))
    return bjorck_orthogonalize(torch.eye(d, m, dtype=DTYPE) + raw, eps=eps)


def random_triangular_pair(gen, m, offdiag_scale=0.5):
    r = upper_triangular(_randn(gen, m, m, scale=offdiag_scale) + torch.diag(_randn(gen, m)))
    rt = upper_triangular(_randn(gen, m, m, scale=offdiag_scale) + torch.diag(_randn(gen, m)))
    return r, rt


def planar(gen, d):
    u, w = _randn(gen, d), _randn(gen, d)
    return PlanarParams(project_planar(u, w), w, _randn(gen, ()))


def general(gen, d, m=None):
    m = m or max(1, d // 2)
    return GeneralSylvesterParams(_randn(gen, d, m, scale=0.5), _randn(gen, m, d, scale=0.5), _randn(gen, m))


def osnf(gen, d, m=None, eps=1e-14):
    m = m or max(1, d // 2)
    q = random_orthonormal(gen, d, m, eps)
    r, rt = random_triangular_pair(gen, m)
    return SylvesterParams(q, r, rt, _randn(gen, m), Variant.ORTHOGONAL)


def hsnf(gen, d, h=None):
    h = h or max(1, d - 1)
    chain = HouseholderChain(_randn(gen, h, d))
    r, rt = random_triangular_pair(gen, d)
    return SylvesterParams(chain, r, rt, _randn(gen, d), Variant.HOUSEHOLDER)


def tsnf(gen, d, reverse=False):
    r, rt = random_triangular_pair(gen, d)
    tag = Permutation.REVERSE if reverse else Permutation.IDENTITY
    return SylvesterParams(tag, r, rt, _randn(gen, d), Variant.TRIANGULAR)


def made(gen, d, c):
    s_in, s_hid = 1.0 / math.sqrt(d), 1.0 / math.sqrt(c)
    return MadeParams(_randn(gen, c, d, scale=s_in), _randn(gen, c, scale=0.1),
                      _randn(gen, c, c, scale=s_hid), _randn(gen, c, scale=0.1),
                      _randn(gen, d, c, scale=s_hid), _randn(gen, d, scale=0.1),
                      _randn(gen, d, c, scale=s_hid), _randn(gen, d, scale=0.1) + 1.0)


def iaf(gen, d, c=None, reverse=False):
    c = c or 4 * d
    return IAFParams(made(gen, d, c), _randn(gen, c), reverse=reverse)


def random_flow(variant: str, gen: torch.Generator, d: int):
    """One flow of the named variant at dimension ``d``."""
    makers = {"planar": planar, "general": general, "osnf": osnf, "hsnf": hsnf, "tsnf": tsnf, "iaf": iaf}
    return makers[variant](gen, d)
