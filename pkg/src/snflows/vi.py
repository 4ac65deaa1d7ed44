"""Variational-inference primitives: base Gaussian, flow log-density, free energy, NLL."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import torch
import torch.nn.functional as F

from .errors import NumericalError
from .flows import FlowStack, stack_forward
from .inversion import invert_stack
from .linalg import DTYPE

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagGaussian:
    """``N(mu, diag(exp(log_sigma)^2))``; parameters may carry batch dimensions."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        return sample_base(self, eps)

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        std = (z - self.mu) * torch.exp(-self.log_sigma)
        return -0.5 * (std ** 2 + LOG_2PI).sum(-1) - self.log_sigma.sum(-1)

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(torch.zeros(dim, dtype=DTYPE), torch.zeros(dim, dtype=DTYPE))


def standard_normal_log_prob(z: torch.Tensor) -> torch.Tensor:
    return -0.5 * (z ** 2 + LOG_2PI).sum(-1)


def sample_base(g: DiagGaussian, eps: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``z0 = mu + sigma * eps``."""
    if eps.shape[-1] != g.dim:
        raise ValueError(f"eps has dim {eps.shape[-1]}, base has {g.dim}")
    return g.mu + torch.exp(g.log_sigma) * eps


def log_q_K(base: DiagGaussian, stack: FlowStack, eps: torch.Tensor):
    """Push ``eps`` through base and flows; return ``(z_K, log q_K(z_K))``."""
    z0 = sample_base(base, eps)
    zk, sum_ld, _ = stack_forward(stack, z0)
    return zk, base.log_prob(z0) - sum_ld


def pushforward_log_density(base: DiagGaussian, stack: FlowStack, z_k: torch.Tensor) -> torch.Tensor:
    """Evaluate ``log q_K`` at given points by inverting the stack."""
    z0 = invert_stack(stack, z_k)
    _, sum_ld, _ = stack_forward(stack, z0)
    return base.log_prob(z0) - sum_ld


@dataclass(frozen=True)
class TargetDensity:
    """Unnormalized log-density over ``R^D``, with the log normalizer if known."""

    log_density: Callable[[torch.Tensor], torch.Tensor]
    dim: int
    log_normalizer: Optional[float] = None

    def __call__(self, z):
        return self.log_density(z)


def correlated_gaussian(rho: float = 0.9, dim: int = 2) -> TargetDensity:
    """Zero-mean Gaussian with unit variances and all correlations ``rho``."""
    cov = torch.full((dim, dim), rho, dtype=DTYPE)
    cov.fill_diagonal_(1.0)
    prec = torch.linalg.inv(cov)
    logdet = torch.linalg.slogdet(cov).logabsdet

    def log_density(z):
        quad = ((z @ prec) * z).sum(-1)
        return -0.5 * (quad + dim * LOG_2PI + logdet)

    return TargetDensity(log_density, dim, log_normalizer=0.0)


def standard_gaussian_target(dim: int) -> TargetDensity:
    return TargetDensity(standard_normal_log_prob, dim, log_normalizer=0.0)


class LatentModel(Protocol):
    """Generative model ``p(x, z) = p(z) p(x | z)``."""

    def log_prior(self, z: torch.Tensor) -> torch.Tensor: ...

    def log_likelihood(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor: ...


def _finite(value: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(value).all()):
        raise NumericalError(f"non-finite {what}")
    return value


def free_energy_terms(base: DiagGaussian, stack: FlowStack, target, eps: torch.Tensor,
                      beta: float = 1.0, x: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-sample free-energy integrand; its mean over ``eps`` is :func:`free_energy`.

    With a :class:`TargetDensity` the integrand is ``log q_K(z) - log target(z)``.
    With a :class:`LatentModel` and datum ``x`` it is
    ``beta * (log q_K(z|x) - log p(z)) - log p(x|z)``.
    """
    zk, log_q = log_q_K(base, stack, eps)
    if isinstance(target, TargetDensity):
        return log_q - _finite(target(zk), "target log-density")
    if x is None:
        raise ValueError("a latent model needs the datum x")
    kl_part = log_q - target.log_prior(zk)
    recon = _finite(target.log_likelihood(x, zk), "log-likelihood")
    return beta * kl_part - recon


def free_energy(base: DiagGaussian, stack: FlowStack, target, eps: torch.Tensor,
                beta: float = 1.0, x: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Monte-Carlo free energy; ``eps`` has shape ``(n_samples, ..., D)``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return free_energy_terms(base, stack, target, eps, beta, x).mean(0)


def anneal_beta(epoch: int, anneal_epochs: int = 100) -> float:
    """KL prefactor ramped linearly from 0 to 1 over ``anneal_epochs``."""
    if anneal_epochs < 1:
        raise ValueError("anneal_epochs must be >= 1")
    return min(1.0, max(epoch, 0) / anneal_epochs)


def log_importance_weights(x, base: DiagGaussian, stack: FlowStack, model: LatentModel,
                           eps: torch.Tensor) -> torch.Tensor:
    """``log p(x, z_s) - log q_K(z_s | x)`` for each draw in ``eps``."""
    zk, log_q = log_q_K(base, stack, eps)
    return model.log_prior(zk) + model.log_likelihood(x, zk) - log_q


def estimate_nll(x, base: DiagGaussian, stack: FlowStack, model: LatentModel, n_samples: int,
                 generator: torch.Generator, chunk: int = 1000):
    """Importance-sampled ``-log p(x)`` with a delta-method standard error.

    Returns ``(estimate, std_error)``, both shaped like the batch of ``x``.
    """
    if n_samples < 1:
        raise ValueError("need at least one importance sample")
    shape = torch.broadcast_shapes(base.mu.shape, base.log_sigma.shape)
    chunks = []
    with torch.no_grad():
        remaining = n_samples
        while remaining > 0:
            n = min(chunk, remaining)
            eps = torch.randn(n, *shape, generator=generator, dtype=DTYPE)
            chunks.append(log_importance_weights(x, base, stack, model, eps))
            remaining -= n
        logw = torch.cat(chunks, 0)
    if bool(torch.isneginf(logw).all(0).any()):
        raise NumericalError("all importance weights are zero")
    log_mean = torch.logsumexp(logw, 0) - math.log(n_samples)
    # se(log mean w) ~ std(w) / (sqrt(S) mean(w)), computed on normalized weights
    rel = torch.exp(logw - log_mean)
    se = rel.std(0, unbiased=True) / math.sqrt(n_samples) if n_samples > 1 else torch.zeros_like(log_mean)
    return -log_mean, se


class BernoulliDecoder(torch.nn.Module):
    """Dense ``R^D -> R^P`` Bernoulli-logit decoder with a standard normal prior."""

    def __init__(self, latent_dim: int, data_dim: int, hidden: int, generator: torch.Generator):
        super().__init__()
        self.latent_dim = latent_dim
        self.data_dim = data_dim
        self.hidden = hidden
        self.l1 = _dense(latent_dim, hidden, generator)
        self.l2 = _dense(hidden, hidden, generator)
        self.out = _dense(hidden, data_dim, generator)

    def logits(self, z):
        h = torch.tanh(self.l1(z))
        h = torch.tanh(self.l2(h))
        return self.out(h)

    def log_prior(self, z):
        return standard_normal_log_prob(z)

    def log_likelihood(self, x, z):
        logits = self.logits(z)
        return -F.binary_cross_entropy_with_logits(
            logits, x.expand_as(logits), reduction="none").sum(-1)


class GatedEncoder(torch.nn.Module):
    """Two dense layers with gated activations ``(W h + b) * sigmoid(V h + c)``."""

    def __init__(self, data_dim: int, hidden: int, feature_dim: int, generator: torch.Generator):
        super().__init__()
        self.data_dim = data_dim
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.h1, self.g1 = _dense(data_dim, hidden, generator), _dense(data_dim, hidden, generator)
        self.h2, self.g2 = _dense(hidden, feature_dim, generator), _dense(hidden, feature_dim, generator)

    def forward(self, x):
        h = self.h1(x) * torch.sigmoid(self.g1(x))
        return self.h2(h) * torch.sigmoid(self.g2(h))


def _dense(n_in: int, n_out: int, generator: torch.Generator) -> torch.nn.Linear:
    layer = torch.nn.Linear(n_in, n_out, dtype=DTYPE)
    with torch.no_grad():
        bound = math.sqrt(6.0 / (n_in + n_out))
        layer.weight.copy_((torch.rand(n_out, n_in, generator=generator, dtype=DTYPE) * 2 - 1) * bound)
        layer.bias.zero_()
    return layer
