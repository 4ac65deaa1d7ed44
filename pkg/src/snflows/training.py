"""Trainers: fitting a flow posterior to a target density, and a toy VAE on 8x8 bars."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .amortize import AmortizationConfig, FlowFamily, Hypernetwork
from .errors import DivergenceError, FlowError
from .linalg import DTYPE
from .serialize import load_module_tensors, module_to_json
from .vi import (
    BernoulliDecoder,
    GatedEncoder,
    TargetDensity,
    anneal_beta,
    estimate_nll,
    free_energy,
    free_energy_terms,
)


@dataclass(frozen=True)
class TrainingConfig:
    seed: int
    epochs: int = 200
    learning_rate: float = 5e-4
    anneal_epochs: int = 100
    batch_size: int = 64
    steps_per_epoch: int = 50
    eval_samples: int = 20000
    importance_samples: int = 5000

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.anneal_epochs < 1:
            raise ValueError("anneal_epochs must be >= 1")
        if min(self.epochs, self.batch_size, self.steps_per_epoch, self.eval_samples,
               self.importance_samples) < 1:
            raise ValueError("epochs, batch sizes and sample counts must be >= 1")


def make_adam(params, cfg: TrainingConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)


def child_generator(seed: int, stream: int) -> torch.Generator:
    """Independent, reproducible generator for one consumer of randomness."""
    return torch.Generator().manual_seed((seed * 1_000_003 + stream) % 2 ** 64)


@dataclass
class FitResult:
    trace: list[dict]
    final_F: float
    final_se: float
    hypernet: Hypernetwork


TRACE_FIELDS = ("epoch", "beta", "train_F", "val_F", "wallclock")


def fit_target(cfg: TrainingConfig, target: TargetDensity, flows: AmortizationConfig) -> FitResult:
    """Minimize the reverse-KL free energy ``E_q[log q_K(z) - log target(z)]``.

    The variational parameters are a hypernetwork evaluated at the constant
    feature vector ``[1]``, so each head acts as a free parameter block.
    """
    if flows.feature_dim != 1:
        raise ValueError("fit_target uses a constant feature vector: set feature_dim = 1")
    if flows.latent_dim != target.dim:
        raise ValueError(f"flow dimension {flows.latent_dim} != target dimension {target.dim}")
    hyper = Hypernetwork(flows, child_generator(cfg.seed, 1))
    opt = make_adam(hyper.parameters(), cfg)
    noise = child_generator(cfg.seed, 2)
    eval_eps = torch.randn(cfg.eval_samples, target.dim, generator=child_generator(cfg.seed, 3), dtype=DTYPE)
    feat = torch.ones(1, dtype=DTYPE)
    trace: list[dict] = []
    start = time.perf_counter()

    def evaluate():
        with torch.no_grad():
            base, stack = hyper.amortize(feat)
            terms = free_energy_terms(base, stack, target, eval_eps)
        return float(terms.mean()), float(terms.std() / math.sqrt(terms.numel()))

    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(cfg.steps_per_epoch):
            eps = torch.randn(cfg.batch_size, target.dim, generator=noise, dtype=DTYPE)
            opt.zero_grad()
            try:
                base, stack = hyper.amortize(feat)
                loss = free_energy(base, stack, target, eps)
            except FlowError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", trace) from exc
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite free energy at epoch {epoch}", trace)
            loss.backward()
            opt.step()
            total += loss.item()
        val, _ = evaluate()
        trace.append({"epoch": epoch + 1, "beta": 1.0, "train_F": total / cfg.steps_per_epoch,
                      "val_F": val, "wallclock": time.perf_counter() - start})
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation free energy at epoch {epoch}", trace)
    final, se = evaluate()
    return FitResult(trace, final, se, hyper)


# ----------------------------------------------------------------- toy VAE


def bars_dataset(n: int, generator: torch.Generator, size: int = 8, on: float = 0.95,
                 off: float = 0.03, bar_prob: float = 0.15) -> torch.Tensor:
    """Pixel-probability images made of random horizontal and vertical bars.

    Each of the ``2 * size`` bars is present independently; binary images are
    drawn from these probabilities by :func:`binarize`.
    """
    rows = torch.rand(n, size, generator=generator, dtype=DTYPE) < bar_prob
    cols = torch.rand(n, size, generator=generator, dtype=DTYPE) < bar_prob
    empty = ~(rows.any(1) | cols.any(1))
    pick = torch.randint(0, size, (n,), generator=generator)
    rows[empty, pick[empty]] = True
    mask = rows.unsqueeze(2) | cols.unsqueeze(1)
    probs = torch.where(mask, torch.tensor(on, dtype=DTYPE), torch.tensor(off, dtype=DTYPE))
    return probs.reshape(n, size * size)


def binarize(probs: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    return (torch.rand(probs.shape, generator=generator, dtype=DTYPE) < probs).to(DTYPE)


@dataclass(frozen=True)
class VAEConfig:
    latent_dim: int = 4
    feature_dim: int = 32
    hidden: int = 64
    train_size: int = 1000
    val_size: int = 200
    val_samples: int = 20


class ToyVAE(nn.Module):
    """Gated dense encoder, amortizing hypernetwork and Bernoulli decoder."""

    def __init__(self, vae: VAEConfig, flows: AmortizationConfig, seed: int, data_dim: int = 64):
        super().__init__()
        if flows.latent_dim != vae.latent_dim or flows.feature_dim != vae.feature_dim:
            raise ValueError("flow config must match the VAE latent and feature sizes")
        self.vae_config = vae
        self.encoder = GatedEncoder(data_dim, vae.hidden, vae.feature_dim, child_generator(seed, 10))
        self.hypernet = Hypernetwork(flows, child_generator(seed, 11))
        self.decoder = BernoulliDecoder(vae.latent_dim, data_dim, vae.hidden, child_generator(seed, 12))

    def posterior(self, x):
        return self.hypernet.amortize(self.encoder(x))

    def forward(self, x, eps, beta: float = 1.0):
        """Mean over data of the per-datum free energy at noise ``eps`` (``S, N, D``)."""
        base, stack = self.posterior(x)
        return free_energy(base, stack, self.decoder, eps, beta, x).mean()

    def neg_elbo(self, x, eps) -> torch.Tensor:
        """Per-datum ``-ELBO`` estimate (beta = 1)."""
        base, stack = self.posterior(x)
        return free_energy_terms(base, stack, self.decoder, eps, 1.0, x).mean(0)

    def nll(self, x, n_samples: int, generator: torch.Generator):
        with torch.no_grad():
            base, stack = self.posterior(x)
            return estimate_nll(x, base, stack, self.decoder, n_samples, generator)


@dataclass
class VAEResult:
    trace: list[dict]
    final_neg_elbo: float
    neg_elbo_se: float
    nll: float
    nll_se: float
    model: ToyVAE
    extras: dict = field(default_factory=dict)


def validation_split(vae: VAEConfig, seed: int):
    """Training probabilities and a fixed binarized validation set."""
    gen = child_generator(seed, 20)
    train = bars_dataset(vae.train_size, gen)
    val = binarize(bars_dataset(vae.val_size, gen), gen)
    return train, val


def evaluate_vae(model: ToyVAE, val: torch.Tensor, n_samples: int, seed: int):
    """Validation ``-ELBO`` at fixed noise: mean and its Monte-Carlo standard error."""
    eps = torch.randn(n_samples, val.shape[0], model.vae_config.latent_dim,
                      generator=child_generator(seed, 22), dtype=DTYPE)
    with torch.no_grad():
        base, stack = model.posterior(val)
        terms = free_energy_terms(base, stack, model.decoder, eps, 1.0, val)
    n = terms.shape[1]
    se = math.sqrt(float((terms.var(0) / n_samples).sum())) / n if n_samples > 1 else 0.0
    return float(terms.mean()), se


def train_toy_vae(cfg: TrainingConfig, vae: VAEConfig, flows: AmortizationConfig,
                  data=None, nll_samples: int | None = None) -> VAEResult:
    """Jointly train encoder, hypernetwork, flows and decoder with KL annealing.

    The training images are re-binarized every epoch. Returns the trace, the
    final validation ``-ELBO`` and an importance-sampled NLL on the validation set.
    """
    train_probs, val = data if data is not None else validation_split(vae, cfg.seed)
    if train_probs.shape[0] == 0:
        raise ValueError("empty training set")
    model = ToyVAE(vae, flows, cfg.seed, data_dim=train_probs.shape[1])
    opt = make_adam(model.parameters(), cfg)
    gen = child_generator(cfg.seed, 21)
    trace: list[dict] = []
    start = time.perf_counter()
    n = train_probs.shape[0]
    for epoch in range(cfg.epochs):
        beta = anneal_beta(epoch, cfg.anneal_epochs)
        x_all = binarize(train_probs, gen)
        perm = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            x = x_all[perm[i:i + cfg.batch_size]]
            eps = torch.randn(1, x.shape[0], vae.latent_dim, generator=gen, dtype=DTYPE)
            opt.zero_grad()
            try:
                loss = model(x, eps, beta)
            except FlowError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", trace) from exc
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite free energy at epoch {epoch}", trace)
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        val_f, _ = evaluate_vae(model, val, vae.val_samples, cfg.seed)
        trace.append({"epoch": epoch + 1, "beta": beta, "train_F": total / batches,
                      "val_F": val_f, "wallclock": time.perf_counter() - start})
    final, se = evaluate_vae(model, val, vae.val_samples, cfg.seed)
    s = nll_samples if nll_samples is not None else cfg.importance_samples
    nll, nll_se = model.nll(val, s, child_generator(cfg.seed, 23))
    return VAEResult(trace, final, se, float(nll.mean()),
                     float(torch.sqrt((nll_se ** 2).sum()) / nll.numel()), model)


def flow_config_for(family: str, vae: VAEConfig, num_flows: int, **kw) -> AmortizationConfig:
    return AmortizationConfig(feature_dim=vae.feature_dim, latent_dim=vae.latent_dim,
                              num_flows=num_flows, variant=FlowFamily(family), **kw)


CHECKPOINT_SCHEMA = "snf-vae-checkpoint/1"


def vae_checkpoint(model: ToyVAE, seed: int) -> dict:
    """JSON checkpoint carrying every tensor plus what is needed to rebuild the model."""
    config = {"vae": asdict(model.vae_config), "flows": model.hypernet.config.to_dict(),
              "data_dim": model.decoder.data_dim, "seed": seed}
    return module_to_json(model, CHECKPOINT_SCHEMA, config)


def load_vae_checkpoint(doc: dict) -> ToyVAE:
    cfg = doc["config"]
    model = ToyVAE(VAEConfig(**cfg["vae"]), AmortizationConfig(**cfg["flows"]), cfg["seed"],
                   data_dim=cfg["data_dim"])
    return load_module_tensors(model, doc, CHECKPOINT_SCHEMA)
