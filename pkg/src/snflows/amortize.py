"""Hypernetwork that maps encoder features to base and flow parameters.

Each flow-parameter block comes from a bias-free linear head on the feature
vector, so the head for a block of size ``P`` has ``P * E`` weights. For IAF
only the context vector depends on the features; the MADE weights are
ordinary (input-independent) parameters.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import DimensionError
from .flows import (
    IAFParams,
    FlowStack,
    MadeParams,
    Permutation,
    PlanarParams,
    SylvesterParams,
    Variant,
    project_planar,
    upper_triangular,
)
from .linalg import (
    DEFAULT_ORTHO_TOL,
    DTYPE,
    HouseholderChain,
    OrthonormalColumns,
    bjorck_orthogonalize,
)
from .vi import DiagGaussian

INIT_STD = 0.01
# ||R||_2 <= 0.41 gives ||(E+R)^T (E+R) - I||_2 <= 2(0.41) + 0.41^2 < 0.99
Q_SEED_RADIUS = 0.41
IAF_GATE_BIAS = 2.0


class FlowFamily(str, enum.Enum):
    PLANAR = "planar"
    IAF = "iaf"
    OSNF = "osnf"
    HSNF = "hsnf"
    TSNF = "tsnf"


@dataclass(frozen=True)
class AmortizationConfig:
    feature_dim: int
    latent_dim: int
    num_flows: int
    variant: FlowFamily = FlowFamily.TSNF
    bottleneck: int | None = None
    reflections: int = 1
    made_width: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", FlowFamily(self.variant))
        if self.bottleneck is None:
            object.__setattr__(self, "bottleneck", self.latent_dim)
        if self.made_width is None:
            object.__setattr__(self, "made_width", self.latent_dim)
        if min(self.feature_dim, self.latent_dim) < 1 or self.num_flows < 0:
            raise DimensionError("need E >= 1, D >= 1 and K >= 0")
        if not 1 <= self.bottleneck <= self.latent_dim:
            raise DimensionError(f"need 1 <= M <= D, got M={self.bottleneck}, D={self.latent_dim}")
        if self.variant in (FlowFamily.HSNF, FlowFamily.TSNF) and self.bottleneck != self.latent_dim:
            raise DimensionError(f"{self.variant.value} flows are full rank: M must equal D={self.latent_dim}")
        if self.reflections < 1:
            raise DimensionError("need H >= 1")
        if self.made_width < self.latent_dim:
            raise DimensionError(f"need C >= D, got C={self.made_width}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


def count_parameters(c: AmortizationConfig) -> int:
    """Closed-form number of flow-related weights for the family."""
    e, d, k = c.feature_dim, c.latent_dim, c.num_flows
    if k == 0:
        return 0
    if c.variant is FlowFamily.PLANAR:
        return 2 * e * d * k + e * k
    if c.variant is FlowFamily.IAF:
        cw = c.made_width
        return e * cw + k * (cw * cw + 3 * cw * d)
    if c.variant is FlowFamily.OSNF:
        m = c.bottleneck
        return k * e * (m * d + 2 * m * m + m)
    if c.variant is FlowFamily.HSNF:
        return k * e * (c.reflections * d + 2 * d * d + d)
    return k * e * (2 * d * d + d)


class Hypernetwork(nn.Module):
    """Linear heads producing the base Gaussian and the flow stack from features.

    Weights start at ``N(0, 0.01^2)`` so the initial flows are close to the
    identity. Parameter names beginning with ``flow.`` are flow-related;
    ``base.`` heads and MADE biases are tallied separately.
    """

    def __init__(self, config: AmortizationConfig, generator: torch.Generator,
                 ortho_tol: float = DEFAULT_ORTHO_TOL, init_std: float = INIT_STD):
        super().__init__()
        self.config = config
        self.ortho_tol = ortho_tol
        # pin the Bjorck step count (e.g. for finite-difference checks); None = run to tolerance
        self.bjorck_fixed_steps: int | None = None
        e, d, k = config.feature_dim, config.latent_dim, config.num_flows

        def head(*shape):
            return nn.Parameter(init_std * torch.randn(*shape, e, generator=generator, dtype=DTYPE))

        self.base = nn.ParameterDict({"mu": head(d), "log_sigma": head(d)})
        blocks = {}
        fam = config.variant
        if k > 0:
            if fam is FlowFamily.PLANAR:
                blocks = {"u": head(k, d), "w": head(k, d), "b": head(k, 1)}
            elif fam is FlowFamily.IAF:
                blocks = {"context": head(config.made_width)}
            else:
                m = config.bottleneck
                if fam is FlowFamily.OSNF:
                    blocks["q"] = head(k, d * m)
                elif fam is FlowFamily.HSNF:
                    blocks["v"] = head(k, config.reflections * d)
                blocks.update({"r": head(k, m * m), "r_tilde": head(k, m * m), "b": head(k, m)})
        self.flow = nn.ParameterDict(blocks)
        self.made = nn.ModuleList()
        if fam is FlowFamily.IAF:
            for _ in range(k):
                mp = MadeParams.init(d, config.made_width, generator, init_std, IAF_GATE_BIAS)
                self.made.append(_MadeModule(mp))

    @staticmethod
    def _linear(features, weight):
        if weight.ndim == 2:
            return torch.einsum("pe,...e->...p", weight, features)
        return torch.einsum("kpe,...e->...kp", weight, features)

    def amortize(self, features: torch.Tensor):
        """Return ``(DiagGaussian, FlowStack)`` for features of shape ``(..., E)``."""
        cfg = self.config
        if features.shape[-1] != cfg.feature_dim:
            raise DimensionError(f"features have length {features.shape[-1]}, expected E={cfg.feature_dim}")
        base = DiagGaussian(self._linear(features, self.base["mu"]),
                            self._linear(features, self.base["log_sigma"]))
        k, d = cfg.num_flows, cfg.latent_dim
        if k == 0:
            return base, FlowStack(())
        fam = cfg.variant
        out = {name: self._linear(features, p) for name, p in self.flow.items()}
        flows = []
        if fam is FlowFamily.PLANAR:
            for i in range(k):
                u, w = out["u"][..., i, :], out["w"][..., i, :]
                flows.append(PlanarParams(project_planar(u, w, strict=False), w, out["b"][..., i, 0]))
        elif fam is FlowFamily.IAF:
            for i, mod in enumerate(self.made):
                flows.append(IAFParams(mod.params(), out["context"], reverse=i % 2 == 1))
        else:
            m = cfg.bottleneck
            batch = features.shape[:-1]
            r = upper_triangular(out["r"].reshape(*batch, k, m, m))
            rt = upper_triangular(out["r_tilde"].reshape(*batch, k, m, m))
            b = out["b"]
            if fam is FlowFamily.OSNF:
                q = self._orthogonalize(out["q"].reshape(*batch, k, d, m)).matrix
            elif fam is FlowFamily.HSNF:
                raw = out["v"].reshape(*batch, k, cfg.reflections, d)
                offset = torch.eye(d, dtype=DTYPE)[torch.arange(cfg.reflections) % d]
                vecs = raw + offset
            for i in range(k):
                if fam is FlowFamily.OSNF:
                    qf, var = OrthonormalColumns(q[..., i, :, :], tol=self.ortho_tol), Variant.ORTHOGONAL
                elif fam is FlowFamily.HSNF:
                    qf, var = HouseholderChain(vecs[..., i, :, :]), Variant.HOUSEHOLDER
                else:
                    qf = Permutation.IDENTITY if i % 2 == 0 else Permutation.REVERSE
                    var = Variant.TRIANGULAR
                flows.append(SylvesterParams(qf, r[..., i, :, :], rt[..., i, :, :], b[..., i, :], var))
        return base, FlowStack(tuple(flows))

    forward = amortize

    def _orthogonalize(self, raw: torch.Tensor) -> OrthonormalColumns:
        # one batched Bjorck pass over every flow and datapoint
        return bjorck_orthogonalize(_q_seed(raw), eps=self.ortho_tol,
                                    fixed_steps=self.bjorck_fixed_steps)

    def orthogonal_factors(self, features: torch.Tensor) -> OrthonormalColumns:
        """Bjorck result (with step count and residual history) for every O-SNF flow."""
        cfg = self.config
        if cfg.variant is not FlowFamily.OSNF or cfg.num_flows == 0:
            raise ValueError("only O-SNF hypernetworks have Bjorck-orthogonalized factors")
        raw = self._linear(features, self.flow["q"])
        return self._orthogonalize(raw.reshape(*features.shape[:-1], cfg.num_flows,
                                               cfg.latent_dim, cfg.bottleneck))

    def flow_parameter_tensors(self) -> dict[str, torch.Tensor]:
        """Flow-related weight tensors (the ones the closed-form count covers)."""
        tensors = {f"flow.{n}": p for n, p in self.flow.items()}
        for i, mod in enumerate(self.made):
            for n in _MadeModule.WEIGHTS:
                tensors[f"made.{i}.{n}"] = getattr(mod, n)
        return tensors

    def enumerate_flow_parameters(self) -> int:
        return sum(t.numel() for t in self.flow_parameter_tensors().values())

    def count_made_biases(self) -> int:
        return sum(getattr(mod, n).numel() for mod in self.made for n in _MadeModule.BIASES)

    def count_base_parameters(self) -> int:
        return sum(p.numel() for p in self.base.values())


def _q_seed(raw: torch.Tensor) -> torch.Tensor:
    """Seed ``E + s R`` for Bjorck, with ``E`` the first ``M`` identity columns.

    ``s`` caps ``||s R||_F`` at 0.41, which bounds ``||Q0^T Q0 - I||_2`` by 0.99.
    """
    d, m = raw.shape[-2:]
    eye = torch.eye(d, m, dtype=DTYPE)
    nrm = torch.linalg.matrix_norm(raw, ord="fro").unsqueeze(-1).unsqueeze(-1)
    scale = torch.clamp(Q_SEED_RADIUS / nrm.clamp_min(1e-300), max=1.0)
    return eye + scale * raw


class _MadeModule(nn.Module):
    WEIGHTS = ("w_in", "w_hid", "w_mu", "w_s")
    BIASES = ("b_in", "b_hid", "b_mu", "b_s")

    def __init__(self, mp: MadeParams):
        super().__init__()
        for n in self.WEIGHTS + self.BIASES:
            setattr(self, n, nn.Parameter(getattr(mp, n).clone()))

    def params(self) -> MadeParams:
        return MadeParams(*(getattr(self, n) for n in
                            ("w_in", "b_in", "w_hid", "b_hid", "w_mu", "b_mu", "w_s", "b_s")))


def hypernet_to_json(h: Hypernetwork) -> dict:
    return {
        "schema": "snf-hypernet/1",
        "config": h.config.to_dict(),
        "ortho_tol": h.ortho_tol,
        "tensors": {n: p.detach().tolist() for n, p in h.state_dict().items()},
    }


def hypernet_from_json(doc: dict) -> Hypernetwork:
    if doc.get("schema") != "snf-hypernet/1":
        raise ValueError(f"unsupported hypernetwork schema {doc.get('schema')!r}")
    cfg = AmortizationConfig(**doc["config"])
    h = Hypernetwork(cfg, torch.Generator().manual_seed(0), ortho_tol=doc.get("ortho_tol", DEFAULT_ORTHO_TOL))
    h.load_state_dict({n: torch.tensor(v, dtype=DTYPE) for n, v in doc["tensors"].items()})
    return h
