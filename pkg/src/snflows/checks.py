"""Property suites over seeded instance grids, shared by the CLI and the tests.

Each suite returns a JSON-ready dict with a ``passed`` flag, the threshold
it enforces and per-instance measurements. Reports contain no timings so
that identical seeds give byte-identical output.
"""

from __future__ import annotations

import math

import torch
from torch.func import functional_call

from . import instances
from .amortize import AmortizationConfig, FlowFamily, Hypernetwork
from .diffcore import grad_check
from .flows import (
    FlowStack,
    GeneralSylvesterParams,
    IAFParams,
    PlanarParams,
    SylvesterParams,
    Variant,
    flow_forward,
    iaf_forward,
    project_planar,
    upper_triangular,
)
from .inversion import invert_planar, invert_sylvester
from .linalg import DTYPE, HouseholderChain, OrthonormalColumns, bjorck_orthogonalize, dense_det
from .vi import correlated_gaussian, free_energy

REPORT_SCHEMA = "snf-check-report/1"
SUITES = ("logdet", "inverse", "ortho", "grad", "made")

LOGDET_TOL = 1e-6
ROUNDTRIP_TOL = 1e-8
PERP_TOL = 1e-14
ORTHO_TOL = 1e-6
BJORCK_MAX_STEPS = 30
# residuals of already-converged matrices jitter at the float64 roundoff level
MONOTONE_SLACK = 1e-14
GRAD_TOL = 1e-4
MADE_TOL = 1e-7
FD_STEP = 1e-5


def fd_jacobian(fn, z: torch.Tensor, step: float = FD_STEP) -> torch.Tensor:
    """Central-difference Jacobian of ``fn: R^D -> R^D`` at ``z``."""
    d = z.shape[-1]
    cols = []
    with torch.no_grad():
        for j in range(d):
            e = torch.zeros(d, dtype=DTYPE)
            e[j] = step
            cols.append((fn(z + e) - fn(z - e)) / (2.0 * step))
    return torch.stack(cols, dim=-1)


def _gen(seed: int, *salt: int) -> torch.Generator:
    h = seed
    for s in salt:
        h = (h * 1_000_003 + s) % (2 ** 62)
    return torch.Generator().manual_seed(h)


def _dim(i: int, max_dim: int, lo: int = 1) -> int:
    return lo + i % (max_dim - lo + 1)


def _summary(threshold: float, rows: list[dict], key: str = "error") -> dict:
    worst = max((r[key] for r in rows), default=0.0)
    return {"threshold": threshold, "max_error": worst,
            "passed": bool(all(r[key] < threshold for r in rows)), "instances": rows}


# ------------------------------------------------------------------ logdet

LOGDET_VARIANTS = ("planar", "general", "osnf", "hsnf", "tsnf", "iaf")


def logdet_errors(variant: str, seed: int, n: int, max_dim: int) -> list[dict]:
    rows = []
    for i in range(n):
        g = _gen(seed, 1, LOGDET_VARIANTS.index(variant), i)
        d = _dim(i, max_dim)
        if variant == "tsnf":
            flow = instances.tsnf(g, d, reverse=i % 2 == 1)
        elif variant == "iaf":
            flow = instances.iaf(g, d, reverse=i % 2 == 1)
        else:
            flow = instances.random_flow(variant, g, d)
        z = torch.randn(d, generator=g, dtype=DTYPE)
        _, ld = flow_forward(flow, z)
        jac = fd_jacobian(lambda x: flow_forward(flow, x)[0], z)
        oracle = math.log(abs(dense_det(jac)))
        rows.append({"index": i, "dim": d, "analytic": float(ld), "oracle": oracle,
                     "error": abs(float(ld) - oracle)})
    return rows


def suite_logdet(seed: int, dims: int = 8, n: int = 100) -> dict:
    out = {v: _summary(LOGDET_TOL, logdet_errors(v, seed, n, dims)) for v in LOGDET_VARIANTS}
    return {"passed": all(r["passed"] for r in out.values()), "variants": out}


# ----------------------------------------------------------------- inverse

INVERSE_VARIANTS = ("planar", "osnf", "hsnf", "tsnf")


def _perp_error(flow: SylvesterParams, z: torch.Tensor, z_other: torch.Tensor) -> float:
    q = flow.q.matrix
    proj = torch.eye(q.shape[-2], dtype=DTYPE) - q @ q.T
    return float((proj @ (z - z_other)).abs().max())


def roundtrip_errors(variant: str, seed: int, n: int, max_dim: int) -> list[dict]:
    rows = []
    for i in range(n):
        g = _gen(seed, 2, INVERSE_VARIANTS.index(variant), i)
        d = _dim(i, max_dim, lo=2 if variant == "osnf" else 1)
        if variant == "tsnf":
            flow = instances.tsnf(g, d, reverse=i % 2 == 1)
        else:
            flow = instances.random_flow(variant, g, d)
        inverse = invert_planar if variant == "planar" else invert_sylvester
        z = torch.randn(d, generator=g, dtype=DTYPE)
        z_prime = flow_forward(flow, z)[0]
        back = inverse(flow, z_prime)
        w = torch.randn(d, generator=g, dtype=DTYPE)
        fwd = flow_forward(flow, inverse(flow, w))[0]
        row = {"index": i, "dim": d,
               "inverse_of_forward": float((back - z).abs().max()),
               "forward_of_inverse": float((fwd - w).abs().max())}
        row["error"] = max(row["inverse_of_forward"], row["forward_of_inverse"])
        if variant == "osnf" and flow.bottleneck < d:
            row["perp_forward"] = _perp_error(flow, z, z_prime)
            row["perp_inverse"] = _perp_error(flow, w, inverse(flow, w))
        rows.append(row)
    return rows


def suite_inverse(seed: int, dims: int = 8, n: int = 100) -> dict:
    out = {}
    for v in INVERSE_VARIANTS:
        rows = roundtrip_errors(v, seed, n, dims)
        summary = _summary(ROUNDTRIP_TOL, rows)
        perp = [max(r["perp_forward"], r["perp_inverse"]) for r in rows if "perp_forward" in r]
        if perp:
            summary["perp_threshold"] = PERP_TOL
            summary["max_perp_error"] = max(perp)
            summary["passed"] = summary["passed"] and max(perp) < PERP_TOL
        out[v] = summary
    return {"passed": all(r["passed"] for r in out.values()), "variants": out}


# ------------------------------------------------------------------- ortho


def bjorck_diagnostics(result: OrthonormalColumns) -> dict:
    hist = result.residuals.reshape(result.residuals.shape[0], -1)
    increases = (hist[1:] - hist[:-1]).clamp_min(0.0)
    return {"steps": result.steps, "final_residual": float(hist[-1].max()),
            "max_increase": float(increases.max()) if increases.numel() else 0.0}


def suite_ortho(seed: int, dims: int = 8, n: int = 20, batch: int = 16) -> dict:
    """Bjorck convergence for amortized O-SNF factors across random hypernetworks."""
    rows = []
    for i in range(n):
        g = _gen(seed, 3, i)
        d = _dim(i, max(dims, 2), lo=2)
        m = 1 + i % d
        cfg = AmortizationConfig(feature_dim=8, latent_dim=d, num_flows=4,
                                 variant=FlowFamily.OSNF, bottleneck=m)
        # wide init so the seeds are far from orthonormal
        hyper = Hypernetwork(cfg, g, ortho_tol=ORTHO_TOL, init_std=1.0)
        feats = torch.randn(batch, 8, generator=g, dtype=DTYPE)
        with torch.no_grad():
            diag = bjorck_diagnostics(hyper.orthogonal_factors(feats))
        diag.update(index=i, dim=d, bottleneck=m)
        diag["passed"] = (diag["final_residual"] <= ORTHO_TOL and diag["steps"] <= BJORCK_MAX_STEPS
                          and diag["max_increase"] <= MONOTONE_SLACK)
        rows.append(diag)
    worst = max(r["final_residual"] for r in rows)
    return {"passed": all(r["passed"] for r in rows), "threshold": ORTHO_TOL,
            "max_steps": BJORCK_MAX_STEPS, "monotone_slack": MONOTONE_SLACK, "max_residual": worst, "instances": rows}


# -------------------------------------------------------------------- grad


def _fixed_z(g, n, d):
    return torch.randn(n, d, generator=g, dtype=DTYPE)


def _flow_objective(build, z):
    def objective(p):
        out, ld = flow_forward(build(p), z)
        return (out ** 2).sum() * 0.5 + ld.sum()
    return objective


def gradient_problems(seed: int):
    """Named ``(objective, params)`` pairs covering every parameterized operation."""
    g = _gen(seed, 4)
    d, m, n = 3, 2, 4
    z = _fixed_z(g, n, d)

    def r(*shape, scale=1.0):
        return scale * torch.randn(*shape, generator=g, dtype=DTYPE)

    yield "planar", _flow_objective(
        lambda p: PlanarParams(project_planar(p["u"], p["w"]), p["w"], p["b"]), z), \
        {"u": r(d), "w": r(d), "b": r(())}
    yield "general_sylvester", _flow_objective(
        lambda p: GeneralSylvesterParams(p["a"], p["b_mat"], p["bias"]), z), \
        {"a": r(d, m, scale=0.5), "b_mat": r(m, d, scale=0.5), "bias": r(m)}

    def tri(p, q, var, mm):
        return SylvesterParams(q, upper_triangular(p["r"]), upper_triangular(p["r_tilde"]), p["b"], var)

    yield "tsnf", _flow_objective(lambda p: tri(p, instances.Permutation.REVERSE, Variant.TRIANGULAR, d), z), \
        {"r": r(d, d), "r_tilde": r(d, d), "b": r(d)}
    yield "hsnf", _flow_objective(lambda p: tri(p, HouseholderChain(p["v"]), Variant.HOUSEHOLDER, d), z), \
        {"v": r(2, d), "r": r(d, d), "r_tilde": r(d, d), "b": r(d)}

    q0 = torch.eye(d, m, dtype=DTYPE) + 0.3 * r(d, m) / math.sqrt(d * m)
    steps = bjorck_orthogonalize(q0).steps
    yield "osnf_bjorck", _flow_objective(
        lambda p: tri(p, bjorck_orthogonalize(p["q0"], fixed_steps=steps), Variant.ORTHOGONAL, m), z), \
        {"q0": q0, "r": r(m, m), "r_tilde": r(m, m), "b": r(m)}

    made = instances.made(g, d, 6)
    made_names = ("w_in", "b_in", "w_hid", "b_hid", "w_mu", "b_mu", "w_s", "b_s")

    def iaf_obj(p):
        mp = type(made)(*(p[k] for k in made_names))
        out, ld = iaf_forward(mp, z, p["context"])
        return (out ** 2).sum() * 0.5 + ld.sum()

    yield "iaf", iaf_obj, {**{k: getattr(made, k) for k in made_names}, "context": r(6)}

    # amortized free energy: T-SNF, D=3, K=2, fixed noise
    target = correlated_gaussian(0.5, 3)
    for fam, extra in (("tsnf", {}), ("osnf", {"bottleneck": 2}), ("hsnf", {"reflections": 2}),
                       ("planar", {}), ("iaf", {"made_width": 6})):
        cfg = AmortizationConfig(feature_dim=2, latent_dim=3, num_flows=2, variant=fam, **extra)
        hyper = Hypernetwork(cfg, _gen(seed, 5, len(fam)), init_std=0.3)
        feats = r(2)
        eps = r(8, 3)
        if fam == "osnf":
            hyper.bjorck_fixed_steps = hyper.orthogonal_factors(feats).steps
        params = {k: v.detach().clone() for k, v in hyper.named_parameters()}

        def fe(p, hyper=hyper, feats=feats, eps=eps):
            base, stack = functional_call(hyper, p, (feats,))
            return free_energy(base, stack, target, eps)

        yield f"free_energy_{fam}", fe, params

    yield "elbo_tiny_vae", *tiny_vae_problem(seed)


def tiny_vae_problem(seed: int):
    """Full per-datum ELBO of a 4x4-pixel VAE with a T-SNF posterior at fixed noise.

    The hypernetwork heads are widened from their training init so that no
    gradient entry sits at the finite-difference roundoff floor.
    """
    from .training import ToyVAE, VAEConfig, bars_dataset, binarize

    vae = VAEConfig(latent_dim=2, feature_dim=4, hidden=4)
    cfg = AmortizationConfig(feature_dim=4, latent_dim=2, num_flows=2, variant=FlowFamily.TSNF)
    model = ToyVAE(vae, cfg, seed, data_dim=16)
    g = _gen(seed, 6)
    with torch.no_grad():
        for prm in model.hypernet.parameters():
            prm.copy_(0.3 * torch.randn(prm.shape, generator=g, dtype=DTYPE))
    x = binarize(bars_dataset(2, g, size=4), g)
    eps = torch.randn(2, 2, 2, generator=g, dtype=DTYPE)
    params = {k: v.detach().clone() for k, v in model.named_parameters()}

    def elbo(p):
        return functional_call(model, p, (x, eps, 1.0))

    return elbo, params


def suite_grad(seed: int, dims: int = 8) -> dict:
    out = {}
    for name, objective, params in gradient_problems(seed):
        reports = grad_check(objective, params, FD_STEP)
        worst = max(r.max_rel_error for r in reports)
        out[name] = {"max_rel_error": worst, "passed": worst < GRAD_TOL,
                     "blocks": [r.as_dict() for r in reports]}
    return {"passed": all(v["passed"] for v in out.values()), "threshold": GRAD_TOL,
            "fd_step": FD_STEP, "problems": out}


# -------------------------------------------------------------------- made


def autoregressive_leak(flow: IAFParams, z: torch.Tensor) -> float:
    """Largest ``|dz'_i/dz_j|`` with ``j > i`` in the step's own variable order."""
    jac = fd_jacobian(lambda x: flow_forward(flow, x)[0], z)
    if flow.reverse:
        jac = jac.flip(0).flip(1)
    return float(torch.triu(jac, diagonal=1).abs().max()) if jac.shape[0] > 1 else 0.0


def suite_made(seed: int, dims: int = 8, n: int = 100) -> dict:
    rows = []
    for i in range(n):
        g = _gen(seed, 7, i)
        d = _dim(i, dims)
        flow = instances.iaf(g, d, reverse=i % 2 == 1)
        z = torch.randn(d, generator=g, dtype=DTYPE)
        rows.append({"index": i, "dim": d, "reverse": flow.reverse,
                     "error": autoregressive_leak(flow, z)})
    return _summary(MADE_TOL, rows)


def run_suite(name: str, seed: int = 0, dims: int = 8) -> dict:
    """Run one suite (or ``all``) and wrap the result in a versioned report."""
    runners = {"logdet": suite_logdet, "inverse": suite_inverse, "ortho": suite_ortho,
               "grad": suite_grad, "made": suite_made}
    names = SUITES if name == "all" else (name,)
    if any(n not in runners for n in names):
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES + ('all',))}")
    results = {n: runners[n](seed, dims) for n in names}
    return {"schema": REPORT_SCHEMA, "suite": name, "seed": seed, "dims": dims,
            "passed": all(r["passed"] for r in results.values()), "results": results}


__all__ = ["FlowStack", "run_suite", "fd_jacobian"]
