import math

import pytest
import torch

from conftest import randn, t
from snflows.checks import GRAD_TOL, gradient_problems, tiny_vae_problem
from snflows.diffcore import finite_difference, grad_check, gradients, relative_error
from snflows.errors import NumericalError
from snflows.flows import PlanarParams, planar_forward
from snflows.linalg import DTYPE, bjorck_orthogonalize


def test_constant_objective_has_zero_gradient(gen):
    params = {"a": randn(gen, 3), "b": randn(gen, 2, 2)}
    grads = gradients(lambda p: torch.tensor(4.0, dtype=DTYPE), params)
    assert all(bool((g == 0).all()) for g in grads.values())


def test_planar_zero_u_bias_gradient(gen):
    z = randn(gen, 3)

    def objective(p):
        out, _ = planar_forward(PlanarParams(torch.zeros(3, dtype=DTYPE), p["w"], p["b"]), z)
        return (out ** 2).sum()

    grads = gradients(objective, {"w": randn(gen, 3), "b": t(0.2)})
    assert float(grads["b"]) == 0.0


def test_quadratic_exact():
    params = {"p": t([0.5, -2.0, 3.0])}
    (report,) = grad_check(lambda p: 0.5 * (p["p"] ** 2).sum(), params)
    assert report.max_rel_error < 1e-10
    assert torch.allclose(report.analytic, params["p"])


def test_bjorck_constant_on_manifold(gen):
    q0 = torch.eye(4, 2, dtype=DTYPE) + 0.1 * randn(gen, 4, 2)
    steps = bjorck_orthogonalize(q0, eps=1e-14).steps
    e1 = torch.eye(2, dtype=DTYPE)[0]

    def objective(p):
        q = bjorck_orthogonalize(p["q0"], eps=1e-14, fixed_steps=steps).matrix
        return ((q @ e1) ** 2).sum()

    assert float(objective({"q0": q0})) == pytest.approx(1.0, abs=1e-14)
    assert float(gradients(objective, {"q0": q0})["q0"].abs().max()) < 1e-6


def test_seeded_tsnf_free_energy():
    problems = {name: (obj, prm) for name, obj, prm in gradient_problems(0)}
    obj, prm = problems["free_energy_tsnf"]
    assert max(r.max_rel_error for r in grad_check(obj, prm)) < 1e-4


def test_full_elbo_tiny():
    obj, prm = tiny_vae_problem(3)
    assert max(r.max_rel_error for r in grad_check(obj, prm)) < 1e-4


@pytest.mark.parametrize("seed", [0, 1])
def test_every_operation(seed):
    for name, obj, prm in gradient_problems(seed):
        worst = max(r.max_rel_error for r in grad_check(obj, prm))
        assert worst < GRAD_TOL, name


def test_non_finite_gradient_names_block():
    params = {"good": t([1.0]), "bad": t([0.0])}

    def objective(p):
        return p["good"].sum() + torch.sqrt(p["bad"]).sum()

    with pytest.raises(NumericalError) as exc:
        gradients(objective, params)
    assert exc.value.block == "bad"


def test_grad_check_reports_instead_of_raising():
    params = {"good": t([1.0]), "bad": t([0.0])}
    reports = grad_check(lambda p: p["good"].sum() + torch.sqrt(p["bad"]).sum(), params)
    assert all(math.isinf(r.max_rel_error) for r in reports)
    assert not any(r.ok for r in reports)


def test_gradients_deterministic(gen):
    obj, prm = tiny_vae_problem(0)
    a, b = gradients(obj, prm), gradients(obj, prm)
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_finite_difference_restores_params(gen):
    params = {"x": randn(gen, 4)}
    before = params["x"].clone()
    finite_difference(lambda p: (p["x"] ** 3).sum(), params)
    assert torch.equal(params["x"], before)


def test_relative_error_floor():
    assert float(relative_error(t(0.0), t(0.0))) == 0.0
    assert float(relative_error(t(1e-9), t(0.0))) == pytest.approx(0.1)


def test_fd_step_must_be_positive():
    with pytest.raises(ValueError):
        grad_check(lambda p: p["x"].sum(), {"x": t([1.0])}, fd_step=0.0)
