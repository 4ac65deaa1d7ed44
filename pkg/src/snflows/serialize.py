"""JSON (de)serialization of flow parameters and trained models.

Flow stacks use the ``snf-params/1`` document::

    {"schema": "snf-params/1", "variant": "tsnf", "activation": "tanh",
     "base": {"mu": [...], "log_sigma": [...]},
     "flows": [{"q": "identity", "r": [[...]], "r_tilde": [[...]], "b": [...]}, ...]}

``q`` is a nested list for O-SNF, ``{"householder": [[...], ...]}`` for H-SNF
and ``"identity"``/``"reverse"`` for T-SNF. Planar flows carry ``u, w, b``;
IAF steps carry ``made``, ``context`` and ``reverse``. Only unbatched
parameters (a single datapoint) can be written.
"""

from __future__ import annotations

import torch

from .flows import (
    Activation,
    FlowStack,
    GeneralSylvesterParams,
    IAFParams,
    MadeParams,
    Permutation,
    PlanarParams,
    SylvesterParams,
    Variant,
)
from .linalg import HouseholderChain, OrthonormalColumns, as_tensor
from .vi import DiagGaussian

PARAMS_SCHEMA = "snf-params/1"

_MADE_FIELDS = ("w_in", "b_in", "w_hid", "b_hid", "w_mu", "b_mu", "w_s", "b_s")
_SYLVESTER_NAMES = {Variant.ORTHOGONAL: "osnf", Variant.HOUSEHOLDER: "hsnf", Variant.TRIANGULAR: "tsnf"}


def _lst(t: torch.Tensor):
    return t.detach().tolist()


def flow_to_dict(f) -> dict:
    if isinstance(f, PlanarParams):
        return {"type": "planar", "u": _lst(f.u), "w": _lst(f.w), "b": float(f.b)}
    if isinstance(f, GeneralSylvesterParams):
        return {"type": "general", "a": _lst(f.a), "b_mat": _lst(f.b_mat), "b": _lst(f.bias)}
    if isinstance(f, IAFParams):
        return {"type": "iaf", "made": {n: _lst(getattr(f.made, n)) for n in _MADE_FIELDS},
                "context": _lst(f.context), "reverse": f.reverse}
    if isinstance(f, SylvesterParams):
        if isinstance(f.q, Permutation):
            q = f.q.value
        elif isinstance(f.q, HouseholderChain):
            q = {"householder": _lst(f.q.vectors)}
        else:
            q = _lst(f.q.matrix)
        return {"type": _SYLVESTER_NAMES[f.variant], "q": q, "r": _lst(f.r),
                "r_tilde": _lst(f.r_tilde), "b": _lst(f.bias)}
    raise TypeError(f"cannot serialize {type(f).__name__}")


def flow_from_dict(d: dict, ortho_tol: float = 1e-6):
    kind = d.get("type")
    if kind is None:
        kind = _infer_kind(d)
    if kind == "planar":
        return PlanarParams(as_tensor(d["u"]), as_tensor(d["w"]), as_tensor(d["b"]))
    if kind == "general":
        return GeneralSylvesterParams(as_tensor(d["a"]), as_tensor(d["b_mat"]), as_tensor(d["b"]))
    if kind == "iaf":
        made = MadeParams(*(as_tensor(d["made"][n]) for n in _MADE_FIELDS))
        return IAFParams(made, as_tensor(d["context"]), bool(d.get("reverse", False)))
    r, rt, b = as_tensor(d["r"]), as_tensor(d["r_tilde"]), as_tensor(d["b"])
    q = d["q"]
    if isinstance(q, str):
        return SylvesterParams(Permutation(q), r, rt, b, Variant.TRIANGULAR)
    if isinstance(q, dict):
        return SylvesterParams(HouseholderChain(as_tensor(q["householder"])), r, rt, b, Variant.HOUSEHOLDER)
    return SylvesterParams(OrthonormalColumns(as_tensor(q), tol=ortho_tol), r, rt, b, Variant.ORTHOGONAL)


def _infer_kind(d: dict) -> str:
    if "u" in d:
        return "planar"
    if "made" in d:
        return "iaf"
    if "a" in d:
        return "general"
    return "sylvester"


def stack_to_json(stack: FlowStack, variant: str, base: DiagGaussian | None = None) -> dict:
    doc = {"schema": PARAMS_SCHEMA, "variant": variant, "activation": stack.activation.value,
           "flows": [flow_to_dict(f) for f in stack.flows]}
    if base is not None:
        doc["base"] = {"mu": _lst(base.mu), "log_sigma": _lst(base.log_sigma)}
    return doc


def stack_from_json(doc: dict, ortho_tol: float = 1e-6):
    """Return ``(variant, FlowStack, DiagGaussian or None)``."""
    if doc.get("schema") != PARAMS_SCHEMA:
        raise ValueError(f"expected schema {PARAMS_SCHEMA!r}, got {doc.get('schema')!r}")
    stack = FlowStack(tuple(flow_from_dict(f, ortho_tol) for f in doc["flows"]),
                      Activation(doc.get("activation", "tanh")))
    base = None
    if "base" in doc:
        base = DiagGaussian(as_tensor(doc["base"]["mu"]), as_tensor(doc["base"]["log_sigma"]))
    return doc["variant"], stack, base


def module_to_json(module: torch.nn.Module, schema: str, config: dict) -> dict:
    return {"schema": schema, "config": config,
            "tensors": {n: _lst(t) for n, t in module.state_dict().items()}}


def load_module_tensors(module: torch.nn.Module, doc: dict, schema: str) -> torch.nn.Module:
    if doc.get("schema") != schema:
        raise ValueError(f"expected schema {schema!r}, got {doc.get('schema')!r}")
    module.load_state_dict({n: as_tensor(v) for n, v in doc["tensors"].items()})
    return module
