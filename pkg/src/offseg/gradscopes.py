"""Named gradient-check composites wiring the analytic backward passes.

Each scope packs its inputs and parameters into one flat wide-precision
vector and exposes a scalar objective with its analytic gradient, ready for
`diff.grad_check` to arbitrate against central differences. The `fault`
flag deliberately mis-scales the analytic gradient, as a self-test that the
checker actually catches wrong gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diff import (
    GradCheckReport,
    MLPParams,
    flatten_arrays,
    grad_check,
    mlp_backward,
    mlp_forward,
    unflatten_arrays,
    vjp_softmax_rows,
)
from .heads import OffsetHeadParams, offset_backward, offset_forward
from .linalg import WIDE, softmax_rows
from .seeding import substream
from .train import cross_entropy

SCOPES = ("mlp", "softmax", "head", "loss")

# Shapes shared by the head and loss scopes.
_K, _C, _CH, _HW = 5, 8, 4, 16


@dataclass
class Scope:
    name: str
    theta0: np.ndarray
    f: Callable[[np.ndarray], tuple[float, np.ndarray]]
    coord_names: Callable[[int], str]


def _namer(blocks: list[tuple[str, np.ndarray]]) -> Callable[[int], str]:
    bounds = []
    start = 0
    for name, arr in blocks:
        bounds.append((start, start + arr.size, name))
        start += arr.size

    def name_of(i: int) -> str:
        for lo, hi, name in bounds:
            if lo <= i < hi:
                return f"{name}[{i - lo}]"
        return f"theta[{i}]"

    return name_of


def _fault_scale(grad: np.ndarray, fault: bool) -> np.ndarray:
    return grad * 1.01 if fault else grad


def scope_mlp(seed: int, fault: bool = False) -> Scope:
    rng = substream(seed, "gradcheck", "mlp")
    n, c, ch = 3, 4, 2
    blocks = [
        ("x", rng.normal(size=(n, c))),
        ("w1", rng.normal(size=(c, ch))),
        ("b1", rng.normal(size=ch)),
        ("w2", rng.normal(size=(ch, c))),
        ("b2", rng.normal(size=c)),
    ]
    templates = [arr for _, arr in blocks]

    def f(theta: np.ndarray) -> tuple[float, np.ndarray]:
        x, w1, b1, w2, b2 = unflatten_arrays(theta, templates)
        params = MLPParams(w1, b1, w2, b2)
        y, cache = mlp_forward(params, x)
        dx, g = mlp_backward(cache, y)  # d(0.5 sum y^2)/dy = y
        grad = flatten_arrays([dx, g.w1, g.b1, g.w2, g.b2])
        return 0.5 * float((y**2).sum()), _fault_scale(grad, fault)

    return Scope("mlp", flatten_arrays(templates), f, _namer(blocks))


def scope_softmax(seed: int, fault: bool = False) -> Scope:
    rng = substream(seed, "gradcheck", "softmax")
    x0 = rng.normal(size=(4, 5))

    def f(theta: np.ndarray) -> tuple[float, np.ndarray]:
        (x,) = unflatten_arrays(theta, [x0])
        y = softmax_rows(x)
        dx = vjp_softmax_rows(y, y)
        return 0.5 * float((y**2).sum()), _fault_scale(dx.ravel(), fault)

    return Scope("softmax", flatten_arrays([x0]), f, _namer([("x", x0)]))


def _random_head_blocks(rng: np.random.Generator) -> list[tuple[str, np.ndarray]]:
    """Random wide-precision head parameters with active (nonzero) branches."""
    blocks = [("class_embed", rng.normal(size=(_K, _C)) / np.sqrt(_C))]
    for branch in ("class_mlp", "feature_mlp"):
        blocks += [
            (f"{branch}.w1", rng.normal(size=(_C, _CH)) / np.sqrt(_C)),
            (f"{branch}.b1", rng.normal(size=_CH) * 0.1),
            (f"{branch}.w2", rng.normal(size=(_CH, _C)) / np.sqrt(_CH)),
            (f"{branch}.b2", rng.normal(size=_C) * 0.1),
        ]
    return blocks


def _head_from(arrays: list[np.ndarray], temperature: float) -> OffsetHeadParams:
    w, cw1, cb1, cw2, cb2, fw1, fb1, fw2, fb2 = arrays
    return OffsetHeadParams(
        class_embed=w,
        class_mlp=MLPParams(cw1, cb1, cw2, cb2),
        feature_mlp=MLPParams(fw1, fb1, fw2, fb2),
        temperature=temperature,
    )


def scope_head(seed: int, fault: bool = False) -> Scope:
    """Quadratic objective sum(M^2) through the full offset head."""
    rng = substream(seed, "gradcheck", "head")
    blocks = _random_head_blocks(rng) + [("features", rng.normal(size=(_HW, _C)))]
    templates = [arr for _, arr in blocks]
    temperature = 1.3  # exercise the score-scaling path

    def f(theta: np.ndarray) -> tuple[float, np.ndarray]:
        arrays = unflatten_arrays(theta, templates)
        head = _head_from(arrays[:-1], temperature)
        trace = offset_forward(head, arrays[-1])
        hg = offset_backward(head, trace, 2.0 * trace.logits)
        grad = flatten_arrays(
            [hg.class_embed]
            + [a for _, a in hg.class_mlp.items()]
            + [a for _, a in hg.feature_mlp.items()]
            + [hg.features]
        )
        return float((trace.logits**2).sum()), _fault_scale(grad, fault)

    return Scope("head", flatten_arrays(templates), f, _namer(blocks))


def scope_loss(seed: int, fault: bool = False) -> Scope:
    """Cross entropy through the offset head, with some pixels ignored."""
    rng = substream(seed, "gradcheck", "loss")
    blocks = _random_head_blocks(rng) + [("features", rng.normal(size=(_HW, _C)))]
    templates = [arr for _, arr in blocks]
    labels = rng.integers(0, _K, size=_HW)
    labels[rng.choice(_HW, size=2, replace=False)] = 65535

    def f(theta: np.ndarray) -> tuple[float, np.ndarray]:
        arrays = unflatten_arrays(theta, templates)
        head = _head_from(arrays[:-1], temperature=1.0)
        trace = offset_forward(head, arrays[-1])
        loss, dlogits = cross_entropy(trace.logits, labels)
        hg = offset_backward(head, trace, dlogits)
        grad = flatten_arrays(
            [hg.class_embed]
            + [a for _, a in hg.class_mlp.items()]
            + [a for _, a in hg.feature_mlp.items()]
            + [hg.features]
        )
        return loss, _fault_scale(grad, fault)

    return Scope("loss", flatten_arrays(templates), f, _namer(blocks))


_BUILDERS = {
    "mlp": scope_mlp,
    "softmax": scope_softmax,
    "head": scope_head,
    "loss": scope_loss,
}


def run_scope(
    name: str, seed: int, eps: float = 1e-5, tol: float = 1e-5, fault: bool = False
) -> GradCheckReport:
    """Build and run one named scope at wide precision."""
    if name not in _BUILDERS:
        raise ValueError(f"unknown scope {name!r}; expected one of {SCOPES}")
    scope = _BUILDERS[name](seed, fault=fault)
    theta = scope.theta0.astype(WIDE)
    return grad_check(scope.f, theta, eps=eps, tol=tol, coord_names=scope.coord_names)
