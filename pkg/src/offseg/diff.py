"""Reverse-mode building blocks and the finite-difference arbiter.

Each primitive exposes a forward function and an exact vector-Jacobian
product. There is no graph engine: composites (the offset head, the training
loss) wire the VJPs by hand and `grad_check` arbitrates the result against
central finite differences at wide precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linalg import matmul, require_matrix


@dataclass
class MLPParams:
    """Two affine layers with a ReLU between: X -> act(X W1 + b1) W2 + b2.

    Shapes: w1 [d_in, d_h], b1 [d_h], w2 [d_h, d_out], b2 [d_out].
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ValueError("w1/w2 must be matrices")
        if self.b1.shape != (self.w1.shape[1],):
            raise ValueError(f"b1 shape {self.b1.shape} != ({self.w1.shape[1]},)")
        if self.w2.shape[0] != self.w1.shape[1]:
            raise ValueError(f"w2 rows {self.w2.shape[0]} != hidden {self.w1.shape[1]}")
        if self.b2.shape != (self.w2.shape[1],):
            raise ValueError(f"b2 shape {self.b2.shape} != ({self.w2.shape[1]},)")
        for name, arr in self.items():
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite entries in {name}")

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def items(self) -> list[tuple[str, np.ndarray]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.items())

    def copy(self) -> "MLPParams":
        return MLPParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def zeros_like_mlp(params: MLPParams) -> MLPParams:
    return MLPParams(
        np.zeros_like(params.w1),
        np.zeros_like(params.b1),
        np.zeros_like(params.w2),
        np.zeros_like(params.b2),
    )


@dataclass
class GradSlot:
    """A parameter tensor paired with an additively accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    def accumulate(self, dg: np.ndarray) -> None:
        if dg.shape != self.value.shape:
            raise ValueError(f"gradient shape {dg.shape} != {self.value.shape}")
        self.grad += dg

    def zero_grad(self) -> None:
        self.grad[...] = 0


@dataclass
class MLPCache:
    """Saved forward intermediates needed by mlp_backward."""

    x: np.ndarray
    pre: np.ndarray  # pre-activation X W1 + b1
    act: np.ndarray  # ReLU(pre)
    params: MLPParams


def mlp_forward(params: MLPParams, x: np.ndarray) -> tuple[np.ndarray, MLPCache]:
    """Row-wise MLP: Y = relu(X W1 + b1) W2 + b2, plus the backward cache."""
    x = require_matrix(x, "mlp input")
    if x.shape[1] != params.d_in:
        raise ValueError(f"mlp input cols {x.shape[1]} != d_in {params.d_in}")
    pre = matmul(x, params.w1) + params.b1
    act = np.maximum(pre, 0)
    y = matmul(act, params.w2) + params.b2
    return y, MLPCache(x=x, pre=pre, act=act, params=params)


def mlp_backward(cache: MLPCache, dy: np.ndarray) -> tuple[np.ndarray, MLPParams]:
    """Exact reverse-mode gradients of mlp_forward.

    Returns (dX, gradients-with-MLPParams-structure). The ReLU subgradient
    at exactly 0 is taken as 0.
    """
    p = cache.params
    if dy.shape != (cache.x.shape[0], p.d_out):
        raise ValueError(
            f"upstream shape {dy.shape} != ({cache.x.shape[0]}, {p.d_out})"
        )
    dw2 = matmul(cache.act.T, dy)
    db2 = dy.sum(axis=0)
    dact = matmul(dy, p.w2.T)
    dpre = dact * (cache.pre > 0)
    dw1 = matmul(cache.x.T, dpre)
    db1 = dpre.sum(axis=0)
    dx = matmul(dpre, p.w1.T)
    return dx, MLPParams(dw1, db1, dw2, db2)


def vjp_matmul(
    a: np.ndarray, b: np.ndarray, dc: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """VJP of C = A@B: returns (dA, dB) = (dC Bt, At dC)."""
    if dc.shape != (a.shape[0], b.shape[1]):
        raise ValueError(
            f"cotangent shape {dc.shape} != ({a.shape[0]}, {b.shape[1]})"
        )
    return matmul(dc, b.T), matmul(a.T, dc)


def vjp_softmax_rows(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """VJP of softmax_rows given its output Y: dX = Y * (dY - sum_j dY_j Y_j)."""
    if y.shape != dy.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs dy {dy.shape}")
    dot = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - dot)


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference check."""

    passed: bool
    max_rel_err: float
    worst_coord: int
    worst_name: str
    analytic: float
    numeric: float
    n_coords: int

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"{verdict}: max rel err {self.max_rel_err:.3e} at {self.worst_name} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, "
            f"{self.n_coords} coords)"
        )


def flatten_arrays(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate arrays into one float64 vector (analysis precision)."""
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unflatten_arrays(
    theta: np.ndarray, templates: Sequence[np.ndarray]
) -> list[np.ndarray]:
    """Split a flat vector back into arrays shaped like `templates`."""
    out = []
    pos = 0
    for t in templates:
        out.append(theta[pos : pos + t.size].reshape(t.shape))
        pos += t.size
    if pos != theta.size:
        raise ValueError(f"flat size {theta.size} != templates total {pos}")
    return out


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta0: np.ndarray,
    eps: float = 1e-5,
    tol: float = 1e-5,
    floor: float = 1e-5,
    coord_names: Callable[[int], str] | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of a scalar function to central differences.

    `f` maps a flat float64 parameter vector to (value, gradient). Each
    coordinate is perturbed by +-eps and the relative error
    |a - n| / max(|a|, |n|, floor) is taken; the check passes iff the maximum
    over coordinates is below `tol`. A non-finite value or gradient fails the
    check with the coordinate identified.

    `floor` sets the scale below which the comparison is effectively
    absolute. Central differences of an O(1) objective carry roundoff noise
    of about |f| * eps_machine / eps (~1e-11 at the defaults), so the floor
    must stay well above noise / tol or coordinates whose true gradient is
    exactly zero (and there is one in the full head loss: a per-class bias
    that cross entropy provably cannot see) would fail on noise alone.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    value, grad = f(theta0)
    name_of = coord_names or (lambda i: f"theta[{i}]")
    if not np.isfinite(value):
        return GradCheckReport(False, np.inf, -1, "f(theta0)", np.nan, value, theta0.size)
    if grad.shape != theta0.shape:
        raise ValueError(f"gradient shape {grad.shape} != theta shape {theta0.shape}")

    max_err = 0.0
    worst = 0
    worst_pair = (float(grad[0]) if theta0.size else 0.0, 0.0)
    for i in range(theta0.size):
        bumped = theta0.copy()
        bumped[i] += eps
        f_plus, _ = f(bumped)
        bumped[i] = theta0[i] - eps
        f_minus, _ = f(bumped)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            return GradCheckReport(
                False, np.inf, i, name_of(i), float(grad[i]), np.nan, theta0.size
            )
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = float(grad[i])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if rel > max_err:
            max_err = rel
            worst = i
            worst_pair = (analytic, numeric)
    return GradCheckReport(
        passed=max_err < tol,
        max_rel_err=max_err,
        worst_coord=worst,
        worst_name=name_of(worst),
        analytic=worst_pair[0],
        numeric=worst_pair[1],
        n_coords=theta0.size,
    )
