"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    c = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(c)), floor)
    return float(np.max(np.abs(a - c) / denom)) if a.size else 0.0


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, eps: float,
                       oracle_dtype=np.float64, coords: np.ndarray | None = None,
                       stencil: int = 2) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the flat ``coords`` of ``x``
    (all coordinates by default); entries not visited stay zero.

    ``stencil=4`` uses the five-point formula, whose O(eps^4) truncation
    allows a wider step and so less rounding on tiny gradient entries.

    ``x.data`` is temporarily promoted to ``oracle_dtype`` so everything
    downstream of the perturbation is evaluated at that precision; values
    upstream of ``x`` are constant under the perturbation and need no
    promotion.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    original = x.data
    work = original.astype(oracle_dtype, copy=True)
    grad = np.zeros(work.shape, dtype=np.float64)
    flat = work.reshape(-1)
    gflat = grad.reshape(-1)
    try:
        x.data = work
        with no_grad():
            for i in (range(flat.size) if coords is None else coords):
                keep = flat[i]

                def at(step):
                    flat[i] = keep + step
                    return float(f().data)

                d1 = at(eps) - at(-eps)
                if stencil == 2:
                    gflat[i] = d1 / (2.0 * eps)
                else:
                    d2 = at(2 * eps) - at(-2 * eps)
                    gflat[i] = (8.0 * d1 - d2) / (12.0 * eps)
                flat[i] = keep
    finally:
        x.data = original
    return grad


def analytic_gradients(f: Callable[[], Tensor], xs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in xs:
        x.grad = None
    out = f()
    out.backward()
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]


def finite_difference_check(f: Callable[[], Tensor], x: Tensor | Sequence[Tensor],
                            eps: float = 1e-6, oracle_dtype=np.float64,
                            sample: int | None = None,
                            rng: np.random.Generator | None = None, stencil: int = 2) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument closure returning a scalar tensor that depends
    on ``x`` (one tensor or several). The error per coordinate is
    ``|a - c| / max(|a|, |c|, 1e-8)``. With ``sample``, at most that many
    random coordinates per tensor are differenced (for large composites).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
    analytic = analytic_gradients(f, xs)
    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for t, a in zip(xs, analytic):
        if sample is None or t.data.size <= sample:
            numeric = numerical_gradient(f, t, eps, oracle_dtype, stencil=stencil)
            worst = max(worst, relative_error(a, numeric))
            continue
        coords = rng.choice(t.data.size, size=sample, replace=False)
        numeric = numerical_gradient(f, t, eps, oracle_dtype, coords, stencil)
        worst = max(worst, relative_error(a.reshape(-1)[coords], numeric.reshape(-1)[coords]))
    return worst
