"""Finite-difference gradient suite over every op and the composed blocks.

Shared by ``denseact gradcheck`` and the test suite.
"""
from __future__ import annotations

import contextlib
import dataclasses
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .branches import ModelState, NetworkConfig
from .diffcore import ops
from .diffcore.gradcheck import finite_difference_check
from .diffcore.tensor import Tensor, precision
from .losses import LossConfig, assistant_loss, core_loss
from .rpt import RptBlock, RptConfig

SINGLE_TOL = 1e-4
DOUBLE_TOL = 1e-6
COMPOSITE_TOL = 1e-3
PARAM_BLOCK_TOL = 1e-4
PARAM_DEEP_TOL = 1e-4
# parameter sweeps reach entries ~6 decades below the largest gradient; the
# five-point stencil at a wide step keeps rounding well under those entries
PARAM_FD = dict(eps=1e-3, stencil=4)

# name -> rng -> (input arrays, fn of tensors); step sizes are chosen in op_error
OP_CASES: dict[str, Callable] = {
    "matmul": lambda r: ((r.standard_normal((4, 3)), r.standard_normal((3, 5))),
                         lambda a, b: ops.matmul(a, b)),
    "bmm": lambda r: ((r.standard_normal((2, 4, 3)), r.standard_normal((2, 3, 5))),
                      lambda a, b: ops.matmul(a, b)),
    "softmax": lambda r: ((r.standard_normal((4, 6)),), lambda a: ops.softmax_rows(a)),
    "sigmoid": lambda r: ((r.standard_normal((4, 6)) * 3,), lambda a: ops.sigmoid(a)),
    # unit scale: in the far tail the gradient falls below the oracle's rounding floor
    "gelu": lambda r: ((r.standard_normal((4, 6)),), lambda a: ops.gelu(a)),
    "relu": lambda r: ((r.standard_normal((4, 6)) + np.sign(r.standard_normal((4, 6))) * 0.1,),
                       lambda a: ops.relu(a)),
    "log": lambda r: ((r.uniform(0.5, 2.0, (5,)),), lambda a: ops.log(a)),
    "power": lambda r: ((r.uniform(0.5, 2.0, (5,)),), lambda a: ops.power(a, 3.0)),
    "layer_norm": lambda r: ((r.standard_normal((5, 6)), 1 + 0.1 * r.standard_normal(6),
                              r.standard_normal(6)), lambda x, g, b: ops.layer_norm(x, g, b)),
    "conv1d_s1": lambda r: ((r.standard_normal((9, 3)), r.standard_normal((3, 3, 4)),
                             r.standard_normal(4)), lambda x, k, b: ops.conv1d(x, k, b, 1, 1)),
    "conv1d_s2": lambda r: ((r.standard_normal((12, 3)), r.standard_normal((3, 3, 2)),
                             r.standard_normal(2)), lambda x, k, b: ops.conv1d(x, k, b, 2, 1)),
    "conv1d_s4": lambda r: ((r.standard_normal((16, 2)), r.standard_normal((3, 2, 2)),
                             r.standard_normal(2)), lambda x, k, b: ops.conv1d(x, k, b, 4, 1)),
    "upsample": lambda r: ((r.standard_normal((4, 3)),), lambda a: ops.upsample_linear(a, 13)),
    "dropout": lambda r: ((r.standard_normal((5, 4)),),
                          lambda a: ops.dropout(a, 0.3, True, np.random.default_rng(7))),
    "transpose_reshape": lambda r: ((r.standard_normal((2, 3, 4)),),
                                    lambda a: ops.reshape(ops.transpose(a, (1, 0, 2)), (3, 8))),
    "pad_slice": lambda r: ((r.standard_normal((3, 4)),),
                            lambda a: ops.slice_last(ops.pad_last(a, 2), 1, 5)),
    "take_last": lambda r: ((r.standard_normal((3, 4)),),
                            lambda a: ops.take_last(a, np.array([0, 0, 3, 1, 3]))),
}

# ops module attributes exercised by each case (targets for the corruption hook)
CORRUPTIBLE = ("matmul", "softmax", "softmax_rows", "sigmoid", "gelu", "relu", "log", "power",
               "layer_norm", "conv1d", "upsample_linear", "dropout", "transpose", "reshape",
               "pad_last", "slice_last", "take_last", "add", "mul", "sum")


@dataclass
class CheckResult:
    name: str
    kind: str  # "op" or "composite"
    precision: str
    worst: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst < self.tolerance)


@contextlib.contextmanager
def corrupt_op(name: str, factor: float = 1.5):
    """Negative control: scale the gradients ``ops.<name>`` hands back."""
    if name not in CORRUPTIBLE:
        raise ValueError(f"cannot corrupt {name!r}; choose from {CORRUPTIBLE}")
    original = getattr(ops, name)

    def wrapped(*args, **kwargs):
        out = original(*args, **kwargs)
        bw = out._backward
        if bw is not None:
            out._backward = lambda g: tuple(None if x is None else x * factor for x in bw(g))
        return out

    setattr(ops, name, wrapped)
    try:
        yield
    finally:
        setattr(ops, name, original)


def op_error(name: str, seed: int, dtype) -> float:
    rng = np.random.default_rng(seed)
    arrays, fn = OP_CASES[name](rng)
    xs = [Tensor(np.asarray(a, dtype=dtype)) for a in arrays]
    w = rng.standard_normal(fn(*xs).shape).astype(dtype)
    f = lambda: ops.sum(ops.mul(fn(*xs), w))  # noqa: E731
    # matmul is bilinear: a wide step has no truncation error and less rounding
    eps = 1e-3 if name in ("matmul", "bmm") else 1e-5
    return finite_difference_check(f, xs, eps=eps)


def composite_network(base: NetworkConfig | None = None) -> NetworkConfig:
    """Small dimensions carrying the structural switches of ``base``."""
    base = base or NetworkConfig()
    switches = {k: getattr(base, k) for k in (
        "positional", "activation", "share_omega", "coarse_wiring", "coarse_input",
        "use_fine", "use_coarse", "assistant", "alpha_fine", "alpha_coarse")}
    return NetworkConfig(T=16, D=8, C=5, C_star=8, D_star=8, B=1, H=2, F=2, r_clip=4,
                         dropout_rate=0.0, **switches)


def rpt_block_error(seed: int, net: NetworkConfig, dtype=np.float32, params: bool = False
                    ) -> float:
    """One RPT block on an 8x16 input: error w.r.t. the input, or w.r.t.
    a sample of parameter coordinates when ``params``."""
    with precision(dtype):
        cfg = RptConfig(model_dim=16, heads=4, r_clip=4, dropout_rate=0.0,
                        positional=net.positional, activation=net.activation)
        rng = np.random.default_rng(seed)
        block = RptBlock(cfg, rng).eval()
        x = Tensor(rng.standard_normal((8, 16)).astype(dtype))
        w = rng.standard_normal((8, 16)).astype(dtype)
        f = lambda: ops.sum(ops.mul(block(x), w))  # noqa: E731
        if params:
            return finite_difference_check(f, block.parameters(), sample=6, rng=rng, **PARAM_FD)
        return finite_difference_check(f, x, eps=1e-5)


def _labels(rng, net: NetworkConfig, dtype) -> np.ndarray:
    return (rng.random((net.T, net.C)) < 0.3).astype(dtype)


def assistant_error(seed: int, net: NetworkConfig, loss: LossConfig, dtype=np.float32,
                    params: bool = False) -> float:
    with precision(dtype):
        rng = np.random.default_rng(seed)
        state = ModelState(net, seed).eval()
        g = _labels(rng, net, dtype)
        x = Tensor(g.copy())
        f = lambda: assistant_loss(state.assistant(x), g, loss)  # noqa: E731
        if params:
            return finite_difference_check(f, state.assistant_parameters(), sample=4, rng=rng,
                                           **PARAM_FD)
        return finite_difference_check(f, x, eps=1e-4)


def core_error(seed: int, net: NetworkConfig, loss: LossConfig, dtype=np.float32,
               params: bool = False) -> float:
    with precision(dtype):
        rng = np.random.default_rng(seed)
        state = ModelState(dataclasses.replace(net, assistant=False), seed).eval()
        x = Tensor(rng.standard_normal((net.T, net.D)).astype(dtype))
        g = _labels(rng, net, dtype)
        a_fine, a_coarse = net.fusion_weights()
        f = lambda: core_loss(state.core(x), g, loss, a_fine, a_coarse)  # noqa: E731
        if params:
            return finite_difference_check(f, state.core_parameters(), sample=4, rng=rng,
                                           **PARAM_FD)
        return finite_difference_check(f, x, eps=1e-4)


def _timed(fn: Callable[[], float]) -> tuple[float, float]:
    t0 = time.perf_counter()
    value = fn()
    return value, time.perf_counter() - t0


def run_suite(net: NetworkConfig | None = None, loss: LossConfig | None = None,
              seeds: Iterable[int] = range(20), double: bool = True) -> list[CheckResult]:
    seeds = list(seeds)
    small = composite_network(net)
    loss = loss or LossConfig()
    results = []
    for name in OP_CASES:
        worst, dt = _timed(lambda: max(op_error(name, s, np.float32) for s in seeds))
        results.append(CheckResult(name, "op", "single", worst, SINGLE_TOL, dt))
        if double:
            worst, dt = _timed(lambda: max(op_error(name, s, np.float64) for s in seeds))
            results.append(CheckResult(name, "op", "double", worst, DOUBLE_TOL, dt))
    # composites: inputs in single precision; parameters in double, where
    # coordinates far below the tensor's largest gradient are still resolved
    composites = [("rpt_block", rpt_block_error, (), SINGLE_TOL, PARAM_BLOCK_TOL),
                  ("assistant", assistant_error, (loss,), COMPOSITE_TOL, PARAM_DEEP_TOL),
                  ("core", core_error, (loss,), COMPOSITE_TOL, PARAM_DEEP_TOL)]
    for name, fn, extra, in_tol, param_tol in composites:
        worst, dt = _timed(lambda: max(fn(s, small, *extra) for s in seeds))
        results.append(CheckResult(f"{name}/input", "composite", "single", worst, in_tol, dt))
        worst, dt = _timed(lambda: max(fn(s, small, *extra, dtype=np.float64, params=True)
                                       for s in seeds))
        results.append(CheckResult(f"{name}/params", "composite", "double", worst, param_tol, dt))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<22}{'kind':<11}{'prec':<8}{'max rel err':>13}{'tol':>9}"
             f"{'sec':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<22}{r.kind:<11}{r.precision:<8}{r.worst:>13.3e}"
                     f"{r.tolerance:>9.0e}{r.seconds:>8.2f}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
