"""Asymmetric focal loss and the two branch objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ops
from .diffcore.tensor import ShapeError, Tensor, as_tensor
from .errors import ConfigurationError


@dataclass(frozen=True)
class LossConfig:
    gamma_plus: float = 1.0
    gamma_minus: float = 3.0
    clamp_eps: float = 1e-7
    variant: str = "asymmetric"

    def __post_init__(self):
        if not 0.0 < self.clamp_eps < 0.5:
            raise ConfigurationError("clamp_eps must lie in (0, 0.5)")
        if self.gamma_plus < 0 or self.gamma_minus < 0:
            raise ConfigurationError("focusing exponents must be >= 0")
        if self.variant not in ("asymmetric", "bce"):
            raise ConfigurationError(f"unknown loss variant {self.variant!r}")

    @property
    def exponents(self) -> tuple[float, float]:
        if self.variant == "bce":
            return 0.0, 0.0
        return self.gamma_plus, self.gamma_minus


def asl_scalar(g: float, y: float, cfg: LossConfig = LossConfig()) -> float:
    """Loss for one (label, probability) pair, in double precision."""
    gp, gm = cfg.exponents
    y = min(max(float(y), cfg.clamp_eps), 1.0 - cfg.clamp_eps)
    return -g * (1.0 - y) ** gp * np.log(y) - (1.0 - g) * y ** gm * np.log(1.0 - y)


def asl_elementwise(y: Tensor, g: np.ndarray, cfg: LossConfig) -> Tensor:
    """Per-entry loss tensor with the same shape as ``y``."""
    gp, gm = cfg.exponents
    g = np.asarray(g, dtype=y.dtype)
    yc = ops.clip(y, cfg.clamp_eps, 1.0 - cfg.clamp_eps)
    one_minus = ops.sub(1.0, yc)
    pos = ops.mul(ops.log(yc), ops.power(one_minus, gp) if gp else 1.0)
    neg = ops.mul(ops.log(one_minus), ops.power(yc, gm) if gm else 1.0)
    return ops.scale(ops.add(ops.mul(pos, g), ops.mul(neg, 1.0 - g)), -1.0)


def sequence_loss(y, labels, cfg: LossConfig, mask: np.ndarray | None = None) -> Tensor:
    """Sum over classes, mean over (unmasked) time steps."""
    y = as_tensor(y)
    labels = np.asarray(labels)
    if y.shape != labels.shape or y.ndim != 2:
        raise ShapeError(f"prediction shape {y.shape} does not match labels {labels.shape}")
    per = asl_elementwise(y, labels, cfg)
    if mask is None:
        return ops.scale(ops.sum(per), 1.0 / y.shape[0])
    mask = np.asarray(mask, dtype=y.dtype).reshape(-1, 1)
    steps = float(mask.sum())
    if steps == 0:
        raise ValueError("mask excludes every time step")
    return ops.scale(ops.sum(ops.mul(per, mask)), 1.0 / steps)


def assistant_loss(y_star, labels, cfg: LossConfig, mask=None) -> Tensor:
    return sequence_loss(y_star, labels, cfg, mask)


def core_loss(heads: dict, labels, cfg: LossConfig, alpha_fine: float, alpha_coarse: float,
              mask=None) -> Tensor:
    """alpha-weighted sum of per-head losses; an absent head contributes nothing."""
    total = None
    for key, alpha in (("fine", alpha_fine), ("coarse", alpha_coarse)):
        y = heads.get(key)
        if y is None or alpha == 0.0:
            continue
        term = ops.scale(sequence_loss(y, labels, cfg, mask), alpha)
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ConfigurationError("no prediction head carries positive weight")
    return total
