"""Relative positional transformer (RPT) block.

Multi-head self-attention whose logits carry a query-dependent relative
position bias, followed by the local relational (LR) stack.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ops
from .diffcore.nn import Conv1d, LayerNorm, Linear, Module
from .diffcore.tensor import Parameter, ShapeError, Tensor, default_dtype

POSITIONAL_MODES = ("relative", "absolute", "none")
ACTIVATIONS = {"gelu": ops.gelu, "relu": ops.relu}


@dataclass(frozen=True)
class RptConfig:
    model_dim: int = 512
    heads: int = 8
    r_clip: int = 128
    dropout_rate: float = 0.1
    positional: str = "relative"
    activation: str = "gelu"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.r_clip < 0:
            raise ValueError("r_clip must be >= 0")
        if self.positional not in POSITIONAL_MODES:
            raise ValueError(f"positional must be one of {POSITIONAL_MODES}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


class RelativeEmbeddingTable(Module):
    """Per-head embeddings indexed by clipped relative offset.

    ``omega[h, clamp(delta, -r_clip, r_clip) + r_clip]`` holds the
    ``head_dim`` values for offset ``delta = n - m``.
    """

    def __init__(self, heads: int, head_dim: int, r_clip: int, rng: np.random.Generator):
        self.r_clip = r_clip
        std = 1.0 / np.sqrt(head_dim)
        self.omega = Parameter(
            (rng.standard_normal((heads, 2 * r_clip + 1, head_dim)) * std).astype(default_dtype()))

    def index(self, delta):
        return np.clip(delta, -self.r_clip, self.r_clip) + self.r_clip


def _offset_index(n: int, r_clip: int) -> np.ndarray:
    delta = np.arange(n)[:, None] - np.arange(n)[None, :]
    return np.clip(delta, -r_clip, r_clip) + r_clip


def relative_bias_direct(q: Tensor, omega: Tensor, r_clip: int) -> Tensor:
    """Reference bias ``P[n, m] = sum_d q[n, d] * omega[clamp(n - m), d]``.

    ``q`` is ``[..., N, Dh]`` and ``omega`` is ``[..., 2*r_clip+1, Dh]`` with
    matching leading (head) axes. Materialises ``[..., N, N, Dh]``.
    """
    n = q.shape[-2]
    idx = _offset_index(n, r_clip)
    lead = q.shape[:-2]
    if lead:
        gathered = ops.getitem(omega, (slice(None),) * len(lead) + (idx,))
    else:
        gathered = ops.getitem(omega, idx)
    qe = ops.reshape(q, lead + (n, 1, q.shape[-1]))
    return ops.sum(ops.mul(qe, gathered), axis=-1)


def relative_bias_skewed(q: Tensor, omega: Tensor, r_clip: int) -> Tensor:
    """Same values as :func:`relative_bias_direct` via one product and a skew.

    ``E = q @ omega^T`` scores every query against every clipped offset
    (``[..., N, 2R+1]``). Columns are expanded to all ``2N-1`` offsets,
    ordered so column ``j`` is offset ``N-1-j``; padding one zero column,
    flattening, dropping the first ``N`` entries and re-folding then puts
    offset ``n - m`` at ``[n, m]``.
    """
    n = q.shape[-2]
    if q.shape[-1] != omega.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != embedding dim {omega.shape[-1]}")
    lead = q.shape[:-2]
    scores = ops.matmul(q, ops.transpose(omega, tuple(range(len(lead))) + (len(lead) + 1, len(lead))))
    if n == 1:
        return ops.take_last(scores, np.array([r_clip]))
    cols = np.clip(n - 1 - np.arange(2 * n - 1), -r_clip, r_clip) + r_clip
    full = ops.take_last(scores, cols)
    padded = ops.pad_last(full, 1)
    flat = ops.reshape(padded, lead + (2 * n * n,))
    shifted = ops.slice_last(flat, n, 2 * n * n)
    folded = ops.reshape(shifted, lead + (n, 2 * n - 1))
    return ops.slice_last(folded, 0, n)


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(default_dtype())


class RelativeSelfAttention(Module):
    """Pre-norm multi-head self-attention with relative bias and residual."""

    def __init__(self, cfg: RptConfig, rng: np.random.Generator,
                 table: RelativeEmbeddingTable | None = None):
        self.cfg = cfg
        d = cfg.model_dim
        self.norm = LayerNorm(d)
        self.query = Linear(d, d, rng, bias=False)
        self.key = Linear(d, d, rng, bias=False)
        self.value = Linear(d, d, rng, bias=False)
        self.out = Linear(d, d, rng, bias=False)
        if cfg.positional == "relative":
            self.table = table or RelativeEmbeddingTable(cfg.heads, cfg.head_dim, cfg.r_clip, rng)
        else:
            self.table = None

    def _heads(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return ops.transpose(ops.reshape(x, (n, self.cfg.heads, self.cfg.head_dim)), (1, 0, 2))

    def attention_weights(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (per-head attention rows ``[H, N, N]``, values ``[H, N, Dh]``)."""
        xn = self.norm(x)
        q = self._heads(self.query(xn))
        k = self._heads(self.key(xn))
        v = self._heads(self.value(xn))
        logits = ops.matmul(q, ops.transpose(k, (0, 2, 1)))
        if self.table is not None:
            logits = ops.add(logits, relative_bias_skewed(q, self.table.omega, self.table.r_clip))
        logits = ops.scale(logits, 1.0 / np.sqrt(self.cfg.head_dim))
        return ops.softmax(logits), v

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.cfg.model_dim:
            raise ShapeError(f"attention expects [N, {self.cfg.model_dim}], got {x.shape}")
        att, v = self.attention_weights(x)
        heads = ops.matmul(att, v)
        n = x.shape[0]
        merged = ops.reshape(ops.transpose(heads, (1, 0, 2)), (n, self.cfg.model_dim))
        return ops.add(self.out(merged), x)


class LocalRelational(Module):
    """Nrm, Linear, Conv(k=3), act, Drp, Linear, Drp with a residual around the stack."""

    def __init__(self, cfg: RptConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.cfg = cfg
        self.norm = LayerNorm(d)
        self.fc1 = Linear(d, d, rng)
        self.conv = Conv1d(d, d, 3, rng, stride=1, padding=1)
        self.fc2 = Linear(d, d, rng)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        rate, training = self.cfg.dropout_rate, self.training
        h = self.conv(self.fc1(self.norm(x)))
        h = ACTIVATIONS[self.cfg.activation](h)
        h = ops.dropout(h, rate, training, rng)
        h = ops.dropout(self.fc2(h), rate, training, rng)
        return ops.add(h, x)


class RptBlock(Module):
    def __init__(self, cfg: RptConfig, rng: np.random.Generator,
                 table: RelativeEmbeddingTable | None = None):
        self.attn = RelativeSelfAttention(cfg, rng, table)
        self.lr = LocalRelational(cfg, rng)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return self.lr(self.attn(x), rng)


class RptStack(Module):
    """``blocks`` RPT blocks applied in sequence; optionally one shared Ω table."""

    def __init__(self, cfg: RptConfig, blocks: int, rng: np.random.Generator,
                 share_table: bool = False):
        shared = None
        if share_table and cfg.positional == "relative":
            shared = RelativeEmbeddingTable(cfg.heads, cfg.head_dim, cfg.r_clip, rng)
        self.blocks = [RptBlock(cfg, rng, shared) for _ in range(blocks)]

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, rng)
        return x


# functional aliases mirroring the operation names
def mhsa_relative(x: Tensor, attn: RelativeSelfAttention) -> Tensor:
    return attn(x)


def lr_component(x: Tensor, lr: LocalRelational, training: bool,
                 rng: np.random.Generator | None = None) -> Tensor:
    lr.train(training)
    return lr(x, rng)


def rpt_block(x: Tensor, block: RptBlock, training: bool,
              rng: np.random.Generator | None = None) -> Tensor:
    block.train(training)
    return block(x, rng)
