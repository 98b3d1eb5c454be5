"""Two-branch training: Assistant step, classifier copy, Core step with the
copied classifier frozen."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .branches import ModelState
from .data import Video
from .diffcore import ops
from .diffcore.tensor import Parameter, Tensor, first_nonfinite_op, no_grad
from .errors import ConfigurationError, NumericalError
from .losses import LossConfig, assistant_loss, core_loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 125
    batch_size: int = 1
    lr_initial: float = 1e-3
    lr_decay_factor: float = 10.0
    lr_decay_every_epochs: int = 100
    seed: int = 0
    max_steps: int | None = None
    profile: str = "desk"

    def __post_init__(self):
        if self.lr_initial <= 0:
            raise ConfigurationError("lr_initial must be > 0")
        if self.lr_decay_factor <= 1:
            raise ConfigurationError("lr_decay_factor must be > 1")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every_epochs < 1:
            raise ConfigurationError("epochs, batch_size and lr_decay_every_epochs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


CHARADES_TRAIN = dict(epochs=25, batch_size=3, lr_initial=1e-4, lr_decay_factor=10.0,
                      lr_decay_every_epochs=7, profile="paper")
MULTITHUMOS_TRAIN = dict(epochs=300, batch_size=3, lr_initial=1e-4, lr_decay_factor=10.0,
                         lr_decay_every_epochs=130, profile="paper")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Step decay; epochs are 1-based."""
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    return cfg.lr_initial / cfg.lr_decay_factor ** ((epoch - 1) // cfg.lr_decay_every_epochs)


class Adam:
    """Adam with bias correction. Frozen parameters are skipped and never
    get moment buffers."""

    def __init__(self, params: Iterable[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if p.frozen:
                self.m.pop(p.name, None)
                self.v.pop(p.name, None)
                continue
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for k, a in self.m.items():
            out[f"m/{k}"] = a
        for k, a in self.v.items():
            out[f"v/{k}"] = a
        return out

    def load_state_dict(self, d: dict) -> None:
        self.t = int(d["t"])
        self.m = {k[2:]: np.array(a) for k, a in d.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(a) for k, a in d.items() if k.startswith("v/")}


def adam_step(opt: Adam, lr: float) -> None:
    opt.step(lr)


@dataclass
class Clip:
    tokens: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    offset: int


def sample_clip(video: Video, T: int, rng: np.random.Generator) -> Clip:
    """Uniform random window of ``T`` consecutive tokens with aligned labels.

    Shorter videos are right-padded with zero features/labels and masked.
    """
    tokens, labels = video.features.tokens, video.labels.labels
    n = tokens.shape[0]
    if n >= T:
        offset = int(rng.integers(0, n - T + 1))
        return Clip(tokens[offset:offset + T], labels[offset:offset + T].astype(np.float32),
                    np.ones(T, dtype=bool), offset)
    pad = T - n
    return Clip(np.pad(tokens, ((0, pad), (0, 0))),
                np.pad(labels, ((0, pad), (0, 0))).astype(np.float32),
                np.arange(T) < n, 0)


class Trainer:
    """Owns the model, the two optimizers and the dropout/sampling streams."""

    def __init__(self, state: ModelState, train_cfg: TrainConfig, loss_cfg: LossConfig):
        self.state = state
        self.cfg = train_cfg
        self.loss_cfg = loss_cfg
        self.rng = np.random.default_rng(train_cfg.seed + 1)
        self.assistant_opt = Adam(state.assistant_parameters())
        self.core_opt = Adam(state.core_parameters())
        self.step_count = 0
        self.epoch = 0

    # ---------------------------------------------------------------- step
    def _check(self, loss: Tensor, what: str) -> float:
        value = float(loss.data)
        if not np.isfinite(value):
            op = first_nonfinite_op(loss)
            raise NumericalError(f"{what} loss is non-finite; first offending op: {op}")
        return value

    def train_step(self, batch: list[Clip], lr: float) -> tuple[float, float]:
        state, net = self.state, self.state.cfg
        state.train()
        inv = 1.0 / len(batch)
        la = 0.0
        if net.assistant:
            self.assistant_opt.zero_grad()
            for clip in batch:
                y_star = state.assistant(Tensor(clip.labels), self.rng)
                loss = assistant_loss(y_star, clip.labels, self.loss_cfg, clip.mask)
                la += self._check(loss, "assistant") * inv
                ops.scale(loss, inv).backward()
            self.assistant_opt.step(lr)
            state.copy_classifier_params()
        self.core_opt.zero_grad()
        a_fine, a_coarse = net.fusion_weights()
        lc = 0.0
        for clip in batch:
            heads = state.core(Tensor(clip.tokens), self.rng)
            loss = core_loss(heads, clip.labels, self.loss_cfg, a_fine, a_coarse, clip.mask)
            lc += self._check(loss, "core") * inv
            ops.scale(loss, inv).backward()
        self.core_opt.step(lr)
        if net.assistant and not state.classifier_matches_snapshot():
            raise AssertionError("frozen Vid-CLAS parameters changed during the Core step")
        self.step_count += 1
        return la, lc

    # --------------------------------------------------------------- epochs
    def fit(self, videos: list[Video], on_step: Callable[[dict], None] | None = None) -> list[dict]:
        if not videos:
            raise ConfigurationError("no training videos")
        T = self.state.cfg.T
        history = []
        bs = self.cfg.batch_size
        for epoch in range(self.epoch + 1, self.cfg.epochs + 1):
            self.epoch = epoch
            lr = lr_at_epoch(epoch, self.cfg)
            order = self.rng.permutation(len(videos))
            for start in range(0, len(order), bs):
                if self.cfg.max_steps is not None and self.step_count >= self.cfg.max_steps:
                    return history
                t0 = time.perf_counter()
                batch = [sample_clip(videos[i], T, self.rng) for i in order[start:start + bs]]
                la, lc = self.train_step(batch, lr)
                rec = {"epoch": epoch, "step": self.step_count, "lr": lr,
                       "assistant_loss": la, "core_loss": lc,
                       "wall_ms": round((time.perf_counter() - t0) * 1e3, 3)}
                history.append(rec)
                if on_step is not None:
                    on_step(rec)
        return history


def train_step(batch: list[Clip], trainer: Trainer, lr: float) -> tuple[float, float]:
    return trainer.train_step(batch, lr)


def infer_full_sequence(tokens: np.ndarray, state: ModelState) -> np.ndarray:
    """Fused per-token probabilities for a whole video in one pass.

    Right-pads with zero tokens to a multiple of ``2**F`` for the coarse
    branches and trims the result back to the input length.
    """
    tokens = np.asarray(tokens, dtype=np.float32)
    n = tokens.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 tokens, got {n}")
    unit = 2 ** state.cfg.F if state.cfg.use_coarse else 1
    padded = -(-n // unit) * unit
    if padded != n:
        tokens = np.pad(tokens, ((0, padded - n), (0, 0)))
    was_training = state.training
    state.eval()
    try:
        with no_grad():
            y = state.predict(tokens).data
    finally:
        state.train(was_training)
    return np.asarray(y[:n])


def predict_videos(videos: list[Video], state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Stack full-sequence predictions and labels over ``videos``."""
    preds = [infer_full_sequence(v.features.tokens, state) for v in videos]
    labels = [v.labels.labels for v in videos]
    return np.concatenate(preds), np.concatenate(labels)


def write_log(path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
