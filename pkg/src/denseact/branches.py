"""Assistant and Core branches, the classifier copy-and-freeze, and checkpoints."""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import ops
from .diffcore.nn import Conv1d, LayerNorm, Module
from .diffcore.tensor import Parameter, SequenceTooShortError, Tensor, as_tensor, no_grad
from .errors import ConfigurationError, FormatError
from .rpt import RptConfig, RptStack, sinusoidal_encoding

WIRINGS = ("non-hierarchical", "hierarchical")
COARSE_INPUTS = ("fine", "tokens")


@dataclass(frozen=True)
class NetworkConfig:
    T: int = 64
    D: int = 32
    C: int = 8
    C_star: int = 16
    D_star: int = 16
    B: int = 2
    H: int = 4
    F: int = 3
    alpha_fine: float = 0.5
    alpha_coarse: float = 0.5
    r_clip: int = 32
    dropout_rate: float = 0.1
    positional: str = "relative"
    activation: str = "gelu"
    share_omega: bool = False
    coarse_wiring: str = "non-hierarchical"
    coarse_input: str = "fine"
    use_fine: bool = True
    use_coarse: bool = True
    assistant: bool = True

    def __post_init__(self):
        if self.C_star != self.D_star:
            raise ConfigurationError(
                f"C_star ({self.C_star}) must equal D_star ({self.D_star}) for the classifier copy")
        if abs(self.alpha_fine + self.alpha_coarse - 1.0) > 1e-9:
            raise ConfigurationError(
                f"alpha_fine + alpha_coarse must be 1, got {self.alpha_fine + self.alpha_coarse}")
        if min(self.alpha_fine, self.alpha_coarse) < 0:
            raise ConfigurationError("fusion weights must be nonnegative")
        if self.F < 1 or self.B < 0:
            raise ConfigurationError("F must be >= 1 and B >= 0")
        if self.T % (2 ** self.F):
            raise ConfigurationError(f"T={self.T} must be a multiple of 2^F={2 ** self.F}")
        if self.coarse_wiring not in WIRINGS:
            raise ConfigurationError(f"coarse_wiring must be one of {WIRINGS}")
        if self.coarse_input not in COARSE_INPUTS:
            raise ConfigurationError(f"coarse_input must be one of {COARSE_INPUTS}")
        try:
            self.rpt()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None

    def rpt(self) -> RptConfig:
        return RptConfig(model_dim=self.D_star, heads=self.H, r_clip=self.r_clip,
                         dropout_rate=self.dropout_rate, positional=self.positional,
                         activation=self.activation)

    def fusion_weights(self) -> tuple[float, float]:
        """Effective (fine, coarse) weights given which heads exist."""
        if self.use_fine and self.use_coarse:
            return self.alpha_fine, self.alpha_coarse
        if self.use_coarse:
            return 0.0, 1.0
        return 1.0, 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)


PAPER_NETWORK = dict(T=256, D=1024, C=157, C_star=512, D_star=512, B=3, H=8, F=3,
                     alpha_fine=0.1, alpha_coarse=0.9, r_clip=128)


def _require_length(t: int, minimum: int, what: str) -> None:
    if t < minimum:
        raise SequenceTooShortError(f"{what} needs at least {minimum} steps, got {t}")


class Stage(Module):
    """Entry conv (k=3, given stride), Nrm, then B RPT blocks."""

    def __init__(self, c_in: int, cfg: NetworkConfig, rng: np.random.Generator,
                 stride: int = 1, input_stage: bool = False):
        self.entry = Conv1d(c_in, cfg.D_star, 3, rng, stride=stride, padding=1)
        self.norm = LayerNorm(cfg.D_star)
        self.rpt = RptStack(cfg.rpt(), cfg.B, rng, share_table=cfg.share_omega)
        # absolute encodings are added once, where tokens enter a branch
        self.add_absolute = input_stage and cfg.positional == "absolute"

    def embed(self, x: Tensor) -> Tensor:
        h = self.norm(self.entry(x))
        if self.add_absolute:
            h = ops.add(h, sinusoidal_encoding(h.shape[0], h.shape[1]))
        return h

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        return self.rpt(self.embed(x), rng)


class AssistantBranch(Module):
    """ML-Rel (Δ conv, Nrm, RPT stack) and ML-CLAS (k=1 classifier)."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.ml_rel = Stage(cfg.C, cfg, rng, input_stage=True)
        self.ml_clas = Conv1d(cfg.C_star, cfg.C, 1, rng, padding=0)

    def relations(self, labels: Tensor, rng=None) -> Tensor:
        _require_length(labels.shape[0], 3, "ML-Rel")
        return self.ml_rel(labels, rng)

    def __call__(self, labels: Tensor, rng=None) -> Tensor:
        return ops.sigmoid(self.ml_clas(self.relations(labels, rng)))


class GranularityBranch(Stage):
    pass


class CoreBranch(Module):
    """Fine-Det, Coarse-Det (F granularity branches) and Vid-CLAS."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        direct = not cfg.use_fine and not cfg.use_coarse
        if direct:
            # both detectors ablated: raw tokens -> k=1 projection -> classifier
            self.project = Conv1d(cfg.D, cfg.D_star, 1, rng, padding=0)
        else:
            self.fine_entry = Conv1d(cfg.D, cfg.D_star, 3, rng, stride=1, padding=1)
            self.fine_norm = LayerNorm(cfg.D_star)
            if cfg.use_fine:
                self.fine_rpt = RptStack(cfg.rpt(), cfg.B, rng, share_table=cfg.share_omega)
        if cfg.use_coarse:
            c_in = cfg.D if cfg.coarse_input == "tokens" else cfg.D_star
            self.coarse = []
            for i in range(1, cfg.F + 1):
                if cfg.coarse_wiring == "hierarchical":
                    stride, width = 2, (c_in if i == 1 else cfg.D_star)
                else:
                    stride, width = 2 ** i, c_in
                self.coarse.append(GranularityBranch(width, cfg, rng, stride=stride))
        self.vid_clas = Conv1d(cfg.D_star, cfg.C, 1, rng, padding=0)

    # -- Fine-Det
    def fine(self, tokens: Tensor, rng=None) -> Tensor:
        _require_length(tokens.shape[0], 3, "Fine-Det")
        h = self.fine_norm(self.fine_entry(tokens))
        if self.cfg.positional == "absolute":
            h = ops.add(h, sinusoidal_encoding(h.shape[0], h.shape[1]))
        if self.cfg.use_fine:
            h = self.fine_rpt(h, rng)
        return h

    # -- Coarse-Det
    def coarse_branches(self, fine: Tensor, rng=None) -> list[Tensor]:
        """Pre-sum outputs of each granularity branch, lengths T / 2^i."""
        t = fine.shape[0]
        _require_length(t, 2 ** self.cfg.F, "Coarse-Det")
        outputs = []
        x = fine
        for branch in self.coarse:
            y = branch(x if self.cfg.coarse_wiring == "hierarchical" else fine, rng)
            outputs.append(y)
            x = y
        return outputs

    def coarse_features(self, fine: Tensor, rng=None) -> Tensor:
        t = fine.shape[0]
        total = None
        for y in self.coarse_branches(fine, rng):
            up = ops.upsample_linear(y, t)
            total = up if total is None else ops.add(total, up)
        return total

    # -- Vid-CLAS
    def classify(self, features: Tensor) -> Tensor:
        return ops.sigmoid(self.vid_clas(features))

    def __call__(self, tokens: Tensor, rng=None) -> dict[str, Tensor]:
        """Per-head probabilities: ``{"fine": Y_fine, "coarse": Y_coarse}``
        (a head is absent when its detector is ablated)."""
        cfg = self.cfg
        if not cfg.use_fine and not cfg.use_coarse:
            return {"fine": self.classify(self.project(tokens))}
        heads = {}
        fine = self.fine(tokens, rng)
        if cfg.use_fine:
            heads["fine"] = self.classify(fine)
        if cfg.use_coarse:
            src = tokens if cfg.coarse_input == "tokens" else fine
            heads["coarse"] = self.classify(self.coarse_features(src, rng))
        return heads


def fuse_predictions(y_fine, y_coarse, alpha_fine: float, alpha_coarse: float) -> Tensor:
    """Weighted sum of the two heads; weights must sum to one."""
    if abs(alpha_fine + alpha_coarse - 1.0) > 1e-9:
        raise ConfigurationError(f"fusion weights must sum to 1, got {alpha_fine + alpha_coarse}")
    if y_coarse is None or alpha_coarse == 0.0:
        return as_tensor(y_fine) if alpha_fine == 1.0 else ops.scale(y_fine, alpha_fine)
    if y_fine is None or alpha_fine == 0.0:
        return as_tensor(y_coarse) if alpha_coarse == 1.0 else ops.scale(y_coarse, alpha_coarse)
    return ops.add(ops.scale(y_fine, alpha_fine), ops.scale(y_coarse, alpha_coarse))


class ModelState(Module):
    """Both branches plus the classifier copy/freeze bookkeeping."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.assistant = AssistantBranch(cfg, rng)
        self.core = CoreBranch(cfg, rng)
        self.assign_names()
        self.copy_snapshot: dict[str, np.ndarray] | None = None
        if cfg.assistant:
            self.copy_classifier_params()

    def assistant_parameters(self) -> list[Parameter]:
        return self.assistant.parameters()

    def core_parameters(self) -> list[Parameter]:
        return self.core.parameters()

    def classifier_pairs(self) -> list[tuple[Parameter, Parameter]]:
        src, dst = self.assistant.ml_clas, self.core.vid_clas
        return [(src.kernel, dst.kernel), (src.bias, dst.bias)]

    def copy_classifier_params(self) -> None:
        """Overwrite Vid-CLAS with ML-CLAS values and freeze it."""
        snapshot = {}
        for src, dst in self.classifier_pairs():
            if src.shape != dst.shape:
                raise ConfigurationError(
                    f"classifier shapes differ: {src.name} {src.shape} vs {dst.name} {dst.shape}")
            dst.data = src.data.copy()
            dst.frozen = True
            dst.grad = None
            snapshot[dst.name] = dst.data.copy()
        self.copy_snapshot = snapshot

    def classifier_matches_snapshot(self) -> bool:
        if self.copy_snapshot is None:
            return False
        return all(np.array_equal(p.data, self.copy_snapshot[p.name])
                   for _, p in self.classifier_pairs())

    def predict(self, tokens, rng=None) -> Tensor:
        heads = self.core(as_tensor(tokens), rng)
        a_fine, a_coarse = self.cfg.fusion_weights()
        return fuse_predictions(heads.get("fine"), heads.get("coarse"), a_fine, a_coarse)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


# functional entry points named after the operations
def ml_rel_forward(labels, state: ModelState, rng=None) -> Tensor:
    return state.assistant.relations(as_tensor(labels), rng)


def ml_clas_forward(g_hat, state: ModelState) -> Tensor:
    return ops.sigmoid(state.assistant.ml_clas(as_tensor(g_hat)))


def fine_det_forward(tokens, state: ModelState, rng=None) -> Tensor:
    return state.core.fine(as_tensor(tokens), rng)


def coarse_det_forward(fine, state: ModelState, rng=None) -> Tensor:
    return state.core.coarse_features(as_tensor(fine), rng)


def vid_clas_forward(features, state: ModelState) -> Tensor:
    return state.core.classify(as_tensor(features))


def copy_classifier_params(state: ModelState) -> None:
    state.copy_classifier_params()


# ------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"DADC"
CKPT_VERSION = 1


def write_checkpoint(path, state: ModelState, meta: dict | None = None) -> None:
    """Serialise parameters and config; layout documented in the README."""
    header = json.dumps({"network": state.cfg.to_dict(), "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(header)))
    buf.write(header)
    params = list(state.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", int(p.frozen), p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, bool]]:
    """Return (header dict, name -> array, name -> frozen)."""
    blob = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes", pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, hlen = struct.unpack("<HI", take(6))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays, frozen = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        fz, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        frozen[name] = bool(fz)
    if pos != len(blob):
        raise FormatError("trailing bytes after checkpoint payload", pos)
    return header, arrays, frozen


def load_model(path) -> tuple[ModelState, dict]:
    header, arrays, frozen = read_checkpoint(path)
    cfg = NetworkConfig.from_dict(header["network"])
    with no_grad():
        state = ModelState(cfg)
    params = dict(state.named_parameters())
    if set(params) != set(arrays):
        raise FormatError(f"checkpoint parameters do not match network: "
                          f"{sorted(set(params) ^ set(arrays))[:5]}")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise FormatError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data = arrays[name].copy()
        p.frozen = frozen[name]
    if cfg.assistant:
        state.copy_snapshot = {dst.name: dst.data.copy() for _, dst in state.classifier_pairs()}
    return state, header.get("meta", {})
