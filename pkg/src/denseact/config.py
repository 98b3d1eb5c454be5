"""Run configuration: network, training, loss, data and evaluation sections."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .branches import PAPER_NETWORK, NetworkConfig
from .data import SyntheticSpec
from .errors import ConfigurationError
from .losses import LossConfig
from .trainloop import CHARADES_TRAIN, TrainConfig

PROFILES = ("desk", "paper")
SECTIONS = ("network", "train", "loss", "data", "eval")


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    synthetic: dict | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigurationError("data needs exactly one of 'manifest' or 'synthetic'")
        if self.synthetic is not None:
            SyntheticSpec.from_dict(dict(self.synthetic))

    def spec(self) -> SyntheticSpec:
        if self.synthetic is None:
            raise ConfigurationError("data section has no synthetic spec")
        return SyntheticSpec.from_dict(dict(self.synthetic))


@dataclass(frozen=True)
class EvalConfig:
    taus: tuple = (0,)
    threshold: float = 0.5
    split: str = "test"

    def __post_init__(self):
        object.__setattr__(self, "taus", tuple(int(t) for t in self.taus))
        if any(t < 0 for t in self.taus):
            raise ConfigurationError("taus must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold must lie in (0, 1)")
        if self.split not in ("train", "test", "all"):
            raise ConfigurationError(f"unknown split {self.split!r}")


def _build(cls, d: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigurationError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigurationError(f"{section}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=lambda: DataConfig(synthetic={}))
    eval: EvalConfig = field(default_factory=EvalConfig)
    profile: str = "desk"

    @classmethod
    def from_dict(cls, doc: dict, profile: str = "desk") -> RunConfig:
        if profile not in PROFILES:
            raise ConfigurationError(f"profile must be one of {PROFILES}")
        if not isinstance(doc, dict):
            raise ConfigurationError("run config must be a mapping")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        for name in SECTIONS:
            if not isinstance(doc.get(name, {}), dict):
                raise ConfigurationError(f"section {name!r} must be a mapping")
        net = dict(PAPER_NETWORK) if profile == "paper" else {}
        train = dict(CHARADES_TRAIN) if profile == "paper" else {}
        net.update(doc.get("network", {}))
        train.update(doc.get("train", {}))
        data = doc.get("data", {"synthetic": {}})
        return cls(network=_build(NetworkConfig, net, "network"),
                   train=_build(TrainConfig, train, "train"),
                   loss=_build(LossConfig, doc.get("loss", {}), "loss"),
                   data=_build(DataConfig, data, "data"),
                   eval=_build(EvalConfig, doc.get("eval", {}), "eval"),
                   profile=profile)

    def to_dict(self) -> dict:
        return {"profile": self.profile,
                "network": self.network.to_dict(),
                "train": dataclasses.asdict(self.train),
                "loss": dataclasses.asdict(self.loss),
                "data": dataclasses.asdict(self.data),
                "eval": {**dataclasses.asdict(self.eval), "taus": list(self.eval.taus)}}

    def replace(self, **sections) -> RunConfig:
        """Apply per-section deltas, e.g. ``replace(network={"F": 1})``."""
        doc = self.to_dict()
        profile = doc.pop("profile")
        for name, delta in sections.items():
            if name not in SECTIONS:
                raise ConfigurationError(f"unknown config section {name!r}")
            doc[name] = {**doc[name], **delta}
        # the profile base was already folded into the stored values
        return RunConfig.from_dict(doc, "desk")._with_profile(profile)

    def _with_profile(self, profile: str) -> RunConfig:
        return dataclasses.replace(self, profile=profile)

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))


def load_run_config(path, profile: str = "desk") -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    cfg = RunConfig.from_dict(doc or {}, profile)
    if cfg.data.manifest is not None and not Path(cfg.data.manifest).is_absolute():
        manifest = str((path.parent / cfg.data.manifest).resolve())
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, manifest=manifest))
    return cfg


def write_config_echo(out_dir, cfg: RunConfig, command: str, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **(extra or {}), "config": cfg.to_dict()}
    path = out / "run_config.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
