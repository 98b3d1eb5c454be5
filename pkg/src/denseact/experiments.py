"""Train/evaluate drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .branches import ModelState
from .config import RunConfig
from .data import Video, generate_synthetic, load_manifest
from .errors import ConfigurationError, ConsistencyError
from .evaluation import per_frame_map
from .trainloop import Trainer, predict_videos

# axis -> [(variant, {section: delta})]
ABLATION_AXES: dict[str, list[tuple[str, dict]]] = {
    "branches": [(f"F={f}", {"network": {"F": f}}) for f in (1, 2, 3, 4)],
    "structure": [("non-hierarchical", {"network": {"coarse_wiring": "non-hierarchical"}}),
                  ("hierarchical", {"network": {"coarse_wiring": "hierarchical"}})],
    "positional": [(p, {"network": {"positional": p}}) for p in ("none", "absolute", "relative")],
    "assistant": [("with assistant", {"network": {"assistant": True}}),
                  ("without assistant", {"network": {"assistant": False}})],
    "loss": [("asymmetric", {"loss": {"variant": "asymmetric"}}),
             ("bce", {"loss": {"variant": "bce"}})],
    "detectors": [("fine+coarse", {"network": {"use_fine": True, "use_coarse": True}}),
                  ("fine only", {"network": {"use_fine": True, "use_coarse": False}}),
                  ("coarse only", {"network": {"use_fine": False, "use_coarse": True}}),
                  ("neither", {"network": {"use_fine": False, "use_coarse": False}})],
    "coarse_input": [("fine features", {"network": {"coarse_input": "fine"}}),
                     ("raw tokens", {"network": {"coarse_input": "tokens"}})],
}

# overfit check: short videos, clean features
OVERFIT_CORPUS = dict(num_videos=20, t_min=64, t_max=64, C=8, D=32, max_concurrency=3,
                      noise_sigma=0.05, test_fraction=0.2,
                      co_occurrence_pairs=[[0, 3, 0.8], [1, 4, 0.6]])

# directional ablations: videos longer than the training clip, faint long
# actions that only become visible when integrated over many steps
ABLATION_CORPUS = dict(num_videos=24, t_min=128, t_max=192, C=8, D=32, max_concurrency=3,
                       noise_sigma=1.0, test_fraction=0.25, events_per_class=1.5,
                       duration_ranges=[[2, 6], [8, 16], [24, 48], [2, 6], [8, 16], [24, 48],
                                        [4, 10], [32, 64]],
                       co_occurrence_pairs=[[0, 3, 0.8], [1, 4, 0.6]])


def load_videos(cfg: RunConfig) -> list[Video]:
    """Videos named by the data section; checked against the network's D and C."""
    if cfg.data.manifest is not None:
        ds = load_manifest(cfg.data.manifest)
        videos, d, c = ds.videos, ds.D, ds.C
    else:
        spec = cfg.data.spec()
        videos, d, c = generate_synthetic(spec, cfg.data.seed), spec.D, spec.C
    if videos and (d != cfg.network.D or c != cfg.network.C):
        raise ConsistencyError(f"dataset has D={d}, C={c} but the network expects "
                               f"D={cfg.network.D}, C={cfg.network.C}")
    return videos


def split_videos(videos: list[Video], split: str) -> list[Video]:
    return list(videos) if split == "all" else [v for v in videos if v.split == split]


def train_model(cfg: RunConfig, videos: list[Video], on_step=None) -> tuple[Trainer, list[dict]]:
    train = split_videos(videos, "train")
    if not train:
        raise ConfigurationError("no videos in the train split")
    trainer = Trainer(ModelState(cfg.network, cfg.train.seed), cfg.train, cfg.loss)
    history = trainer.fit(train, on_step)
    return trainer, history


def split_map(state: ModelState, videos: list[Video]) -> float | None:
    if not videos:
        return None
    pred, gt = predict_videos(videos, state)
    return per_frame_map(pred, gt).per_frame_map


@dataclass
class VariantResult:
    variant: str
    seed: int
    train_map: float | None
    test_map: float | None
    steps: int
    seconds: float


def run_variant(cfg: RunConfig, name: str = "base", videos: list[Video] | None = None
                ) -> VariantResult:
    t0 = time.perf_counter()
    videos = load_videos(cfg) if videos is None else videos
    trainer, history = train_model(cfg, videos)
    state = trainer.state
    return VariantResult(name, cfg.train.seed, split_map(state, split_videos(videos, "train")),
                         split_map(state, split_videos(videos, "test")), len(history),
                         time.perf_counter() - t0)


def ablate(cfg: RunConfig, axis: str, seeds=(0, 1, 2), on_result=None) -> list[VariantResult]:
    """Variants run one after another; seed k trains on the same corpus for every variant."""
    if axis not in ABLATION_AXES:
        raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from "
                                 f"{sorted(ABLATION_AXES)}")
    results = []
    for seed in seeds:
        for name, delta in ABLATION_AXES[axis]:
            variant = cfg.replace(**delta).with_seed(seed)
            res = run_variant(variant, name)
            results.append(res)
            if on_result is not None:
                on_result(res)
    return results


def summarize(results: list[VariantResult]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for r in results:
        row = out.setdefault(r.variant, {"test": [], "train": [], "seconds": 0.0})
        row["test"].append(r.test_map)
        row["train"].append(r.train_map)
        row["seconds"] += r.seconds
    for row in out.values():
        tests = [x for x in row["test"] if x is not None]
        row["mean_test"] = float(np.mean(tests)) if tests else None
        row["std_test"] = float(np.std(tests)) if tests else None
    return out


def format_summary(axis: str, summary: dict[str, dict]) -> str:
    lines = [f"ablation axis: {axis}", f"{'variant':<20}{'mean test mAP':>15}{'std':>9}"
             f"{'seconds':>10}  per-seed"]
    for name, row in summary.items():
        mean = "n/a" if row["mean_test"] is None else f"{row['mean_test']:.4f}"
        std = "n/a" if row["std_test"] is None else f"{row['std_test']:.4f}"
        seeds = " ".join("n/a" if x is None else f"{x:.4f}" for x in row["test"])
        lines.append(f"{name:<20}{mean:>15}{std:>9}{row['seconds']:>10.1f}  {seeds}")
    return "\n".join(lines) + "\n"
