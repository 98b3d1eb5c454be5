"""``denseact`` command line: gen-data, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 validation error, 2 runtime or numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradsuite
from .branches import ModelState, load_model, write_checkpoint
from .config import PROFILES, RunConfig, load_run_config, write_config_echo
from .data import generate_synthetic, load_manifest, save_dataset
from .diffcore.tensor import ShapeError
from .errors import ConfigurationError, ConsistencyError, FormatError, NumericalError
from .evaluation import evaluate
from .experiments import (ABLATION_AXES, ablate, format_summary, load_videos, split_videos,
                          summarize)
from .trainloop import Trainer, predict_videos

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ResumeMismatch(ConfigurationError):
    """Checkpoint was produced by a different configuration."""


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    return load_run_config(args.config, args.profile).with_seed(args.seed)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    spec = cfg.data.spec()
    out = _out_dir(args)
    videos = generate_synthetic(spec, args.seed)
    manifest = save_dataset(out, videos)
    load_manifest(manifest)  # what we wrote must read back
    stats = co_occurrence_stats(videos, spec)
    (out / "corpus_stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    write_config_echo(out, cfg, "gen-data", {"seed": args.seed})
    print(manifest)
    return EXIT_OK


def _runs(column: np.ndarray) -> list[tuple[int, int]]:
    edges = np.diff(np.concatenate([[0], column.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def co_occurrence_stats(videos, spec) -> dict:
    """Per pair, the fraction of class-i runs that class j covers completely.

    A partner is switched on over its anchor's whole interval, so this
    estimates the pair probability directly.
    """
    pairs = []
    for i, j, p in spec.co_occurrence_pairs:
        runs = covered = 0
        for v in videos:
            g = v.labels.labels
            for a, b in _runs(g[:, i]):
                runs += 1
                covered += int(g[a:b, j].all())
        pairs.append({"i": i, "j": j, "target": p, "runs": runs,
                      "observed": covered / runs if runs else None})
    grid = np.concatenate([v.labels.labels for v in videos]) if videos else np.zeros((0, spec.C))
    return {"videos": len(videos), "steps": int(grid.shape[0]),
            "max_concurrency": int(grid.sum(axis=1).max()) if len(grid) else 0,
            "pairs": pairs}


def _resume_meta(cfg: RunConfig, trainer: Trainer) -> dict:
    return {"run_config": cfg.to_dict(), "step": trainer.step_count, "epoch": trainer.epoch,
            "rng_state": trainer.rng.bit_generator.state}


def _comparable(doc: dict) -> dict:
    # how long to train may change on resume; nothing else may
    train = {k: v for k, v in doc["train"].items() if k not in ("epochs", "max_steps")}
    return {**doc, "train": train}


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    write_config_echo(out, cfg, "train", {"seed": args.seed, "resume": args.resume})
    videos = load_videos(cfg)
    train = split_videos(videos, "train")
    if not train:
        raise ConfigurationError("no videos in the train split")
    if args.resume:
        state, meta = load_model(args.resume)
        saved = meta.get("run_config")
        if saved is None or _comparable(saved) != _comparable(cfg.to_dict()):
            raise ResumeMismatch(f"{args.resume} was trained with a different configuration")
        trainer = Trainer(state, cfg.train, cfg.loss)
        trainer.step_count, trainer.epoch = meta["step"], meta["epoch"]
        trainer.rng.bit_generator.state = meta["rng_state"]
        opt = np.load(Path(args.resume).with_suffix(".opt.npz"))
        trainer.assistant_opt.load_state_dict(
            {k[len("assistant/"):]: opt[k] for k in opt.files if k.startswith("assistant/")})
        trainer.core_opt.load_state_dict(
            {k[len("core/"):]: opt[k] for k in opt.files if k.startswith("core/")})
    else:
        trainer = Trainer(ModelState(cfg.network, cfg.train.seed), cfg.train, cfg.loss)
    log_path = out / "train_log.jsonl"
    with open(log_path, "a" if args.resume else "w") as log:
        def on_step(rec):
            log.write(json.dumps(rec) + "\n")
        history = trainer.fit(train, on_step)
    ckpt = out / "model.ckpt"
    write_checkpoint(ckpt, trainer.state, _resume_meta(cfg, trainer))
    opt = {f"assistant/{k}": v for k, v in trainer.assistant_opt.state_dict().items()}
    opt.update({f"core/{k}": v for k, v in trainer.core_opt.state_dict().items()})
    with open(ckpt.with_suffix(".opt.npz"), "wb") as fh:
        np.savez(fh, **opt)
    last = history[-1]["core_loss"] if history else float("nan")
    print(f"trained {len(history)} steps (total {trainer.step_count}); last core loss {last:.4f}; "
          f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    write_config_echo(out, cfg, "eval", {"seed": args.seed, "checkpoint": args.checkpoint})
    state, _ = load_model(args.checkpoint)
    if args.manifest:
        cfg = RunConfig(state.cfg, cfg.train, cfg.loss,
                        type(cfg.data)(manifest=args.manifest), cfg.eval, cfg.profile)
    else:
        cfg = RunConfig(state.cfg, cfg.train, cfg.loss, cfg.data, cfg.eval, cfg.profile)
    videos = split_videos(load_videos(cfg), cfg.eval.split)
    if not videos:
        raise ConfigurationError(f"no videos in split {cfg.eval.split!r}")
    pred, gt = predict_videos(videos, state)
    report = evaluate(pred, gt, cfg.eval.taus, cfg.eval.threshold)
    report.write(out, "metrics")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    out = _out_dir(args) if args.out else None
    seeds = range(args.seed, args.seed + args.seeds)
    if args.corrupt:
        with gradsuite.corrupt_op(args.corrupt):
            results = gradsuite.run_suite(cfg.network, cfg.loss, seeds, double=not args.quick)
    else:
        results = gradsuite.run_suite(cfg.network, cfg.loss, seeds, double=not args.quick)
    table = gradsuite.format_table(results)
    print(table)
    if out is not None:
        write_config_echo(out, cfg, "gradcheck", {"seed": args.seed, "corrupt": args.corrupt})
        (out / "gradcheck.txt").write_text(table + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    write_config_echo(out, cfg, "ablate", {"axis": args.axis, "seeds": args.seeds})
    seeds = list(range(args.seed, args.seed + args.seeds))

    def report(r):
        print(f"seed {r.seed} {r.variant}: test mAP {r.test_map}, {r.steps} steps, "
              f"{r.seconds:.1f}s", flush=True)

    results = ablate(cfg, args.axis, seeds, report)
    summary = summarize(results)
    text = format_summary(args.axis, summary)
    (out / "ablation.txt").write_text(text)
    (out / "ablation.json").write_text(json.dumps(
        {"axis": args.axis, "seeds": seeds, "variants": summary}, indent=2) + "\n")
    print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denseact",
                                     description="Dense multi-label action detection experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", required=True, help="YAML or JSON run config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--profile", choices=PROFILES, default="desk",
                       help="dimension preset the config is applied on top of")

    p = sub.add_parser("gen-data", help="write a synthetic corpus and its manifest")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train both branches, write checkpoint and log")
    common(p)
    p.add_argument("--resume", help="checkpoint from an earlier run with the same config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="full-sequence inference and metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="overrides the config's data section")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference table for ops and blocks")
    common(p, out_required=False)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--quick", action="store_true", help="skip the double-precision rows")
    p.add_argument("--corrupt", choices=gradsuite.CORRUPTIBLE,
                   help="scale one op's backward pass (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="compare the variants of one design axis")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, FormatError, ConsistencyError, ShapeError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, FloatingPointError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
