"""Per-frame mAP and action-conditional metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def average_precision(scores, labels) -> float | None:
    """All-points AP; ties keep their original order. ``None`` without positives."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    npos = int(labels.sum())
    if npos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    rel = labels[order]
    hits = np.cumsum(rel)
    precision_at_hits = hits[rel] / (np.flatnonzero(rel) + 1)
    return float(precision_at_hits.sum() / npos)


@dataclass
class ActionConditional:
    tau: int
    threshold: float
    precision: float
    recall: float
    f1: float
    map: float
    pairs: int


@dataclass
class MetricsReport:
    per_frame_map: float
    per_class_ap: list
    frames: int
    positives: list
    action_conditional: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_frame_map": self.per_frame_map,
            "per_class_ap": self.per_class_ap,
            "frames": self.frames,
            "positives": self.positives,
            "action_conditional": [vars(a) for a in self.action_conditional],
        }

    def to_text(self) -> str:
        lines = [f"per-frame mAP: {self.per_frame_map:.4f}  ({self.frames} frames)",
                 "class  AP       positives"]
        for c, (ap, n) in enumerate(zip(self.per_class_ap, self.positives)):
            lines.append(f"{c:5d}  {'  n/a  ' if ap is None else f'{ap:.4f}'}  {n}")
        for a in self.action_conditional:
            lines.append(f"tau={a.tau:<3d} P_AC={a.precision:.4f} R_AC={a.recall:.4f} "
                         f"F1_AC={a.f1:.4f} mAP_AC={a.map:.4f} pairs={a.pairs}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        text, kv = out / f"{stem}.txt", out / f"{stem}.json"
        text.write_text(self.to_text())
        kv.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return text, kv


def per_frame_map(predictions, ground_truth, mask=None) -> MetricsReport:
    """Frames pooled over videos are the ranked samples for each class."""
    pred = np.asarray(predictions, dtype=np.float64)
    gt = np.asarray(ground_truth).astype(bool)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"prediction shape {pred.shape} vs ground truth {gt.shape}")
    if mask is not None:
        keep = np.asarray(mask).astype(bool).reshape(-1)
        pred, gt = pred[keep], gt[keep]
    aps = [average_precision(pred[:, c], gt[:, c]) for c in range(pred.shape[1])]
    valid = [a for a in aps if a is not None]
    if not valid:
        raise ValueError("no class has a positive frame; mAP undefined")
    return MetricsReport(per_frame_map=float(np.mean(valid)), per_class_ap=aps,
                         frames=int(pred.shape[0]), positives=gt.sum(axis=0).astype(int).tolist())


def _dilate(column: np.ndarray, tau: int) -> np.ndarray:
    """``out[t]`` is True when ``column`` is True anywhere in ``[t - tau, t + tau]``."""
    if tau == 0:
        return column.copy()
    c = np.concatenate([[0], np.cumsum(column.astype(np.int64))])
    t = np.arange(column.size)
    lo = np.clip(t - tau, 0, column.size)
    hi = np.clip(t + tau + 1, 0, column.size)
    return (c[hi] - c[lo]) > 0


def action_conditional_metrics(predictions, ground_truth, tau: int = 0,
                               threshold: float = 0.5) -> ActionConditional:
    """Precision/recall/AP of class ``i`` restricted to steps where class ``j``
    is present within ``tau`` steps, averaged over ordered pairs ``i != j``.

    Pairs whose condition set has no class-``i`` positive are skipped.
    Precision of a pair with no predicted positives counts as 0.
    F1 is the harmonic mean of the averaged precision and recall.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    pred = np.asarray(predictions, dtype=np.float64)
    gt = np.asarray(ground_truth).astype(bool)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"prediction shape {pred.shape} vs ground truth {gt.shape}")
    hard = pred >= threshold
    conds = [_dilate(gt[:, j], tau) for j in range(gt.shape[1])]
    ps, rs, aps = [], [], []
    for i in range(gt.shape[1]):
        for j in range(gt.shape[1]):
            if i == j:
                continue
            cond = conds[j]
            g, h = gt[cond, i], hard[cond, i]
            npos = int(g.sum())
            if npos == 0:
                continue
            tp = int((g & h).sum())
            npred = int(h.sum())
            ps.append(tp / npred if npred else 0.0)
            rs.append(tp / npos)
            aps.append(average_precision(pred[cond, i], g))
    if not ps:
        raise ValueError("no class pair has a non-empty, positive-containing condition set")
    p, r = float(np.mean(ps)), float(np.mean(rs))
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return ActionConditional(tau=tau, threshold=threshold, precision=p, recall=r, f1=f1,
                             map=float(np.mean(aps)), pairs=len(ps))


def evaluate(predictions, ground_truth, taus=(0,), threshold: float = 0.5,
             mask=None) -> MetricsReport:
    report = per_frame_map(predictions, ground_truth, mask)
    pred, gt = np.asarray(predictions), np.asarray(ground_truth)
    if mask is not None:
        keep = np.asarray(mask).astype(bool).reshape(-1)
        pred, gt = pred[keep], gt[keep]
    for tau in taus:
        try:
            report.action_conditional.append(action_conditional_metrics(pred, gt, tau, threshold))
        except ValueError:
            # corpora with a single active class have no valid pairs
            continue
    return report
