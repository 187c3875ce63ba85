"""Attack metrics: top-k attack accuracy, KNN feature distance and the MI-overfitting split."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, unit_to_bytes
from .models import Classifier, predict_logits, predict_penultimate


def _check_nonempty(recons):
    if len(recons) == 0:
        raise ValueError("no reconstructions to evaluate")


def topk_hits(logits: np.ndarray, targets: np.ndarray, k: int) -> np.ndarray:
    """Boolean per row: is the target among the k largest logits."""
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (top == np.asarray(targets)[:, None]).any(axis=1)


def attack_accuracy(recons: np.ndarray, targets, eval_model: Classifier, topk: int = 1,
                    groups=None) -> tuple[float, float]:
    """Top-k accuracy in percent as (mean, std) over groups of rows.

    ``groups`` labels each row with its restart index; the accuracy of each
    group is computed separately and the population std is taken across them.
    Without groups the std is 0.
    """
    _check_nonempty(recons)
    hits = topk_hits(predict_logits(eval_model, recons), np.asarray(targets), topk)
    return _group_stats(hits, groups)


def _group_stats(hits: np.ndarray, groups) -> tuple[float, float]:
    if groups is None:
        return 100.0 * float(hits.mean()), 0.0
    groups = np.asarray(groups)
    accs = np.array([hits[groups == g].mean() for g in np.unique(groups)]) * 100.0
    return float(accs.mean()), float(accs.std())


def _eval_features(model: Classifier, images: np.ndarray) -> np.ndarray:
    # drop the constant bias slot; it never changes a distance
    return predict_penultimate(model, images)[:, :-1]


def min_feature_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """For each query row, the smallest L2 distance to any reference row."""
    diff = query[:, None, :] - reference[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2)).min(axis=1)


def knn_dist(recons: np.ndarray, private: Dataset, eval_model: Classifier, k) -> float:
    """Mean over reconstructions of the nearest private image of the target class, in eval features.

    ``k`` is one class for all rows or a class per row.
    """
    return float(knn_distances(recons, private, eval_model, k).mean())


def knn_distances(recons: np.ndarray, private: Dataset, eval_model: Classifier, k) -> np.ndarray:
    _check_nonempty(recons)
    k = np.asarray(k, dtype=np.int64)
    k = np.full(len(recons), int(k)) if k.ndim == 0 else k
    feats = _eval_features(eval_model, recons)
    out = np.empty(len(recons))
    for c in np.unique(k):
        ref = private.of_class(int(c))
        if len(ref) == 0:
            raise ValueError(f"class {int(c)} has no private samples")
        rows = k == c
        out[rows] = min_feature_distances(feats[rows], _eval_features(eval_model, ref))
    return out


def ce_losses(model: Classifier, images: np.ndarray, targets) -> np.ndarray:
    logits = predict_logits(model, images)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(images)), np.asarray(targets)]


@dataclass
class OverfitResult:
    loss_a: np.ndarray
    loss_b: np.ndarray
    tau_low: float
    tau_high: float
    fraction_low_high: float


def overfit_analysis(recons: np.ndarray, targets, model_a: Classifier, model_b: Classifier,
                     tau_low: float | None = None, tau_high: float | None = None) -> OverfitResult:
    """Share of reconstructions with low CE loss under model_a but high loss under model_b.

    Default thresholds: tau_low is the median of loss_a, tau_high the 90th
    percentile of loss_b. Pass the thresholds of a reference run to compare
    runs on equal footing.
    """
    if model_a.n_classes != model_b.n_classes:
        raise ValueError("models must share the class count")
    _check_nonempty(recons)
    la = ce_losses(model_a, recons, targets)
    lb = ce_losses(model_b, recons, targets)
    lo = float(np.median(la)) if tau_low is None else float(tau_low)
    hi = float(np.percentile(lb, 90)) if tau_high is None else float(tau_high)
    frac = float(np.mean((la <= lo) & (lb >= hi)))
    return OverfitResult(la, lb, lo, hi, frac)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class AttackReport:
    variant: str
    top1_mean: float
    top1_std: float
    top5_mean: float
    top5_std: float
    knn_dist: float
    per_class: dict = field(default_factory=dict)
    overfit_fraction: float | None = None
    tau_low: float | None = None
    tau_high: float | None = None
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("top1_mean", "top5_mean"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} = {v} outside [0, 100]")
        if self.top5_mean < self.top1_mean:
            raise ValueError("top-5 accuracy below top-1")
        if self.knn_dist < 0:
            raise ValueError("negative KNN distance")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AttackReport":
        return cls(**json.loads(text))


def build_report(variant: str, recons: np.ndarray, targets, groups, private: Dataset, eval_model: Classifier,
                 config_hash: str = "", seeds: dict | None = None) -> tuple[AttackReport, dict]:
    """Assemble an AttackReport plus per-row arrays for the sample table."""
    targets = np.asarray(targets)
    logits = predict_logits(eval_model, recons)
    hit1 = topk_hits(logits, targets, 1)
    hit5 = topk_hits(logits, targets, 5)
    t1, s1 = _group_stats(hit1, groups)
    t5, s5 = _group_stats(hit5, groups)
    dists = knn_distances(recons, private, eval_model, targets)
    per_class = {
        str(int(c)): {"top1": 100.0 * float(hit1[targets == c].mean()),
                      "top5": 100.0 * float(hit5[targets == c].mean()),
                      "knn_dist": float(dists[targets == c].mean())}
        for c in np.unique(targets)
    }
    report = AttackReport(variant, t1, s1, t5, s5, float(dists.mean()), per_class,
                          config_hash=config_hash, seeds=dict(seeds or {}))
    rows = {"target": targets, "group": np.asarray(groups) if groups is not None else np.zeros(len(targets), int),
            "eval_pred": logits.argmax(axis=1), "top1_hit": hit1, "top5_hit": hit5, "knn_dist": dists}
    return report, rows


def write_table_csv(path, columns: dict) -> Path:
    """Write equal-length columns as CSV (floats in round-trip repr)."""
    path = Path(path)
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(names)
        for i in range(n):
            w.writerow([_cell(columns[c][i]) for c in names])
    os.replace(tmp, path)
    return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.bool_, bool)):
        return int(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_pgm(path, image: np.ndarray) -> Path:
    """Binary PGM (P5) for [H, W] or [1, H, W]; PPM (P6) for [3, H, W]. Input in [-1, 1]."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim == 2:
        header, pixels = b"P5", unit_to_bytes(image)
    elif image.ndim == 3 and image.shape[0] == 3:
        header, pixels = b"P6", unit_to_bytes(image.transpose(1, 2, 0))
    else:
        raise ValueError(f"cannot write image of shape {image.shape} as PGM/PPM")
    h, w = pixels.shape[:2]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + f"\n{w} {h}\n255\n".encode() + pixels.tobytes())
    os.replace(tmp, path)
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    if magic == b"P5":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    raise ValueError(f"{path}: not a binary PGM/PPM")
