"""Dice and Hausdorff evaluation, run reports and multi-run aggregation."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .segmentor import predict_proba_batch
from .tensor import argmax_per_pixel

__all__ = [
    "WHOLE",
    "ClassMetrics",
    "RunReport",
    "dsc",
    "hausdorff",
    "evaluate",
    "evaluate_masks",
    "aggregate",
    "whole_dsc",
]

# class_id used for the pooled foreground (all non-background classes)
WHOLE = -1


@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    dsc: float
    hd: float

    @property
    def name(self):
        return "whole" if self.class_id == WHOLE else str(self.class_id)


@dataclass
class RunReport:
    """Everything one seeded run produces.

    ``per_iteration`` holds one dict per training iteration with keys
    ``I, lambda, n_u_phi, n_u_theta, loss_phi, loss_theta, consensus``.
    ``checkpoints`` holds periodic test-set diagnostics (consensus fractions
    and whole-foreground DSC of the evaluated segmentor).
    """

    mode: str
    seed: int
    config: dict
    per_iteration: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    final: list = field(default_factory=list)
    initial: list = field(default_factory=list)

    def metric(self, class_id=WHOLE, name="dsc"):
        for m in self.final:
            if m.class_id == class_id:
                return getattr(m, name)
        raise KeyError(f"no final metrics for class {class_id}")


def _as_set(mask, class_set):
    return np.isin(mask, list(class_set))


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dsc(pred, gt, class_set):
    """Dice coefficient of the pixels whose label lies in ``class_set``.

    Two empty sets count as perfect agreement (1.0).
    """
    pred, gt = _check_pair(pred, gt)
    a = _as_set(pred, class_set)
    b = _as_set(gt, class_set)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def _directed(a, b):
    # largest distance from a pixel of a to its nearest pixel of b
    dist_to_b = distance_transform_edt(~b)
    return float(dist_to_b[a].max())


def hausdorff(pred, gt, class_set):
    """Symmetric Hausdorff distance in pixels between the two class_set regions.

    Both empty gives 0; exactly one empty gives the image diagonal
    ``sqrt(H**2 + W**2)``, which exceeds any attainable distance.
    """
    pred, gt = _check_pair(pred, gt)
    a = _as_set(pred, class_set)
    b = _as_set(gt, class_set)
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if not (has_a and has_b):
        h, w = pred.shape
        return math.hypot(h, w)
    return max(_directed(a, b), _directed(b, a))


def evaluate_masks(preds, gts, num_classes):
    """Per-class and whole-foreground metrics averaged over image pairs."""
    fg = range(1, num_classes)
    sets = [(c, {c}) for c in fg] + [(WHOLE, set(fg))]
    out = []
    for class_id, cs in sets:
        d = [dsc(p, g, cs) for p, g in zip(preds, gts)]
        h = [hausdorff(p, g, cs) for p, g in zip(preds, gts)]
        out.append(ClassMetrics(class_id, float(np.mean(d)), float(np.mean(h))))
    return out


def evaluate(params, test, batch_size=16):
    """Segment every test image with ``params`` and score it against its mask."""
    if not test:
        raise ValueError("empty test set")
    images = [img for img, _ in test]
    gts = [m for _, m in test]
    preds = []
    for start in range(0, len(images), batch_size):
        p = predict_proba_batch(params, images[start:start + batch_size])
        preds.extend(argmax_per_pixel(p))
    return evaluate_masks(preds, gts, params.num_classes)


def whole_dsc(metrics):
    return next(m.dsc for m in metrics if m.class_id == WHOLE)


def _config_key(config):
    return {k: v for k, v in config.items() if k != "seed"}


def aggregate(reports):
    """Mean and population standard deviation of every final metric.

    Returns a list of dicts with keys ``mode, metric, class, mean, std``.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    ref = reports[0]
    for r in reports[1:]:
        if r.mode != ref.mode or _config_key(r.config) != _config_key(ref.config):
            raise ValueError(
                f"heterogeneous configs: run seed {r.seed} differs from seed {ref.seed}"
            )
    rows = []
    for m in ref.final:
        for name in ("dsc", "hd"):
            vals = np.array([r.metric(m.class_id, name) for r in reports])
            rows.append({
                "mode": ref.mode,
                "metric": name,
                "class": m.name,
                "mean": float(vals.mean()),
                "std": float(vals.std()),
            })
    return rows
