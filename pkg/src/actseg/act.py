"""Asymmetric co-training with confidence-thresholded pseudo-labels.

Two segmentors share an architecture but see different labels: ``phi`` learns
from labeled source images (the cross-domain branch), ``theta`` from the few
labeled target images (the target-domain branch).  Every iteration each one
pseudo-labels a batch of unlabeled target images; the confident pixels are
mixed with labeled images through a decaying MixUp weight and handed to the
*other* segmentor as extra supervision.  Only ``theta`` is used at test time.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import segmentor as seg
from .metrics import RunReport, evaluate, whole_dsc
from .tensor import SoftLabelMap, argmax_per_pixel

log = logging.getLogger(__name__)

__all__ = [
    "ActConfig",
    "PseudoLabelMap",
    "PseudoEntry",
    "PseudoSet",
    "MixedSample",
    "TrainState",
    "select_pseudo_labels",
    "build_pseudo_set",
    "emd_lambda",
    "mixup_pair",
    "build_mixed_set",
    "act_iteration",
    "train",
    "train_single",
    "consensus_stats",
    "sample_batches",
]

PHI, THETA = "phi", "theta"


@dataclass
class ActConfig:
    """Hyper-parameters of the co-training loop.

    ``epsilon=0.5``, ``eta=1e-3`` and ``lambda0=1`` are the reference settings.
    The MixUp weight decays as ``lambda0 * exp(-decay_k * I / total_iterations)``;
    ``use_emd=False`` fixes it at 0 (pseudo-labels only, no mixing).
    """

    epsilon: float = 0.5
    lambda0: float = 1.0
    decay_k: float = 5.0
    batch_size: int = 8
    eta: float = 1e-3
    total_iterations: int = 2000
    pair_fraction: float = 1.0
    n_features: int = 8
    use_emd: bool = True
    checkpoint_every: int = None
    dtype: str = "float32"
    # samples per forward/backward chunk; bounds peak memory only
    chunk_size: int = 32

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.decay_k <= 0:
            raise ValueError("decay_k must be > 0")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if not 0.0 < self.pair_fraction <= 1.0:
            raise ValueError(f"pair_fraction must lie in (0, 1], got {self.pair_fraction}")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    @property
    def checkpoint_interval(self):
        if self.checkpoint_every is not None:
            return self.checkpoint_every
        return max(1, self.total_iterations // 10)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown act config keys: {sorted(unknown)}")
        return cls(**d)


class PseudoLabelMap(NamedTuple):
    labels: np.ndarray  # (H, W) argmax class
    selected: np.ndarray  # (H, W) confidence > epsilon
    confidence: np.ndarray  # (H, W) max class probability


class PseudoEntry(NamedTuple):
    image_index: int
    image: np.ndarray
    pmap: PseudoLabelMap


@dataclass
class PseudoSet:
    entries: list
    source_segmentor: str

    def __len__(self):
        return len(self.entries)


class MixedSample(NamedTuple):
    image: np.ndarray
    target: SoftLabelMap
    lambda_used: float


@dataclass
class TrainState:
    phi: seg.SegmentorParams
    theta: seg.SegmentorParams
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


# ---------------------------------------------------------------------------
# pseudo-labels


def select_pseudo_labels(p, epsilon):
    """Argmax labels with a strict ``max_c p > epsilon`` selection mask."""
    p = np.asarray(p)
    confidence = p.max(axis=-1)
    return PseudoLabelMap(
        labels=argmax_per_pixel(p),
        selected=confidence > epsilon,
        confidence=confidence,
    )


def _pseudo_set_from_probs(probs, images, epsilon, tag, indices=None):
    entries = []
    for k, (p, img) in enumerate(zip(probs, images)):
        pmap = select_pseudo_labels(p, epsilon)
        if pmap.selected.any():
            idx = k if indices is None else int(indices[k])
            entries.append(PseudoEntry(idx, img, pmap))
    return PseudoSet(entries, tag)


def build_pseudo_set(params, images, epsilon, tag, indices=None):
    """Pseudo-label ``images`` with one segmentor; images without any
    confident pixel are left out."""
    if tag not in (PHI, THETA):
        raise ValueError(f"tag must be 'phi' or 'theta', got {tag!r}")
    images = list(images)
    if not images:
        return PseudoSet([], tag)
    probs = seg.predict_proba_batch(params, images)
    return _pseudo_set_from_probs(probs, images, epsilon, tag, indices)


def consensus_stats(p_phi, p_theta, epsilon):
    """Fractions of pixels where both, exactly one, or neither segmentor is confident."""
    p_phi, p_theta = np.asarray(p_phi), np.asarray(p_theta)
    if p_phi.shape != p_theta.shape:
        raise ValueError(f"probability maps differ in shape: {p_phi.shape} vs {p_theta.shape}")
    a = p_phi.max(axis=-1) > epsilon
    b = p_theta.max(axis=-1) > epsilon
    n = a.size
    both = np.count_nonzero(a & b) / n
    none = np.count_nonzero(~a & ~b) / n
    return both, 1.0 - both - none, none


# ---------------------------------------------------------------------------
# exponential MixUp decay


def emd_lambda(iteration, config):
    """MixUp weight of the ground-truth side at ``iteration``, clamped to [0, 1]."""
    i_max = config.total_iterations
    if not 0 <= iteration <= i_max:
        raise ValueError(f"iteration {iteration} outside [0, {i_max}]")
    if not config.use_emd:
        return 0.0
    progress = iteration / i_max if i_max else 0.0
    lam = config.lambda0 * math.exp(-config.decay_k * progress)
    return min(max(lam, 0.0), 1.0)


def _one_hot_planes(labels, num_classes, dtype=float):
    out = np.zeros(labels.shape + (num_classes,), dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def mixup_pair(labeled, pseudo, lam, num_classes):
    """Blend a labeled image with a pseudo-labeled one.

    Pixels selected in the pseudo map get the soft target
    ``lam * onehot(y) + (1 - lam) * onehot(y_hat)`` at full weight; unselected
    pixels keep ``onehot(y)`` at weight ``lam``.
    """
    x_l, y_l = labeled
    x_u, pmap = pseudo
    x_l, x_u = np.asarray(x_l, dtype=float), np.asarray(x_u, dtype=float)
    if x_l.shape != x_u.shape or np.shape(y_l) != x_l.shape or pmap.labels.shape != x_l.shape:
        raise ValueError(
            f"dimension mismatch: labeled {x_l.shape}, mask {np.shape(y_l)}, "
            f"pseudo {x_u.shape}"
        )
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    image = lam * x_l + (1.0 - lam) * x_u
    t_l = _one_hot_planes(np.asarray(y_l), num_classes)
    t_u = _one_hot_planes(pmap.labels, num_classes)
    sel = pmap.selected
    targets = np.where(sel[..., None], lam * t_l + (1.0 - lam) * t_u, t_l)
    weights = np.where(sel, 1.0, lam)
    return MixedSample(image, SoftLabelMap(targets, weights), float(lam))


def _n_pairs(total, pair_fraction):
    if total == 0:
        return 0
    return min(total, max(1, int(round(pair_fraction * total))))


def build_mixed_set(pseudo, labeled_batch, lam, pair_fraction, rng, num_classes):
    """Mix every pseudo-labeled image with every labeled image, then keep a
    uniformly sampled ``pair_fraction`` of the pairs."""
    labeled_batch = list(labeled_batch)
    if not labeled_batch:
        raise ValueError("labeled batch is empty")
    if not 0.0 < pair_fraction <= 1.0:
        raise ValueError(f"pair_fraction must lie in (0, 1], got {pair_fraction}")
    n_l = len(labeled_batch)
    total = len(pseudo) * n_l
    keep = _n_pairs(total, pair_fraction)
    if keep == total:
        chosen = range(total)
    else:
        chosen = np.sort(rng.choice(total, size=keep, replace=False))
    out = []
    for k in chosen:
        i, j = divmod(int(k), n_l)
        entry = pseudo.entries[i]
        out.append(mixup_pair(labeled_batch[j], (entry.image, entry.pmap), lam, num_classes))
    return out


def _pseudo_only_samples(pseudo, num_classes):
    # what mixing at lambda = 0 yields for every partner: the pseudo image,
    # onehot(y_hat) on selected pixels, zero weight elsewhere
    out = []
    for entry in pseudo.entries:
        t = _one_hot_planes(entry.pmap.labels, num_classes)
        w = entry.pmap.selected.astype(float)
        out.append(MixedSample(np.asarray(entry.image, dtype=float), SoftLabelMap(t, w), 0.0))
    return out


# ---------------------------------------------------------------------------
# losses over sample sets


def _labeled_arrays(pairs, num_classes):
    images = np.stack([np.asarray(x, dtype=float) for x, _ in pairs])
    labels = np.stack([np.asarray(y) for _, y in pairs])
    return images, _one_hot_planes(labels, num_classes), np.ones(labels.shape)


def _sample_arrays(samples):
    images = np.stack([s.image for s in samples])
    targets = np.stack([s.target.targets for s in samples])
    weights = np.stack([s.target.pixel_weights for s in samples])
    return images, targets, weights


def set_loss_and_grad(params, images, targets, weights, chunk_size=32):
    """Mean per-sample loss over a set of samples and its gradient.

    Samples with no supervised pixel are dropped first.  Returns
    ``(0.0, None)`` for an empty set.
    """
    keep = weights.reshape(len(weights), -1).sum(axis=1) > 0
    if not keep.all():
        images, targets, weights = images[keep], targets[keep], weights[keep]
    n = len(images)
    if n == 0:
        return 0.0, None
    loss, grad = 0.0, None
    for start in range(0, n, chunk_size):
        stop = min(n, start + chunk_size)
        l, g, _ = seg.batch_loss_and_grad(
            params, images[start:stop], targets[start:stop], weights[start:stop]
        )
        frac = (stop - start) / n
        loss += frac * l
        g = seg.SegmentorParams(*(a * a.dtype.type(frac) for a in g.arrays()))
        grad = g if grad is None else seg.SegmentorParams(
            *(x + y for x, y in zip(grad.arrays(), g.arrays()))
        )
    return loss, grad


def _update(params, terms, eta, chunk_size):
    losses, grads = [], []
    for arrays in terms:
        if arrays is None:
            losses.append(0.0)
            continue
        loss, g = set_loss_and_grad(params, *arrays, chunk_size=chunk_size)
        losses.append(loss)
        if g is not None:
            grads.append(g)
    if grads:
        params = seg.sgd_step(params, grads, eta)
    return params, losses


# ---------------------------------------------------------------------------
# one iteration and the training loop


def _draw(rng, n_pool, n):
    if n_pool == 0:
        return np.empty(0, dtype=int)
    return rng.choice(n_pool, size=n, replace=n_pool < n)


def sample_batches(splits, batch_size, rng):
    """Draw N source pairs, N labeled-target pairs (with replacement when the
    pool is smaller than N) and N unlabeled target images."""
    src = _draw(rng, len(splits.source_labeled), batch_size)
    lt = _draw(rng, len(splits.target_labeled), batch_size)
    ut = _draw(rng, len(splits.target_unlabeled), batch_size)
    return (
        [splits.source_labeled[i] for i in src],
        [splits.target_labeled[i] for i in lt],
        [splits.target_unlabeled[i] for i in ut],
    ), ut


def act_iteration(state, batches, config, unlabeled_indices=None):
    """Run one co-training iteration and return the new state and its stats.

    ``batches`` is ``(source_pairs, target_labeled_pairs, unlabeled_images)``.
    Pseudo-labels of ``phi`` (set U_phi) are mixed with the labeled target
    batch and train ``theta``; pseudo-labels of ``theta`` (U_theta) are mixed
    with the source batch and train ``phi``.
    """
    if state.iteration >= config.total_iterations:
        raise ValueError(f"iteration {state.iteration} >= total {config.total_iterations}")
    source, target_labeled, unlabeled = batches
    C = state.theta.num_classes
    eps = config.epsilon

    if unlabeled:
        p_phi = seg.predict_proba_batch(state.phi, unlabeled)
        p_theta = seg.predict_proba_batch(state.theta, unlabeled)
        u_phi = _pseudo_set_from_probs(p_phi, unlabeled, eps, PHI, unlabeled_indices)
        u_theta = _pseudo_set_from_probs(p_theta, unlabeled, eps, THETA, unlabeled_indices)
        consensus = consensus_stats(p_phi, p_theta, eps)
    else:
        u_phi, u_theta = PseudoSet([], PHI), PseudoSet([], THETA)
        consensus = (0.0, 0.0, 1.0)

    lam = emd_lambda(state.iteration, config)

    def mixed(pseudo, labeled):
        if not len(pseudo):
            return []
        if not config.use_emd:
            return _pseudo_only_samples(pseudo, C)
        if not labeled:
            return []
        return build_mixed_set(pseudo, labeled, lam, config.pair_fraction, state.rng, C)

    # U_phi pairs with the labeled target batch (teaches theta),
    # U_theta pairs with the labeled source batch (teaches phi)
    mixed_for_theta = mixed(u_phi, target_labeled)
    mixed_for_phi = mixed(u_theta, source)

    chunk = config.chunk_size
    phi, theta = state.phi, state.theta
    loss_phi = loss_theta = None
    if source:
        phi, losses = _update(
            phi,
            [_labeled_arrays(source, C), _sample_arrays(mixed_for_phi) if mixed_for_phi else None],
            config.eta,
            chunk,
        )
        loss_phi = losses
    if target_labeled:
        theta, losses = _update(
            theta,
            [
                _labeled_arrays(target_labeled, C),
                _sample_arrays(mixed_for_theta) if mixed_for_theta else None,
            ],
            config.eta,
            chunk,
        )
        loss_theta = losses

    stats = {
        "I": state.iteration,
        "lambda": lam,
        "n_u_phi": len(u_phi),
        "n_u_theta": len(u_theta),
        "n_mixed_phi": len(mixed_for_theta),
        "n_mixed_theta": len(mixed_for_phi),
        "loss_phi": None if loss_phi is None else float(sum(loss_phi)),
        "loss_theta": None if loss_theta is None else float(sum(loss_theta)),
        "consensus": [float(c) for c in consensus],
    }
    new_state = TrainState(phi=phi, theta=theta, iteration=state.iteration + 1, rng=state.rng)
    return new_state, stats


def _init_state(seed, num_classes, config):
    ss = np.random.SeedSequence(int(seed))
    k_phi, k_theta, k_loop = ss.spawn(3)
    dtype = np.dtype(config.dtype)
    phi = seg.init_params(int(k_phi.generate_state(1)[0]), config.n_features, num_classes, dtype)
    theta = seg.init_params(
        int(k_theta.generate_state(1)[0]), config.n_features, num_classes, dtype
    )
    return TrainState(phi=phi, theta=theta, iteration=0, rng=np.random.default_rng(k_loop))


def _checkpoint(state, test, epsilon, evaluated="theta"):
    images = [img for img, _ in test]
    p_phi = seg.predict_proba_batch(state.phi, images)
    p_theta = seg.predict_proba_batch(state.theta, images)
    both, one, none = consensus_stats(p_phi, p_theta, epsilon)
    params = state.theta if evaluated == "theta" else state.phi
    return {
        "I": state.iteration,
        "consensus": [both, one, none],
        "dsc": whole_dsc(evaluate(params, test)),
    }


def train(splits, config, seed=0, callback=None):
    """Co-train phi and theta for ``config.total_iterations`` iterations.

    Returns the final :class:`TrainState` and a :class:`RunReport` whose final
    metrics are computed with ``theta`` on ``splits.target_test``.
    """
    C = splits.num_classes
    state = _init_state(seed, C, config)
    test = splits.target_test
    report = RunReport(
        mode="act" if config.use_emd else "act_no_emd",
        seed=int(seed),
        config={"act": config.to_dict()},
    )
    if test:
        report.initial = evaluate(state.theta, test)
        report.checkpoints.append(_checkpoint(state, test, config.epsilon))

    every = config.checkpoint_interval
    while state.iteration < config.total_iterations:
        batches, ut_idx = sample_batches(splits, config.batch_size, state.rng)
        state, stats = act_iteration(state, batches, config, ut_idx)
        report.per_iteration.append(stats)
        if callback is not None:
            callback(state, stats)
        if test and (state.iteration % every == 0 or state.iteration == config.total_iterations):
            report.checkpoints.append(_checkpoint(state, test, config.epsilon))
        if state.iteration % 100 == 0:
            log.debug("iteration %d: %s", state.iteration, stats)

    report.final = evaluate(state.theta, test) if test else []
    return state, report


def train_single(labeled, unlabeled, config, seed=0, num_classes=4, test=None, mode="single"):
    """Train one segmentor on labeled pairs, optionally self-training on
    its own confident pseudo-labels of ``unlabeled`` images.

    The pseudo-labeled images enter as-is (no mixing): selected pixels carry
    their argmax label at weight 1, unselected pixels weight 0.
    """
    if not labeled:
        raise ValueError("no labeled training data")
    ss = np.random.SeedSequence(int(seed))
    k_init, k_loop = ss.spawn(2)
    params = seg.init_params(
        int(k_init.generate_state(1)[0]), config.n_features, num_classes, np.dtype(config.dtype)
    )
    rng = np.random.default_rng(k_loop)
    report = RunReport(mode=mode, seed=int(seed), config={"act": config.to_dict()})
    every = config.checkpoint_interval
    if test:
        report.initial = evaluate(params, test)
        report.checkpoints.append({"I": 0, "dsc": whole_dsc(report.initial)})
    unlabeled = list(unlabeled or [])

    for it in range(config.total_iterations):
        idx = _draw(rng, len(labeled), config.batch_size)
        batch = [labeled[i] for i in idx]
        terms = [_labeled_arrays(batch, num_classes)]
        n_u = 0
        if unlabeled:
            u_idx = _draw(rng, len(unlabeled), config.batch_size)
            u_imgs = [unlabeled[i] for i in u_idx]
            pseudo = build_pseudo_set(params, u_imgs, config.epsilon, THETA, u_idx)
            n_u = len(pseudo)
            samples = _pseudo_only_samples(pseudo, num_classes)
            terms.append(_sample_arrays(samples) if samples else None)
        params, losses = _update(params, terms, config.eta, config.chunk_size)
        report.per_iteration.append({
            "I": it,
            "lambda": None,
            "n_u_phi": None,
            "n_u_theta": n_u if unlabeled else None,
            "loss_phi": None,
            "loss_theta": float(sum(losses)),
            "consensus": None,
        })
        if test and ((it + 1) % every == 0 or it + 1 == config.total_iterations):
            report.checkpoints.append({"I": it + 1, "dsc": whole_dsc(evaluate(params, test))})

    report.final = evaluate(params, test) if test else []
    return params, report
