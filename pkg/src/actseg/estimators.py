"""Estimator-style wrappers with the usual fit / predict / get_params surface."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import segmentor as seg
from .act import ActConfig, train, train_single
from .metrics import evaluate, whole_dsc
from .tensor import argmax_per_pixel, check_images

__all__ = ["ACTSegmenter", "SelfTrainingSegmenter"]


class _SegmenterMixin:
    # subclasses set ``params_`` in fit

    def predict_proba(self, X):
        """Per-pixel class probabilities, shape (B, H, W, C)."""
        check_is_fitted(self, "params_")
        return seg.predict_proba_batch(self.params_, check_images(X, min_size=seg.MIN_SIZE))

    def predict(self, X):
        """Per-pixel argmax labels, shape (B, H, W)."""
        return argmax_per_pixel(self.predict_proba(X))

    def score(self, X, y):
        """Whole-foreground Dice averaged over the images."""
        check_is_fitted(self, "params_")
        return whole_dsc(evaluate(self.params_, list(zip(X, y))))

    def _act_config(self):
        return ActConfig(
            epsilon=self.epsilon,
            lambda0=getattr(self, "lambda0", 1.0),
            decay_k=getattr(self, "decay_k", 5.0),
            batch_size=self.batch_size,
            eta=self.eta,
            total_iterations=self.total_iterations,
            pair_fraction=getattr(self, "pair_fraction", 1.0),
            n_features=self.n_features,
            use_emd=getattr(self, "use_emd", True),
            dtype=self.dtype,
        )


class ACTSegmenter(_SegmenterMixin, BaseEstimator):
    """Asymmetric co-training of a cross-domain and a target-domain segmentor.

    ``fit`` takes a :class:`~actseg.datagen.DatasetSplits`; prediction uses
    the target-domain segmentor only.  ``cross_domain_params_`` keeps the
    other one for inspection.
    """

    def __init__(
        self,
        epsilon=0.5,
        lambda0=1.0,
        decay_k=5.0,
        batch_size=8,
        eta=1e-3,
        total_iterations=2000,
        pair_fraction=1.0,
        n_features=8,
        use_emd=True,
        dtype="float32",
        random_state=0,
    ):
        self.epsilon = epsilon
        self.lambda0 = lambda0
        self.decay_k = decay_k
        self.batch_size = batch_size
        self.eta = eta
        self.total_iterations = total_iterations
        self.pair_fraction = pair_fraction
        self.n_features = n_features
        self.use_emd = use_emd
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, splits, y=None, callback=None):
        if y is not None:
            raise TypeError("ACTSegmenter.fit takes a DatasetSplits; labels live inside it")
        state, report = train(splits, self._act_config(), seed=self.random_state, callback=callback)
        self.params_ = state.theta
        self.cross_domain_params_ = state.phi
        self.report_ = report
        self.n_classes_ = splits.num_classes
        return self


class SelfTrainingSegmenter(_SegmenterMixin, BaseEstimator):
    """A single segmentor trained on labeled images, optionally
    self-training on its own confident predictions for unlabeled ones."""

    def __init__(
        self,
        epsilon=0.5,
        batch_size=8,
        eta=1e-3,
        total_iterations=2000,
        n_features=8,
        num_classes=4,
        dtype="float32",
        random_state=0,
    ):
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.eta = eta
        self.total_iterations = total_iterations
        self.n_features = n_features
        self.num_classes = num_classes
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y, X_unlabeled=None, test=None):
        X = check_images(X, min_size=seg.MIN_SIZE)
        y = np.asarray(y)
        if y.shape != X.shape:
            raise ValueError(f"labels have shape {y.shape}, images {X.shape}")
        unlabeled = None
        if X_unlabeled is not None and len(X_unlabeled):
            unlabeled = list(check_images(X_unlabeled, min_size=seg.MIN_SIZE))
        params, report = train_single(
            list(zip(X, y)),
            unlabeled,
            self._act_config(),
            seed=self.random_state,
            num_classes=self.num_classes,
            test=test,
        )
        self.params_ = params
        self.report_ = report
        self.n_classes_ = self.num_classes
        return self
