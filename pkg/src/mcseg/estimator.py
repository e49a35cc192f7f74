"""scikit-learn style wrapper around the adversarial trainer for in-memory arrays."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .models import SegModel
from .trainer import Batch, TrainState, predict_proba, step_a, step_b, step_c

IGNORE_INDEX = 255


def check_images(X, channels, name="X"):
    """Validate an N x C x H x W float image stack with C in ``channels``."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"{name} must be N x C x H x W, got shape {X.shape}")
    if X.shape[1] not in channels:
        raise ValueError(f"{name} must have {' or '.join(map(str, channels))} channels, got {X.shape[1]}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if X.shape[2] % 8 or X.shape[3] % 8:
        raise ValueError(f"{name} height and width must be multiples of 8, got {X.shape[2]}x{X.shape[3]}")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"{name} must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return X


def check_label_maps(y, X, num_classes=None, name="y"):
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"{name} shape {y.shape} does not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"{name} must hold integer class ids, got dtype {y.dtype}")
    valid = y[y != IGNORE_INDEX]
    if valid.size == 0:
        raise ValueError(f"{name} has no labelled pixels")
    if valid.min() < 0 or (num_classes is not None and valid.max() >= num_classes):
        raise ValueError(f"{name} class ids must lie in [0, {num_classes}) or equal {IGNORE_INDEX}")
    return y.astype(np.int64)


class MCDSegmenter(BaseEstimator):
    """Per-pixel classifier trained with labelled source and unlabelled target images.

    Images are N x C x H x W: C = 3 (RGB) or 6 (RGB followed by HHA).
    Fusion kinds that consume HHA, and the multitask task sets (whose depth
    head regresses HHA), need the 6-channel form.

    Parameters
    ----------
    fusion, tasks : architecture choices, see :class:`mcseg.models.SegModel`.
    num_classes : number of classes; inferred from ``y`` when None.
    n_iter : training iterations, each drawing one source and one target image.
    adapt : run the classifier/generator discrepancy steps; False trains on source only.
    """

    def __init__(self, fusion="rgb_only", tasks="seg_only", num_classes=None, width=16, n_iter=500,
                 lr=1e-3, momentum=0.9, num_c_steps=4, adv_weight=1.0, adapt=True, random_state=0):
        self.fusion = fusion
        self.tasks = tasks
        self.num_classes = num_classes
        self.width = width
        self.n_iter = n_iter
        self.lr = lr
        self.momentum = momentum
        self.num_c_steps = num_c_steps
        self.adv_weight = adv_weight
        self.adapt = adapt
        self.random_state = random_state

    def _needs_hha(self):
        return self.fusion != "rgb_only" or self.tasks != "seg_only"

    def _split(self, X):
        rgb = X[:, :3]
        hha = X[:, 3:6] if X.shape[1] == 6 else None
        if self.fusion == "hha_only":
            rgb = None
        return rgb, hha

    def fit(self, X, y, X_target=None, boundaries=None):
        """Train on source images ``X`` with label maps ``y``; ``X_target`` is unlabelled."""
        channels = (6,) if self._needs_hha() else (3, 6)
        X = check_images(X, channels)
        y = check_label_maps(y, X, self.num_classes)
        k = int(self.num_classes or y[y != IGNORE_INDEX].max() + 1)
        if self.adapt:
            if X_target is None:
                raise ValueError("adapt=True needs unlabelled target images X_target")
            X_target = check_images(X_target, (X.shape[1],), "X_target")
            if X_target.shape[2:] != X.shape[2:]:
                raise ValueError(f"X_target image size {X_target.shape[2:]} differs from X {X.shape[2:]}")
        if self.tasks == "triple":
            if boundaries is None:
                raise ValueError("tasks='triple' needs source boundary maps")
            boundaries = (np.asarray(boundaries).reshape(y.shape) > 0).astype(np.uint8)
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")

        model = SegModel(self.fusion, self.tasks, k, self.width, seed=self.random_state)
        state = TrainState(model, self.lr, self.momentum, self.adv_weight)
        rng = np.random.default_rng(np.random.SeedSequence([self.random_state, 1]))
        for _ in range(self.n_iter):
            i = int(rng.integers(len(X)))
            rgb, hha = self._split(X[i:i + 1])
            src = Batch(rgb, hha, y[i:i + 1], None if boundaries is None else boundaries[i:i + 1])
            tgt = None
            if self.adapt:
                j = int(rng.integers(len(X_target)))
                tgt = Batch(*self._split(X_target[j:j + 1]))
            step_a(state, src, tgt)
            if self.adapt:
                step_b(state, src, tgt)
                step_c(state, tgt, self.num_c_steps)
        self.model_ = model
        self.classes_ = np.arange(k)
        self.n_channels_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        """N x K x H x W class probabilities (mean of the two classifiers)."""
        check_is_fitted(self, "model_")
        X = check_images(X, (self.n_channels_in_,))
        out = []
        for i in range(len(X)):
            rgb, hha = self._split(X[i:i + 1])
            probs, _ = predict_proba(self.model_, rgb, hha)
            out.append(probs[0])
        return np.stack(out)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1).astype(np.uint8)

    def score(self, X, y):
        """Mean IoU over classes present in ``y`` or the prediction."""
        check_is_fitted(self, "model_")
        X = check_images(X, (self.n_channels_in_,))
        y = check_label_maps(y, X, len(self.classes_))
        cm = metrics.confusion(self.predict(X), y, len(self.classes_))
        return metrics.seg_scores(cm).mIoU
