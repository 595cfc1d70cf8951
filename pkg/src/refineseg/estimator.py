"""scikit-learn style wrappers around baseline and refiner training/inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .base_model import PromptSet
from .config import ModelConfig, TrainConfig, format_modules, parse_modules
from .data import sample_prompts
from .metrics import miou_mbiou
from .training import predict_logits, train_baseline, train_refiner


def check_images(X, resolution: int | None = None) -> np.ndarray:
    """Return float32 ``[N, 3, R, R]`` images in [0, 1].

    Accepts channel-last input and 8-bit integers; a single image gets a batch axis.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images of rank 4, got shape {X.shape}")
    if X.shape[1] != 3 and X.shape[-1] == 3:
        X = X.transpose(0, 3, 1, 2)
    if X.shape[1] != 3:
        raise ValueError(f"expected 3 colour channels, got shape {X.shape}")
    if np.issubdtype(X.dtype, np.integer):
        X = X / 255.0
    X = np.ascontiguousarray(X, dtype=np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("image values must lie in [0, 1] (or be 8-bit integers)")
    h, w = X.shape[-2:]
    if h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    if resolution is not None and h != resolution:
        raise ValueError(f"images are {h}px but the model expects {resolution}px")
    return X


def check_masks(y, images: np.ndarray) -> np.ndarray:
    """Return boolean ``[N, R, R]`` masks matching ``images``; every mask must be non-empty."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.shape != (images.shape[0],) + images.shape[-2:]:
        raise ValueError(f"masks of shape {y.shape} do not match images of shape {images.shape}")
    if y.dtype != bool:
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("mask values must be 0 or 1")
        y = y.astype(bool)
    if not y.reshape(len(y), -1).any(axis=1).all():
        raise ValueError("every mask needs at least one foreground pixel")
    return y


def check_prompts(prompts, n: int, resolution: int) -> list:
    if isinstance(prompts, (PromptSet, dict)):
        prompts = [prompts]
    prompts = [PromptSet.from_json(p) if isinstance(p, dict) else p for p in prompts]
    if len(prompts) != n:
        raise ValueError(f"{len(prompts)} prompt sets for {n} images")
    return [p.validate(resolution) for p in prompts]


class _Segmenter(BaseEstimator):
    def _check_fitted_input(self, X):
        check_is_fitted(self, "model_")
        return check_images(X, self.model_.config.resolution)

    def decision_function(self, X, prompts) -> np.ndarray:
        """Mask logits ``[N, R, R]`` for one prompt set per image."""
        X = self._check_fitted_input(X)
        prompts = check_prompts(prompts, len(X), self.model_.config.resolution)
        return predict_logits(self.model_, X, prompts, self.batch_size, baseline=self._baseline_path)

    def predict(self, X, prompts) -> np.ndarray:
        return self.decision_function(X, prompts) > 0

    def score(self, X, y, prompt_kind: str = "box") -> float:
        """Mean IoU with prompts sampled from the ground truth (same protocol as evaluation)."""
        X = self._check_fitted_input(X)
        y = check_masks(y, X)
        prompts = [sample_prompts(m, prompt_kind, seed=i) for i, m in enumerate(y)]
        return miou_mbiou(list(self.predict(X, prompts)), list(y))[0]


class BaselineSegmenter(_Segmenter):
    """The promptable baseline trained from scratch on (images, masks)."""

    _baseline_path = True

    def __init__(self, resolution=256, epochs=15, batch_size=4, lr=1e-3, memory_steps=60, seed=0):
        self.resolution = resolution
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.memory_steps = memory_steps
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X, self.resolution)
        y = check_masks(y, X)
        cfg = TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                          memory_steps=self.memory_steps)
        self.model_ = train_baseline(X, y, ModelConfig(resolution=self.resolution), cfg)
        return self


class RefinerSegmenter(_Segmenter):
    """Refiner modules trained on top of a frozen baseline.

    ``baseline`` may be a fitted :class:`BaselineSegmenter`; when it is None a
    baseline is trained first with default settings.
    """

    _baseline_path = False

    def __init__(self, baseline=None, modules="la,pr,mr", epochs=4, batch_size=4, lr=1e-3, seed=0):
        self.baseline = baseline
        self.modules = modules
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        modules = format_modules(parse_modules(self.modules))
        if self.baseline is None:
            X = check_images(X)
            base = BaselineSegmenter(resolution=X.shape[-1], batch_size=self.batch_size, seed=self.seed).fit(X, y)
        else:
            base = self.baseline
            check_is_fitted(base, "model_")
        X = check_images(X, base.model_.config.resolution)
        y = check_masks(y, X)
        self.baseline_ = base
        cfg = TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed)
        self.model_ = train_refiner(base.model_, X, y, "" if modules == "none" else modules, cfg)
        return self
