"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeMismatchError


def check_images(X, image_size: int | None = None, channels: int = 3) -> np.ndarray:
    """Coerce to a float32 (n, C, H, W) batch; a single image gains a batch axis."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeMismatchError(
            f"expected images shaped (n, {channels}, H, W), got {X.shape}")
    if X.shape[1] != channels:
        raise ShapeMismatchError(f"expected {channels} channels, got {X.shape[1]}")
    if image_size is not None and X.shape[2:] != (image_size, image_size):
        raise ShapeMismatchError(
            f"expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    if not np.isfinite(X).all():
        raise ContractError("images contain non-finite values")
    return X


def check_label_matrix(y, n_tasks: int, class_counts=None) -> np.ndarray:
    """Coerce to an int64 (n, M) matrix; -1 entries are allowed (masked)."""
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[None, :] if y.shape[0] == n_tasks else y[:, None]
    if y.ndim != 2 or y.shape[1] != n_tasks:
        raise ShapeMismatchError(f"expected labels shaped (n, {n_tasks}), got {y.shape}")
    y = y.astype(np.int64)
    if (y < -1).any():
        raise ContractError("labels below -1 are not valid")
    if class_counts is not None:
        for m, k in enumerate(class_counts):
            if y.shape[0] and y[:, m].max() >= k:
                raise ContractError(
                    f"task {m + 1} label {y[:, m].max()} out of range for {k} classes")
    return y


def check_is_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise ContractError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first")
