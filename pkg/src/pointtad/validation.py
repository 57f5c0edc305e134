"""Input checks for the estimator API."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .matching import Target
from .structures import ActionInstance


def check_windows(X, input_width: int | None = None) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape (n_windows, T, F)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected windows of shape (n_windows, T, F), got {X.shape}")
    if X.shape[0] == 0 or X.shape[1] < 2:
        raise ValueError(f"need at least one window of >= 2 frames, got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("window features contain NaN or inf")
    if input_width is not None and X.shape[2] != input_width:
        raise ValueError(f"feature width {X.shape[2]} != fitted input width {input_width}")
    return X


def _as_instance(item) -> ActionInstance:
    if isinstance(item, ActionInstance):
        return item
    if isinstance(item, dict):
        return ActionInstance.from_dict(item)
    start, end, cls = item[:3]
    return ActionInstance(start, end, int(cls))


def check_targets(y, n_windows: int, n_classes: int) -> list:
    """Normalise per-window annotations into :class:`Target` objects."""
    if y is None:
        raise ValueError("targets are required for fitting")
    y = list(y)
    if len(y) != n_windows:
        raise ValueError(f"{len(y)} target lists for {n_windows} windows")
    out = []
    for i, insts in enumerate(y):
        insts = [_as_instance(a) for a in insts]
        for a in insts:
            if not (0.0 <= a.start <= a.end <= 1.0):
                raise ValueError(f"window {i}: instance ({a.start}, {a.end}) outside [0, 1]")
            if a.class_id >= n_classes:
                raise ValueError(f"window {i}: class {a.class_id} >= n_classes {n_classes}")
        out.append(Target([[a.start, a.end] for a in insts], [a.class_id for a in insts]))
    return out


def check_is_fitted(est) -> None:
    if getattr(est, "model_", None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")
