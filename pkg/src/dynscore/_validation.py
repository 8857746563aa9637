"""Input validation shared by the estimators."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

__all__ = ["check_samples", "check_patches", "check_labels", "check_paired", "check_timesteps", "check_seed"]


def check_samples(X, name="X", n_features=None):
    """2-D finite float64 array, optionally with a fixed feature count."""
    X = check_array(X, dtype=np.float64, ensure_2d=False, ensure_all_finite=True, input_name=name)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_samples, n_features), got {X.ndim}-D")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def check_patches(X, patch_shape=None):
    """Accept ``(n, H, W)`` stacks or flattened ``(n, H*W)`` rows.

    Returns the 3-D stack and whether the input was flat. Pixel values
    must lie in [0, 1].
    """
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_all_finite=True, input_name="X")
    flat = X.ndim == 2
    if flat:
        if patch_shape is None:
            side = int(round(np.sqrt(X.shape[1])))
            if side * side != X.shape[1]:
                raise ValueError("flattened patches must be square or patch_shape must be given")
            patch_shape = (side, side)
        if int(np.prod(patch_shape)) != X.shape[1]:
            raise ValueError(f"patch_shape {patch_shape} does not match {X.shape[1]} features")
        X = X.reshape(X.shape[0], *patch_shape)
    elif X.ndim != 3:
        raise ValueError(f"patches must be (n, H, W) or (n, H*W), got shape {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X, flat


def check_labels(labels, n, num_labels=None):
    if labels is None:
        return np.zeros(n, dtype=np.int64)
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = np.full(n, labels)
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be {n} integers")
    labels = labels.astype(np.int64)
    if labels.min() < 0 or (num_labels is not None and labels.max() >= num_labels):
        raise ValueError(f"labels must lie in [0, {num_labels})")
    return labels


def check_paired(X, Y):
    X = check_samples(X, "X")
    Y = check_samples(Y, "y")
    check_consistent_length(X, Y)
    return X, Y


def check_timesteps(t, n, T):
    t = np.broadcast_to(np.asarray(t), (n,))
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError("timesteps must be integers")
    if t.min() < 1 or t.max() > T:
        raise ValueError(f"timesteps must lie in [1, {T}]")
    return t.astype(np.int64)


def check_seed(seed):
    """Integer seed for the named streams (random_state=None means 0)."""
    if seed is None:
        return 0
    if isinstance(seed, numbers.Integral) and seed >= 0:
        return int(seed)
    raise ValueError(f"random_state must be a nonnegative integer, got {seed!r}")
