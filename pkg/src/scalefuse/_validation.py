"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from sklearn.utils import check_array, check_consistent_length


def check_points(X, name="X", min_samples=3):
    """Finite float array of shape (n, 3) with ``n >= min_samples``."""
    X = check_array(X, dtype=float, ensure_min_samples=min_samples, input_name=name)
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have 3 columns, got {X.shape[1]}")
    return X


def check_point_pairs(X, y):
    X = check_points(X, "X")
    y = check_points(y, "y")
    check_consistent_length(X, y)
    return X, y
