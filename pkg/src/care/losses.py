"""Confidence-target labeling and the regression / confidence / NLL losses."""

from __future__ import annotations

import math
from typing import Union

import numpy as np

from care.tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)

MapLike = Union[Tensor, np.ndarray]


def kept_count(eta: float, total: int) -> int:
    """Number of high-confidence labels, floor(eta * total).

    Rounded to 9 decimals first so that e.g. 0.29 * 100 counts 29, not 28.
    """
    return math.floor(round(eta * total, 9))


def assign_confidence_targets(errors, eta: float = 0.8) -> np.ndarray:
    """Binary confidence labels for a flat vector of per-pixel absolute errors.

    Errors are ranked ascending with ties broken by original index; the lowest
    ``floor(eta * len)`` receive 1, the rest 0. The result is aligned with the
    input order.

    >>> assign_confidence_targets([0.1, 0.5, 0.2, 0.3, 0.4], 0.8).tolist()
    [1.0, 0.0, 1.0, 1.0, 1.0]
    """
    errors = np.asarray(errors)
    if errors.ndim != 1:
        errors = errors.reshape(-1)
    if errors.size < 2:
        raise ValueError(f"need at least 2 errors to rank, got {errors.size}")
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must be in (0, 1), got {eta}")
    if not np.all(np.isfinite(errors)):
        raise ValueError("errors must be finite")
    if np.any(errors < 0):
        raise ValueError("errors must be non-negative")
    order = np.argsort(errors, kind="stable")
    targets = np.zeros(errors.size, dtype=np.float32)
    targets[order[: kept_count(eta, errors.size)]] = 1.0
    return targets


def image_level_targets(errors: np.ndarray, eta: float = 0.8) -> np.ndarray:
    """Alternative labeling that ranks whole images by mean absolute error.

    ``errors`` has shape B x H x W; every pixel inherits its image's label.
    """
    per_image = errors.reshape(errors.shape[0], -1).mean(axis=1, dtype=np.float64)
    labels = assign_confidence_targets(per_image, eta)
    return np.broadcast_to(labels[:, None, None], errors.shape).astype(np.float32)


def _as_tensor(x: MapLike, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


def _check_shapes(name: str, *maps) -> None:
    shapes = {tuple(np.shape(m.data if isinstance(m, Tensor) else m)) for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"{name}: shape mismatch {sorted(shapes)}")


def loss_regression(y: Tensor, y_star: MapLike) -> Tensor:
    """Mean squared error over every pixel of every batch item."""
    _check_shapes("loss_regression", y, y_star)
    return (y - _as_tensor(y_star, y)).square().mean()


def loss_confidence(y: Tensor, y_star: MapLike, c: Tensor, c_star: MapLike) -> Tensor:
    """Error-weighted confidence loss, mean of ``|y - y*| * (c - c*)**2``."""
    _check_shapes("loss_confidence", y, y_star, c, c_star)
    weight = (y - _as_tensor(y_star, y)).abs()
    return (weight * (c - _as_tensor(c_star, c)).square()).mean()


def loss_error_sorting(c: Tensor, c_star: MapLike) -> Tensor:
    """Unweighted confidence loss, mean of ``(c - c*)**2``."""
    _check_shapes("loss_error_sorting", c, c_star)
    return (c - _as_tensor(c_star, c)).square().mean()


def loss_absolute_error(y: Tensor, y_star: MapLike, c: Tensor) -> Tensor:
    """Uncertainty ``1 - c`` regressed onto the detached absolute error."""
    _check_shapes("loss_absolute_error", y, y_star, c)
    target = Tensor(np.abs(y.data - np.asarray(getattr(y_star, "data", y_star))), dtype=c.dtype)
    return ((1.0 - c) - target).square().mean()


def loss_gaussian_nll(mu: Tensor, log_var: Tensor, y_star: MapLike) -> Tensor:
    """Mean per-pixel Gaussian negative log-likelihood."""
    _check_shapes("loss_gaussian_nll", mu, log_var, y_star)
    resid2 = (_as_tensor(y_star, mu) - mu).square()
    return ((log_var + resid2 * (-log_var).exp() + LOG_2PI) * 0.5).mean()
