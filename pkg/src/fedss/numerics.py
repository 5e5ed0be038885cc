"""Dense float64 numerics with hand-coded backward passes.

Conventions used throughout the package: batches are row-major
``(batch, features)`` arrays, layer weights are ``(fan_in, fan_out)``,
biases are ``(fan_out,)`` and classifier matrices are
``(embedding_dim, num_classes)`` with one column per class.

Everything is 64-bit. Inputs are validated to be finite so that
degeneracies surface as errors instead of NaNs drifting through a
training run. Gradients are written by hand per operation; there is no
autodiff tape.
"""

from __future__ import annotations

from typing import Callable, Tuple

import numpy as np

from .errors import ContractViolationError, DegenerateInputError

# Vectors with norm at or below this are rejected rather than clamped.
NORM_EPS = 1e-12


def _require_finite(a: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ContractViolationError(f"{name} contains non-finite entries")
    return a


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractViolationError(f"{name} must be 2-D, got shape {a.shape}")
    return _require_finite(a, name)


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Validate and return a finite 1-D float64 array."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ContractViolationError(f"{name} must be 1-D, got shape {v.shape}")
    return _require_finite(v, name)


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolationError(
            f"matmul shapes do not chain: {a.shape} x {b.shape}"
        )
    return a @ b


def log_sum_exp(o) -> float:
    """Stable log(sum(exp(o))) of a nonempty vector.

    Computed as max(o) + log(sum(exp(o - max(o)))) so it does not
    overflow even for entries near the float64 limit.
    """
    o = as_vector(o, "o")
    if o.size == 0:
        raise ContractViolationError("log_sum_exp of an empty vector")
    hi = float(np.max(o))
    return hi + float(np.log(np.sum(np.exp(o - hi))))


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit euclidean norm."""
    v = as_vector(v, "v")
    norm = float(np.linalg.norm(v))
    if norm <= NORM_EPS:
        raise DegenerateInputError(f"cannot normalize vector with norm {norm!r}")
    return v / norm


def l2_normalize_backward(v, grad_out) -> np.ndarray:
    """Gradient of l2_normalize: applies (I - u u^T) / ||v|| to grad_out."""
    v = as_vector(v, "v")
    grad_out = as_vector(grad_out, "grad_out")
    if v.shape != grad_out.shape:
        raise ContractViolationError("v and grad_out shapes differ")
    norm = float(np.linalg.norm(v))
    if norm <= NORM_EPS:
        raise DegenerateInputError(f"cannot normalize vector with norm {norm!r}")
    u = v / norm
    return (grad_out - u * float(u @ grad_out)) / norm


def relu_forward(x) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise max(x, 0); cache holds the activation mask."""
    x = np.asarray(x, dtype=np.float64)
    _require_finite(x, "x")
    mask = x > 0.0
    return np.where(mask, x, 0.0), mask


def relu_backward(grad_out, cache) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.shape:
        raise ContractViolationError("grad_out shape does not match forward cache")
    return np.where(cache, grad_out, 0.0)


def affine_forward(x, w, b):
    """y = x @ w + b for x of shape (batch, fan_in) or (fan_in,)."""
    w = as_matrix(w, "w")
    b = as_vector(b, "b")
    x = np.asarray(x, dtype=np.float64)
    _require_finite(x, "x")
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != w.shape[0]:
        raise ContractViolationError(
            f"affine input shape {x.shape} does not match weight {w.shape}"
        )
    if w.shape[1] != b.shape[0]:
        raise ContractViolationError(
            f"bias shape {b.shape} does not match weight {w.shape}"
        )
    out = x2 @ w + b
    cache = (x2, w, single)
    return (out[0] if single else out), cache


def affine_backward(grad_out, cache):
    """Returns (grad_x, grad_w, grad_b) for the cached affine forward."""
    x2, w, single = cache
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if g.shape != (x2.shape[0], w.shape[1]):
        raise ContractViolationError("grad_out shape does not match forward cache")
    grad_x = g @ w.T
    grad_w = x2.T @ g
    grad_b = g.sum(axis=0)
    return (grad_x[0] if single else grad_x), grad_w, grad_b


def gradient_check(
    f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    theta0,
    h: float = 1e-5,
) -> float:
    """Compare an analytic gradient against central finite differences.

    ``f`` maps a 1-D parameter vector to a ``(value, gradient)`` pair.
    Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    theta0 = as_vector(theta0, "theta0")
    value0, grad0 = f(theta0)
    if not np.isfinite(value0):
        raise ContractViolationError("f(theta0) is not finite")
    grad0 = as_vector(np.asarray(grad0, dtype=np.float64), "analytic gradient")
    if grad0.shape != theta0.shape:
        raise ContractViolationError("gradient shape does not match theta0")
    worst = 0.0
    for i in range(theta0.size):
        step = np.zeros_like(theta0)
        step[i] = h
        hi, _ = f(theta0 + step)
        lo, _ = f(theta0 - step)
        numeric = (float(hi) - float(lo)) / (2.0 * h)
        err = abs(float(grad0[i]) - numeric) / max(1.0, abs(float(grad0[i])))
        worst = max(worst, err)
    return worst
