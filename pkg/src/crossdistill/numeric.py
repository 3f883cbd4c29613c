"""Dense float64 linear algebra, activations, losses and Adam.

Everything here works on numpy arrays in double precision.  Functions are
pure: they never mutate their arguments, so identical inputs always give
bit-identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError

DTYPE = np.float64


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def affine_forward(x, w, bias) -> np.ndarray:
    """Return ``x @ w + bias`` with the bias broadcast over rows."""
    x = as_matrix(x)
    w = as_matrix(w)
    bias = np.asarray(bias, dtype=DTYPE)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"input {x.shape} does not match weights {w.shape}")
    if bias.shape != (w.shape[1],):
        raise ShapeError(f"bias {bias.shape} does not match weights {w.shape}")
    return x @ w + bias


def affine_backward(x, w, grad_out):
    """Gradients of an affine layer.

    Returns ``(grad_x, grad_w, grad_bias)`` for upstream gradient ``grad_out``
    of shape ``(batch, w.cols)``.
    """
    x = as_matrix(x)
    w = as_matrix(w)
    grad_out = as_matrix(grad_out)
    if x.shape[1] != w.shape[0] or grad_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(
            f"inconsistent shapes x={x.shape} w={w.shape} grad_out={grad_out.shape}"
        )
    grad_w = x.T @ grad_out
    grad_x = grad_out @ w.T
    grad_bias = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_bias


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if x.shape != grad_out.shape:
        raise ShapeError(f"x {x.shape} and grad_out {grad_out.shape} differ")
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid(x):
    """Logistic function, evaluated without overflow for any finite input.

    Scalars in, float out; arrays in, array out.
    """
    x = np.asarray(x, dtype=DTYPE)
    # exp(-|x|) never overflows; pick the branch that keeps it in (0, 1].
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(out) if out.ndim == 0 else out


def softplus(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def bce_with_logits(logit, target):
    """Logistic loss against a (possibly soft) target in [0, 1].

    Returns ``(loss, dloss/dlogit)``, elementwise for array inputs.
    """
    logit = np.asarray(logit, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if np.any(~((target >= 0.0) & (target <= 1.0))):
        raise DomainError("bce target must lie in [0, 1]")
    loss = np.maximum(logit, 0.0) - logit * target + np.log1p(np.exp(-np.abs(logit)))
    grad = np.asarray(sigmoid(logit)) - target
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def mse(pred, target):
    """Squared error ``(pred - target)**2`` and its derivative in ``pred``."""
    diff = np.asarray(pred, dtype=DTYPE) - np.asarray(target, dtype=DTYPE)
    loss = diff * diff
    grad = 2.0 * diff
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size, dtype=DTYPE), np.zeros(size, dtype=DTYPE), 0)


@dataclass(frozen=True)
class AdamOptions:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or not self.eps > 0:
            raise DomainError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError("beta1 and beta2 must lie in [0, 1)")


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    """
    AdamOptions(lr, beta1, beta2, eps)
    params = np.asarray(params, dtype=DTYPE)
    grads = np.asarray(grads, dtype=DTYPE)
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise ShapeError(
            f"params {params.shape}, grads {grads.shape} and state "
            f"{state.first_moment.shape} must have equal length"
        )
    step = state.step + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grads
    v = beta2 * state.second_moment + (1.0 - beta2) * (grads * grads)
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, step)
