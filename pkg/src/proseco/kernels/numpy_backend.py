"""Pure-NumPy implementations of the hot numeric kernels.

Reference semantics for the compiled backend: every function here must be
matched by `_ck.pyx` to within float64 rounding. Shapes are `(..., K)` with
the kernel acting on the last axis unless noted.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def log_softmax_fwd(scores: np.ndarray) -> np.ndarray:
    m = np.max(scores, axis=-1, keepdims=True)
    shifted = scores - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def log_softmax_bwd(logp: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad - np.exp(logp) * np.sum(grad, axis=-1, keepdims=True)


def softmax_fwd(scores: np.ndarray) -> np.ndarray:
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_bwd(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True))


def layernorm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = centered * rstd * gain + bias
    return y, mean, rstd


def layernorm_bwd(x, gain, mean, rstd, grad):
    xhat = (x - mean) * rstd
    dxhat = grad * gain
    k = x.shape[-1]
    dx = rstd * (
        dxhat
        - np.sum(dxhat, axis=-1, keepdims=True) / k
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True) / k
    )
    lead = tuple(range(x.ndim - 1))
    dgain = np.sum(grad * xhat, axis=lead)
    dbias = np.sum(grad, axis=lead)
    return dx, dgain, dbias


def silu_fwd(x: np.ndarray):
    """x * sigmoid(x). Returns (y, sigmoid) so backward can reuse it.

    exp overflow saturates to the correct limit (sigmoid -> 0), so the
    warning is suppressed rather than special-cased.
    """
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def silu_bwd(x: np.ndarray, sig: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (sig * (1.0 + x * (1.0 - sig)))


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, bias1, bias2):
    """Fused in-place decoupled-weight-decay moment update.

    ``bias1``/``bias2`` are the bias-correction denominators 1 - beta^k.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / bias1
    vhat = v / bias2
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)
