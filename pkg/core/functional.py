"""Layer-level operations built on the tensor primitives.

``softmax`` and ``layer_norm`` carry closed-form backward passes; the rest
are compositions and inherit their gradients from the primitives.
"""

from typing import Optional

import numpy as np

from core.errors import DimensionError
from core.tensor import Tensor, _result, as_tensor, concat, getitem, matmul, mean, mul, pad, reshape

LAYER_NORM_EPS = 1e-5


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x @ w + b over the trailing extent of ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim == 0 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
    y = matmul(x, w)
    if b is None:
        return y
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
    return y + b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise DimensionError(f"softmax: empty axis in shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the trailing extent with the population variance."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"layer_norm: empty feature extent in shape {x.shape}")
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(
            f"layer_norm: input shape {x.shape} does not match gamma {gamma.shape} / beta {beta.shape}")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        rows = g.reshape(-1, width)
        dxhat = g * gamma.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = (rows * xhat.reshape(-1, width)).sum(axis=0)
        dbeta = rows.sum(axis=0)
        return dx, dgamma, dbeta

    return _result("layer_norm", out, (x, gamma, beta), backward)


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """'Same'-padded 1-D convolution over time.

    x: [T, C_in], w: [K, C_in, C_out] with odd K, b: [C_out] -> [T, C_out].
    The K shifted views are concatenated along channels so the whole kernel
    is a single matmul.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: input shape {x.shape} does not match kernel shape {w.shape}")
    kernel, c_in, c_out = w.shape
    if kernel % 2 != 1:
        raise DimensionError(f"conv1d: kernel width must be odd, got {kernel}")
    frames = x.shape[0]
    half = kernel // 2
    if kernel == 1:
        cols = x
    else:
        padded = pad(x, ((half, half), (0, 0)))
        cols = concat([getitem(padded, slice(k, k + frames)) for k in range(kernel)], axis=1)
    return linear(cols, reshape(w, (kernel * c_in, c_out)), b)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = as_tensor(pred) - as_tensor(target)
    if diff.shape != as_tensor(pred).shape:
        raise DimensionError(f"mse_loss: prediction shape {pred.shape} vs target shape {as_tensor(target).shape}")
    return mean(mul(diff, diff))
