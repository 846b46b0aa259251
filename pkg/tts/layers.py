"""Backbone building blocks: projections, norms, convolutions, attention and
the feed-forward Transformer (FFT) block."""

import math
from typing import Optional

import numpy as np

from core import functional as F
from core.module import Module, ones, uniform_fan_in, zeros
from core.tensor import Tensor, matmul, relu, reshape, transpose


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, zero_init: bool = False):
        self.d_in, self.d_out = d_in, d_out
        if zero_init:
            self.weight = zeros((d_in, d_out))
        else:
            self.weight = uniform_fan_in(rng, (d_in, d_out), d_in)
        self.bias = zeros((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = F.LAYER_NORM_EPS):
        self.eps = eps
        self.gamma = ones((width,))
        self.beta = zeros((width,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv1d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int):
        self.kernel = kernel
        self.weight = uniform_fan_in(rng, (kernel, c_in, c_out), kernel * c_in)
        self.bias = zeros((c_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias)


class Dropout(Module):
    """Inverted dropout; the generator is shared model-wide and assigned by the owner."""

    def __init__(self, p: float):
        self.p = p
        self.rng: Optional[np.random.Generator] = None

    def __call__(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.p, self.rng, self.training)


def sinusoid_table(length: int, width: int) -> np.ndarray:
    position = np.arange(length)[:, None]
    div = np.exp(np.arange(0, width, 2) * (-math.log(10000.0) / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: width // 2])
    return table


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.query = Linear(rng, d_model, d_model)
        self.key = Linear(rng, d_model, d_model)
        self.value = Linear(rng, d_model, d_model)
        self.out = Linear(rng, d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        frames = x.shape[0]
        return transpose(reshape(x, (frames, self.n_heads, self.d_head)), (1, 0, 2))

    def __call__(self, x: Tensor) -> Tensor:
        frames, width = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.d_head))
        context = matmul(F.softmax(scores, axis=-1), v)
        merged = reshape(transpose(context, (1, 0, 2)), (frames, width))
        return self.out(merged)


class ConvFeedForward(Module):
    """Position-wise feed-forward as conv(kernel) -> ReLU -> conv(1)."""

    def __init__(self, rng: np.random.Generator, d_model: int, d_filter: int, kernel: int):
        self.conv = Conv1d(rng, d_model, d_filter, kernel)
        self.proj = Linear(rng, d_filter, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(relu(self.conv(x)))


class FFTBlock(Module):
    """Self-attention and feed-forward sub-layers, each residual + post-norm.

    An optional MoA module is applied after the feed-forward sub-layer's
    residual and norm.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, d_filter: int, n_heads: int, kernel: int,
                 dropout: float, moa: Optional[Module] = None):
        self.attention = MultiHeadAttention(rng, d_model, n_heads)
        self.attn_norm = LayerNorm(d_model)
        self.attn_dropout = Dropout(dropout)
        self.ffn = ConvFeedForward(rng, d_model, d_filter, kernel)
        self.ffn_norm = LayerNorm(d_model)
        self.ffn_dropout = Dropout(dropout)
        self.moa = moa

    def __call__(self, x: Tensor, x_e: Optional[Tensor] = None, trace: Optional[dict] = None) -> Tensor:
        x = self.attn_norm(x + self.attn_dropout(self.attention(x)))
        x = self.ffn_norm(x + self.ffn_dropout(self.ffn(x)))
        if self.moa is not None:
            x = self.moa(x, x_e, trace)
        return x
