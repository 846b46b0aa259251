"""Mixture of adapters gated by a speaker embedding.

    MoA(x, x_e) = x + sum_i g_i(x_e) * Adapter_i(x)

Dense routing uses every adapter. Sparse routing keeps the k largest
softmax weights, zeroes the rest and renormalizes the survivors; only the
survivors are evaluated. The survivor set is treated as a constant in the
backward pass.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from core import functional as F
from core.errors import ConfigurationError, ContractError, DimensionError
from core.module import Module
from core.tensor import Tensor, as_tensor, getitem, mean, mul, relu, stack, tsum
from tts.config import MoAConfig, RoutingMode
from tts.layers import LayerNorm, Linear

logger = logging.getLogger(__name__)


class Adapter(Module):
    """Pre-norm bottleneck: up(relu(down(norm(x)))), with no internal residual.

    The up-projection starts at zero so a freshly inserted adapter outputs 0.
    """

    def __init__(self, rng: np.random.Generator, width: int, bottleneck: int):
        if bottleneck >= width:
            raise ConfigurationError(f"adapter bottleneck {bottleneck} must be below width {width}")
        self.width, self.bottleneck = width, bottleneck
        self.norm = LayerNorm(width)
        self.down = Linear(rng, width, bottleneck)
        self.up = Linear(rng, bottleneck, width, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.width:
            raise DimensionError(f"adapter expects trailing extent {self.width}, got shape {x.shape}")
        return self.up(relu(self.down(self.norm(x))))


@dataclass
class GateOutput:
    weights: Tensor          # full length N, zeros at pruned slots
    survivors: np.ndarray    # ascending adapter indices that carry weight


class GatingNetwork(Module):
    """Single projection D_emb -> N followed by softmax (and top-k pruning)."""

    def __init__(self, rng: np.random.Generator, d_emb: int, n_adapters: int, top_k: Optional[int] = None):
        if top_k is not None and not 1 <= top_k <= n_adapters:
            raise ConfigurationError(f"top_k={top_k} must lie in [1, {n_adapters}]")
        self.d_emb, self.n_adapters, self.top_k = d_emb, n_adapters, top_k
        self.projection = Linear(rng, d_emb, n_adapters)

    @property
    def mode(self) -> RoutingMode:
        return RoutingMode.DENSE if self.top_k is None else RoutingMode.SPARSE

    def __call__(self, x_e: Tensor) -> GateOutput:
        x_e = as_tensor(x_e)
        if x_e.shape != (self.d_emb,):
            raise DimensionError(f"gate expects a speaker embedding of shape ({self.d_emb},), got {x_e.shape}")
        probs = F.softmax(self.projection(x_e))
        if self.top_k is None or self.top_k >= self.n_adapters:
            return GateOutput(probs, np.arange(self.n_adapters))
        # stable sort: ties resolve to the lowest adapter index
        survivors = np.sort(np.argsort(-probs.data, kind="stable")[: self.top_k])
        mask = np.zeros(self.n_adapters)
        mask[survivors] = 1.0
        kept = mul(probs, mask)
        return GateOutput(kept / tsum(kept), survivors)


def gate(g: GatingNetwork, x_e: Tensor) -> GateOutput:
    return g(x_e)


class MoAModule(Module):
    def __init__(self, rng: np.random.Generator, width: int, d_emb: int, config: MoAConfig,
                 site_id: str = "moa", layer_index: int = 0):
        self.site_id, self.layer_index = site_id, layer_index
        self.width = width
        self.adapters = [Adapter(rng, width, config.bottleneck) for _ in range(config.n_adapters)]
        self.gate = GatingNetwork(rng, d_emb, config.n_adapters, config.top_k)

    @property
    def n_adapters(self) -> int:
        return len(self.adapters)

    def _mix(self, x: Tensor, routed: GateOutput) -> Tensor:
        total = None
        for i in routed.survivors:
            contribution = mul(getitem(routed.weights, int(i)), self.adapters[i](x))
            total = contribution if total is None else total + contribution
        return x if total is None else x + total

    def __call__(self, x: Tensor, x_e: Tensor, trace: Optional[Dict[str, Tensor]] = None) -> Tensor:
        x, x_e = as_tensor(x), as_tensor(x_e)
        if x.shape[-1] != self.width:
            raise DimensionError(f"MoA site {self.site_id} expects trailing extent {self.width}, got {x.shape}")
        if x_e.ndim == 1:
            routed = self.gate(x_e)
            if trace is not None:
                trace[self.site_id] = routed.weights
            return self._mix(x, routed)
        if x_e.ndim != 2 or x.ndim < 2 or x.shape[0] != x_e.shape[0]:
            raise DimensionError(f"MoA site {self.site_id}: batch of {x_e.shape} embeddings for input {x.shape}")
        outputs, rows = [], []
        for b in range(x.shape[0]):
            routed = self.gate(getitem(x_e, b))
            rows.append(routed.weights)
            outputs.append(self._mix(getitem(x, b), routed))
        if trace is not None:
            trace[self.site_id] = stack(rows)
        return stack(outputs)

    def specialize(self, x_e: Tensor) -> "SpecializedMoA":
        routed = self.gate(as_tensor(x_e).detach())
        weights = routed.weights.data.copy()
        return SpecializedMoA(self.site_id, self.layer_index,
                              [self.adapters[i] for i in routed.survivors],
                              [float(weights[i]) for i in routed.survivors])


def moa_forward(m: MoAModule, x: Tensor, x_e: Tensor) -> Tensor:
    return m(x, x_e)


class SpecializedMoA(Module):
    """MoA pruned to one speaker: surviving adapters with fixed weights, no gate."""

    def __init__(self, site_id: str, layer_index: int, adapters: List[Adapter], weights: List[float]):
        self.site_id, self.layer_index = site_id, layer_index
        self.adapters = adapters
        self.weights = weights

    def __call__(self, x: Tensor, x_e: Optional[Tensor] = None, trace=None) -> Tensor:
        total = None
        for w, adapter in zip(self.weights, self.adapters):
            contribution = mul(as_tensor(np.float64(w)), adapter(x))
            total = contribution if total is None else total + contribution
        return x if total is None else x + total


def importance_loss(gate_rows: Tensor) -> Tensor:
    """Squared coefficient of variation of per-adapter total gate weight."""
    gate_rows = as_tensor(gate_rows)
    if gate_rows.ndim != 2 or gate_rows.shape[0] < 1 or gate_rows.shape[1] < 1:
        raise DimensionError(f"importance_loss expects gate rows [n, N], got shape {gate_rows.shape}")
    importance = tsum(gate_rows, axis=0)
    mu = mean(importance)
    if mu.item() == 0.0:
        raise ContractError("importance is zero on average; the loss is undefined")
    centered = importance - mu
    return mean(centered * centered) / (mu * mu)


def mean_importance_loss(site_rows: Dict[str, Sequence[Tensor]]) -> Tensor:
    """Average of per-site importance losses, each over the batch rows of that site."""
    losses = [importance_loss(stack(list(rows))) for rows in site_rows.values()]
    if not losses:
        return as_tensor(0.0)
    return mean(stack(losses))


@dataclass
class MoAFlops:
    adapter_macs: int
    aux_ops: int
    combine_macs: int
    gating_macs: int
    loss_macs: int
    infer_flops: int
    train_flops: int


def count_moa_flops(width: int, bottleneck: int, n_adapters: int, active: int, d_emb: int,
                    seq_len: int) -> MoAFlops:
    """Analytic multiply-accumulate counts for one site over ``seq_len`` frames.

    Per active adapter and frame: 2*D*B projection MACs, 5*D layer-norm terms
    (mean, variance, normalize, scale, shift) plus B + D bias adds, and D MACs
    to weight and accumulate its output. The gate costs D_emb*N once per
    utterance; the importance loss adds N column sums and 3N moment terms.
    """
    adapter = active * seq_len * 2 * width * bottleneck
    aux = active * seq_len * (5 * width + bottleneck + width)
    combine = active * seq_len * width
    gating = d_emb * n_adapters
    loss = 4 * n_adapters
    infer = adapter + aux + combine + gating
    return MoAFlops(adapter, aux, combine, gating, loss, infer, infer + loss)


def moa_flops(m: MoAModule, seq_len: int) -> MoAFlops:
    active = m.gate.top_k if m.gate.top_k is not None else m.n_adapters
    return count_moa_flops(m.width, m.adapters[0].bottleneck, m.n_adapters, active, m.gate.d_emb, seq_len)
