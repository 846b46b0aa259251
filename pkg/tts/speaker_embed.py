"""Speaker embedding module: learnable layer weighting, bidirectional GRU and
attention pooling over a stack of layered reference features [L, T, F]."""

import logging
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from core import functional as F
from core.errors import DimensionError, EmptyInputError
from core.module import Module, uniform_fan_in, zeros
from core.serialization import load_tensors, save_tensors
from core.tensor import Tensor, as_tensor, concat, getitem, matmul, mean, reshape, sigmoid, stack, tanh

logger = logging.getLogger(__name__)


def weighted_sum(features: Tensor, layer_logits: Tensor) -> Tensor:
    """softmax(layer_logits)-weighted sum over the layer axis: [L, T, F] -> [T, F]."""
    features, layer_logits = as_tensor(features), as_tensor(layer_logits)
    if features.ndim != 3 or layer_logits.shape != (features.shape[0],):
        raise DimensionError(f"weighted_sum: features {features.shape} vs layer logits {layer_logits.shape}")
    layers, frames, width = features.shape
    weights = F.softmax(layer_logits)
    flat = reshape(features, (layers, frames * width))
    return reshape(matmul(weights, flat), (frames, width))


class GRU(Module):
    """Single-direction GRU (reset gate applied to the recurrent projection)."""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int):
        self.hidden = hidden
        self.w_ih = uniform_fan_in(rng, (d_in, 3 * hidden), hidden)
        self.w_hh = uniform_fan_in(rng, (hidden, 3 * hidden), hidden)
        self.b_ih = zeros((3 * hidden,))
        self.b_hh = zeros((3 * hidden,))

    def __call__(self, seq: Tensor, reverse: bool = False) -> Tensor:
        frames = seq.shape[0]
        H = self.hidden
        projected = F.linear(seq, self.w_ih, self.b_ih)
        x_r, x_z, x_n = (getitem(projected, (slice(None), slice(i * H, (i + 1) * H))) for i in range(3))
        h = as_tensor(np.zeros(H))
        states = [None] * frames
        order = range(frames - 1, -1, -1) if reverse else range(frames)
        for t in order:
            recurrent = F.linear(h, self.w_hh, self.b_hh)
            r = sigmoid(getitem(x_r, t) + getitem(recurrent, slice(0, H)))
            z = sigmoid(getitem(x_z, t) + getitem(recurrent, slice(H, 2 * H)))
            n = tanh(getitem(x_n, t) + r * getitem(recurrent, slice(2 * H, 3 * H)))
            h = n + z * (h - n)
            states[t] = h
        return stack(states)


class SpeakerEmbedder(Module):
    def __init__(self, rng: np.random.Generator, n_layers: int, feat_width: int, d_emb: int):
        if d_emb % 2:
            raise DimensionError(f"embedding width must be even, got {d_emb}")
        self.n_layers, self.feat_width, self.d_emb = n_layers, feat_width, d_emb
        self.layer_logits = zeros((n_layers,))
        self.forward_gru = GRU(rng, feat_width, d_emb // 2)
        self.backward_gru = GRU(rng, feat_width, d_emb // 2)
        self.score = uniform_fan_in(rng, (d_emb,), d_emb)
        self.proj_weight = uniform_fan_in(rng, (d_emb, d_emb), d_emb)
        self.proj_bias = zeros((d_emb,))

    def embed_with_attention(self, features: Tensor) -> Tuple[Tensor, Tensor]:
        features = as_tensor(features)
        if features.ndim != 3 or features.shape[0] != self.n_layers or features.shape[2] != self.feat_width:
            raise DimensionError(
                f"reference features {features.shape} do not match [L={self.n_layers}, T, F={self.feat_width}]")
        if features.shape[1] == 0:
            raise EmptyInputError("reference features have no frames")
        summed = weighted_sum(features, self.layer_logits)
        hidden = concat([self.forward_gru(summed), self.backward_gru(summed, reverse=True)], axis=1)
        attention = F.softmax(matmul(hidden, self.score))
        pooled = matmul(attention, hidden)
        return F.linear(pooled, self.proj_weight, self.proj_bias), attention

    def __call__(self, features: Tensor) -> Tensor:
        return self.embed_with_attention(features)[0]

    def embed_many(self, references: Sequence[Tensor]) -> Tensor:
        """Average of single-reference embeddings."""
        if not references:
            raise EmptyInputError("no reference utterances given")
        return mean(stack([self(ref) for ref in references]), axis=0)


def embed(features: Tensor, module: SpeakerEmbedder) -> Tensor:
    return module(features)


class EmbeddingCache:
    """Precomputed speaker embeddings keyed by corpus utterance id.

    One tensor file per cache; ``fingerprint`` ties it to the checkpoint that
    produced the vectors and a mismatch discards the stored entries.
    """

    def __init__(self, path, fingerprint: str):
        self.path = Path(path)
        self.fingerprint = fingerprint
        self.vectors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        if self.path.is_file():
            tensors, meta = load_tensors(self.path)
            if meta.get("fingerprint") == fingerprint:
                self.vectors = tensors
                logger.info("Loaded %d cached embeddings from %s", len(tensors), self.path)
            else:
                logger.warning("Embedding cache %s belongs to another checkpoint; ignoring it", self.path)

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, utterance_id: str) -> Optional[Tensor]:
        vector = self.vectors.get(utterance_id)
        return None if vector is None else Tensor(vector)

    def put(self, utterance_id: str, embedding: Tensor) -> None:
        self.vectors[utterance_id] = np.array(as_tensor(embedding).data)

    def get_or_compute(self, utterance_id: str, features, module: SpeakerEmbedder) -> Tensor:
        """``features`` is one [L, T, F] reference or a list of them, averaged by ``embed_many``."""
        cached = self.get(utterance_id)
        if cached is None:
            if isinstance(features, (list, tuple)):
                embedding = module.embed_many(features) if len(features) > 1 else module(features[0])
            else:
                embedding = module(features)
            cached = embedding.detach()
            self.put(utterance_id, cached)
        return cached

    def save(self, provenance: Optional[dict] = None) -> None:
        meta = {"fingerprint": self.fingerprint, **(provenance or {})}
        save_tensors(self.path, self.vectors, meta)
        logger.debug("Saved %d embeddings to %s", len(self.vectors), self.path)
