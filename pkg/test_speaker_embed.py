import numpy as np
import pytest

from core.errors import DimensionError, EmptyInputError
from core.gradcheck import check_leaves
from core.tensor import Tensor, tsum
from tts.speaker_embed import EmbeddingCache, SpeakerEmbedder, embed, weighted_sum


def _embedder(seed=0, layers=4, width=16, d_emb=8):
    return SpeakerEmbedder(np.random.default_rng(seed), layers, width, d_emb)


def test_weighted_sum_examples():
    rng = np.random.default_rng(0)
    single = rng.normal(size=(1, 5, 3))
    assert np.allclose(weighted_sum(Tensor(single), Tensor([2.7])).data, single[0], atol=1e-15)

    layer = rng.normal(size=(5, 3))
    same = np.stack([layer] * 4)
    assert np.allclose(weighted_sum(Tensor(same), Tensor(rng.normal(size=4))).data, layer, atol=1e-12)

    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert np.allclose(weighted_sum(Tensor(np.stack([a, b])), Tensor([0.0, 0.0])).data, (a + b) / 2, atol=1e-15)


def test_weighted_sum_layer_mismatch():
    with pytest.raises(DimensionError):
        weighted_sum(Tensor(np.zeros((3, 4, 2))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("frames", [1, 7, 50])
def test_embedding_shape(frames):
    module = _embedder()
    features = np.random.default_rng(frames).normal(size=(4, frames, 16))
    assert embed(Tensor(features), module).shape == (8,)


def test_single_frame_attention_is_one():
    module = _embedder()
    _, attention = module.embed_with_attention(Tensor(np.random.default_rng(1).normal(size=(4, 1, 16))))
    assert attention.data.tolist() == [1.0]


def test_attention_sums_to_one_and_embedding_is_deterministic():
    module = _embedder()
    features = Tensor(np.random.default_rng(2).normal(size=(4, 23, 16)))
    first, attention = module.embed_with_attention(features)
    second = module(features)
    assert abs(attention.data.sum() - 1.0) <= 1e-12
    assert np.array_equal(first.data, second.data)


def test_embedding_errors():
    module = _embedder()
    with pytest.raises(EmptyInputError):
        module(Tensor(np.zeros((4, 0, 16))))
    with pytest.raises(DimensionError):
        module(Tensor(np.zeros((3, 5, 16))))
    with pytest.raises(DimensionError):
        SpeakerEmbedder(np.random.default_rng(0), 4, 16, 7)


def test_repeating_frames_moves_embedding_a_bounded_amount():
    module = _embedder()
    features = np.random.default_rng(3).normal(size=(4, 12, 16))
    base = module(Tensor(features)).data
    doubled = module(Tensor(np.repeat(features, 2, axis=1))).data
    shift = np.linalg.norm(doubled - base)
    assert np.all(np.isfinite(doubled)) and 0.0 < shift < 2.0 * np.linalg.norm(base) + 1.0


def test_embed_many_averages_single_embeddings():
    module = _embedder()
    rng = np.random.default_rng(4)
    refs = [Tensor(rng.normal(size=(4, t, 16))) for t in (5, 9, 3)]
    expected = np.mean([module(r).data for r in refs], axis=0)
    assert np.allclose(module.embed_many(refs).data, expected, atol=1e-14)
    with pytest.raises(EmptyInputError):
        module.embed_many([])


def test_embedding_gradients_match_finite_differences():
    module = _embedder(seed=5, layers=3, width=5, d_emb=6)
    rng = np.random.default_rng(6)
    features = Tensor(rng.normal(size=(3, 4, 5)))
    readout = Tensor(rng.normal(size=6))
    leaves = dict(module.named_parameters())
    leaves["layer_logits"].data[...] = rng.normal(size=3)
    report = check_leaves(lambda: tsum(module(features) * readout), leaves, tol=1e-4)
    assert report.passed, f"max_rel_err={report.max_rel_err:.2e} at {report.worst}"


def test_embedding_cache_round_trip(tmp_path):
    module = _embedder()
    features = Tensor(np.random.default_rng(7).normal(size=(4, 6, 16)))
    cache = EmbeddingCache(tmp_path / "emb.cache", "abc123")
    vector = cache.get_or_compute("F-pro-00_000", features, module)
    assert "F-pro-00_000" in cache and len(cache) == 1
    cache.save({"seed": 3})

    reloaded = EmbeddingCache(tmp_path / "emb.cache", "abc123")
    assert np.array_equal(reloaded.get("F-pro-00_000").data, vector.data)
    assert reloaded.get("missing") is None

    stale = EmbeddingCache(tmp_path / "emb.cache", "other")
    assert len(stale) == 0


def test_embedding_cache_averages_several_references(tmp_path):
    module = _embedder()
    rng = np.random.default_rng(8)
    refs = [Tensor(rng.normal(size=(4, t, 16))) for t in (5, 9)]
    cache = EmbeddingCache(tmp_path / "emb.cache", "abc123")
    vector = cache.get_or_compute("a,b", refs, module)
    assert np.allclose(vector.data, module.embed_many(refs).data, rtol=0.0, atol=1e-14)
    assert np.array_equal(cache.get_or_compute("a,b", [], module).data, vector.data)
    single = cache.get_or_compute("a", refs[:1], module)
    assert np.array_equal(single.data, module(refs[0]).data)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
