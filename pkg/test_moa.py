import numpy as np
import pytest

from core.errors import ConfigurationError, ContractError, DimensionError
from core.gradcheck import check_leaves
from core.tensor import Tensor, tsum
from tts.config import MoAConfig, validate_config
from tts.moa import (Adapter, GatingNetwork, MoAModule, SpecializedMoA, count_moa_flops, gate, importance_loss,
                     mean_importance_loss, moa_flops, moa_forward)

SPARSE = MoAConfig(n_adapters=8, top_k=3, bottleneck=4)
DENSE = MoAConfig(n_adapters=3, top_k=None, bottleneck=4)


def _randomize_adapters(m: MoAModule, rng):
    for adapter in m.adapters:
        adapter.up.weight.data[...] = rng.normal(0.0, 0.5, adapter.up.weight.shape)
        adapter.up.bias.data[...] = rng.normal(0.0, 0.1, adapter.up.bias.shape)


def _fixed_gate(g: GatingNetwork, probs):
    g.projection.weight.data[...] = 0.0
    g.projection.bias.data[...] = np.log(probs)


def test_gating_contract_over_random_embeddings():
    rng = np.random.default_rng(0)
    sparse = GatingNetwork(rng, 16, 8, top_k=3)
    dense = GatingNetwork(rng, 16, 3)
    for _ in range(1000):
        x_e = Tensor(rng.normal(0.0, 2.0, 16))
        s = sparse(x_e)
        assert np.count_nonzero(s.weights.data) == 3 and len(s.survivors) == 3
        assert abs(s.weights.data.sum() - 1.0) <= 1e-12
        d = dense(x_e).weights.data
        assert np.all(d > 0.0) and abs(d.sum() - 1.0) <= 1e-12


def test_gate_examples():
    rng = np.random.default_rng(1)
    uniform = GatingNetwork(rng, 6, 4)
    uniform.projection.weight.data[...] = 0.0
    assert np.allclose(gate(uniform, Tensor(rng.normal(size=6))).weights.data, 0.25, atol=1e-15)

    dense, full_k = GatingNetwork(rng, 6, 4), GatingNetwork(rng, 6, 4, top_k=4)
    full_k.projection.weight.data[...] = dense.projection.weight.data
    x_e = Tensor(rng.normal(size=6))
    assert np.array_equal(dense(x_e).weights.data, full_k(x_e).weights.data)

    pruned = GatingNetwork(rng, 6, 5, top_k=3)
    _fixed_gate(pruned, [0.5, 0.2, 0.15, 0.1, 0.05])
    out = pruned(Tensor(np.zeros(6)))
    assert np.allclose(out.weights.data, [0.58824, 0.23529, 0.17647, 0.0, 0.0], atol=1e-5)
    assert out.survivors.tolist() == [0, 1, 2]


def test_top_k_ties_resolve_to_lowest_index():
    g = GatingNetwork(np.random.default_rng(2), 4, 8, top_k=3)
    g.projection.weight.data[...] = 0.0
    out = g(Tensor(np.ones(4)))
    assert out.survivors.tolist() == [0, 1, 2]
    assert np.count_nonzero(out.weights.data) == 3
    assert np.allclose(out.weights.data[:3], 1 / 3, atol=1e-15)


def test_gate_configuration_errors():
    with pytest.raises(ConfigurationError):
        GatingNetwork(np.random.default_rng(0), 4, 3, top_k=4)
    with pytest.raises(ConfigurationError):
        validate_config(MoAConfig, {"n_adapters": 3, "top_k": 5})
    g = GatingNetwork(np.random.default_rng(0), 4, 3)
    with pytest.raises(DimensionError):
        g(Tensor(np.ones(5)))


def test_adapter_examples():
    rng = np.random.default_rng(3)
    a = Adapter(rng, 6, 2)
    x = Tensor(rng.normal(size=(5, 6)))
    out = a(x)
    assert out.shape == (5, 6) and np.all(out.data == 0.0)

    hand = Adapter(rng, 2, 1)
    hand.down.weight.data[...] = [[1.0], [0.0]]
    hand.down.bias.data[...] = [0.5]
    hand.up.weight.data[...] = [[2.0, -1.0]]
    hand.up.bias.data[...] = [0.1, 0.2]
    s = 1.0 / np.sqrt(1.0 + 1e-5)
    expected = [2.0 * (s + 0.5) + 0.1, -(s + 0.5) + 0.2]
    assert np.allclose(hand(Tensor([2.0, 0.0])).data, expected, atol=1e-12)


def test_adapter_errors():
    with pytest.raises(ConfigurationError):
        Adapter(np.random.default_rng(0), 4, 4)
    with pytest.raises(DimensionError):
        Adapter(np.random.default_rng(0), 4, 2)(Tensor(np.ones((3, 5))))


@pytest.mark.parametrize("config", [SPARSE, DENSE])
def test_identity_at_initialization(config):
    rng = np.random.default_rng(4)
    m = MoAModule(rng, 8, 6, config, site_id="decoder.0")
    for _ in range(20):
        x = Tensor(rng.normal(size=(7, 8)))
        assert np.array_equal(moa_forward(m, x, Tensor(rng.normal(size=6))).data, x.data)


def test_weighted_residual_sum():
    rng = np.random.default_rng(5)
    m = MoAModule(rng, 6, 3, DENSE)
    _fixed_gate(m.gate, [0.2, 0.3, 0.5])
    for value, adapter in zip([1.0, 2.0, 3.0], m.adapters):
        adapter.up.bias.data[...] = value
    x = Tensor(rng.normal(size=(5, 6)))
    assert np.allclose(m(x, Tensor(np.zeros(3))).data, x.data + 2.3, atol=1e-12)

    single = MoAModule(rng, 6, 3, MoAConfig(n_adapters=1, top_k=None, bottleneck=2))
    single.adapters[0].up.bias.data[...] = 0.75
    assert np.allclose(single(x, Tensor(rng.normal(size=3))).data, x.data + 0.75, atol=1e-15)


class _Untouchable:
    def __call__(self, x):
        raise AssertionError("pruned adapter was evaluated")


def test_sparse_routing_skips_pruned_adapters():
    rng = np.random.default_rng(6)
    m = MoAModule(rng, 8, 6, SPARSE)
    _randomize_adapters(m, rng)
    x_e = Tensor(rng.normal(size=6))
    survivors = set(m.gate(x_e).survivors.tolist())
    expected = m(Tensor(np.ones((3, 8))), x_e).data
    for i in range(m.n_adapters):
        if i not in survivors:
            m.adapters[i] = _Untouchable()
    assert np.array_equal(m(Tensor(np.ones((3, 8))), x_e).data, expected)


def test_batched_forward_and_trace():
    rng = np.random.default_rng(7)
    m = MoAModule(rng, 8, 6, SPARSE, site_id="pitch")
    _randomize_adapters(m, rng)
    x, x_e = Tensor(rng.normal(size=(2, 5, 8))), Tensor(rng.normal(size=(2, 6)))
    trace = {}
    out = m(x, x_e, trace)
    assert out.shape == (2, 5, 8) and trace["pitch"].shape == (2, 8)
    assert np.allclose(out.data[1], m(Tensor(x.data[1]), Tensor(x_e.data[1])).data, atol=0.0)
    with pytest.raises(DimensionError):
        m(x, Tensor(rng.normal(size=(3, 6))))


def test_permuting_adapters_and_gate_rows_is_equivariant():
    rng = np.random.default_rng(8)
    m = MoAModule(rng, 8, 6, SPARSE)
    _randomize_adapters(m, rng)
    perm = rng.permutation(8)
    p = MoAModule(rng, 8, 6, SPARSE)
    p.adapters = [m.adapters[i] for i in perm]
    p.gate.projection.weight.data[...] = m.gate.projection.weight.data[:, perm]
    p.gate.projection.bias.data[...] = m.gate.projection.bias.data[perm]
    x, x_e = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=6))
    assert np.allclose(p(x, x_e).data, m(x, x_e).data, atol=1e-12, rtol=0.0)


def test_specialized_site_matches_gated_site():
    rng = np.random.default_rng(9)
    m = MoAModule(rng, 8, 6, SPARSE, site_id="decoder.1", layer_index=1)
    _randomize_adapters(m, rng)
    x_e, x = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=(5, 8)))
    fixed = m.specialize(x_e)
    assert isinstance(fixed, SpecializedMoA) and len(fixed.adapters) == 3
    assert fixed.num_parameters() == 3 * m.adapters[0].num_parameters()
    assert np.allclose(fixed(x).data, m(x, x_e).data, atol=1e-12)


def test_importance_loss_identities():
    assert importance_loss(Tensor(np.full((5, 8), 1 / 8))).item() == pytest.approx(0.0, abs=1e-12)
    assert importance_loss(Tensor([[1.0, 0.0], [0.0, 1.0]])).item() == pytest.approx(0.0, abs=1e-12)
    one_hot4 = np.zeros((6, 4))
    one_hot4[:, 0] = 1.0
    assert importance_loss(Tensor(one_hot4)).item() == pytest.approx(3.0, abs=1e-12)
    one_hot8 = np.zeros((16, 8))
    one_hot8[:, 3] = 1.0
    assert abs(importance_loss(Tensor(one_hot8)).item() - 7.0) <= 1e-9


def test_importance_loss_is_scale_free_and_bounded():
    rng = np.random.default_rng(10)
    rows = rng.dirichlet(np.ones(8), size=12)
    base = importance_loss(Tensor(rows)).item()
    assert abs(importance_loss(Tensor(rows * 37.5)).item() - base) <= 1e-12
    for _ in range(200):
        n = int(rng.integers(1, 20))
        one_hot = np.eye(8)[rng.integers(0, 8, n)]
        assert importance_loss(Tensor(one_hot)).item() <= 7.0 + 1e-12


def test_importance_loss_errors():
    with pytest.raises(ContractError):
        importance_loss(Tensor(np.zeros((3, 4))))
    with pytest.raises(DimensionError):
        importance_loss(Tensor(np.ones(4)))


def test_mean_importance_loss_averages_sites():
    balanced = [Tensor(np.full(4, 0.25))] * 2
    collapsed = [Tensor([1.0, 0.0, 0.0, 0.0])] * 2
    loss = mean_importance_loss({"duration": balanced, "decoder.0": collapsed})
    assert loss.item() == pytest.approx(1.5, abs=1e-12)
    assert mean_importance_loss({}).item() == 0.0


@pytest.mark.parametrize("config", [SPARSE, DENSE])
def test_moa_gradients_match_finite_differences(config):
    rng = np.random.default_rng(11)
    m = MoAModule(rng, 6, 4, config)
    _randomize_adapters(m, rng)
    x = Tensor(rng.normal(size=(3, 6)))
    x_e = Tensor(rng.normal(size=4), requires_grad=True)
    readout = Tensor(rng.normal(size=(3, 6)))
    leaves = dict(m.named_parameters())
    leaves["x_e"] = x_e

    def loss():
        trace = {}
        out = m(x, x_e, trace)
        return tsum(out * readout) + importance_loss(trace["moa"].reshape(1, -1) + 0.1)

    report = check_leaves(loss, leaves, tol=1e-4)
    assert report.passed, f"max_rel_err={report.max_rel_err:.2e} at {report.worst}"


def test_importance_loss_gradient():
    rng = np.random.default_rng(12)
    rows = Tensor(rng.dirichlet(np.ones(5), size=4), requires_grad=True)
    assert check_leaves(lambda: importance_loss(rows), {"rows": rows}).passed


def test_flops_sparse_equals_dense_at_inference():
    sparse = count_moa_flops(128, 96, 8, 3, 128, 100)
    dense = count_moa_flops(128, 96, 3, 3, 128, 100)
    assert sparse.adapter_macs == dense.adapter_macs
    assert sparse.combine_macs == dense.combine_macs and sparse.aux_ops == dense.aux_ops
    assert sparse.gating_macs == 128 * 8 and dense.gating_macs == 128 * 3
    assert sparse.train_flops == sparse.infer_flops + sparse.loss_macs


def test_flops_hand_counts():
    none = count_moa_flops(16, 4, 8, 0, 16, 10)
    assert none.adapter_macs == 0 and none.infer_flops == none.gating_macs == 16 * 8
    one = count_moa_flops(128, 96, 1, 1, 128, 1)
    assert one.adapter_macs == 2 * 128 * 96
    assert one.aux_ops == 5 * 128 + 96 + 128

    rng = np.random.default_rng(13)
    assert moa_flops(MoAModule(rng, 8, 6, SPARSE), 10) == count_moa_flops(8, 4, 8, 3, 6, 10)
    assert moa_flops(MoAModule(rng, 8, 6, DENSE), 10) == count_moa_flops(8, 4, 3, 3, 6, 10)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
