"""Graph layers: message split, reasoning baseline, stacking, equivariance."""

import numpy as np
import pytest

import reference
from pixelgraph import tensor as tc
from pixelgraph.errors import ConfigError, DimensionError
from pixelgraph.gnn import (
    GcnLayer,
    GnnStack,
    ReasoningLayer,
    gcn_forward,
    graph_reasoning_forward,
    stack_forward,
)
from pixelgraph.graph_build import normalize_adjacency
from pixelgraph.tensor import Tensor, constant, finite_difference_check


def rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def random_adjacency(n, seed):
    sym = rand((n, n), seed)
    return normalize_adjacency(Tensor(sym + sym.T))


def layer_from(ws, wn, agg="sum"):
    return GcnLayer(Tensor(ws), Tensor(wn), agg)


def test_gcn_isolated_nodes_identity():
    nodes = constant(np.abs(rand((4, 3), 0)))
    layer = layer_from(np.eye(3), rand((3, 3), 1))
    out = gcn_forward(nodes, constant(np.zeros((4, 4))), layer)
    np.testing.assert_array_equal(out.data, nodes.data)


def test_gcn_two_node_swap():
    nodes = Tensor(rand((2, 3), 2))
    adjacency = constant(np.array([[0.0, 1.0], [1.0, 0.0]]))
    layer = layer_from(np.zeros((3, 3)), np.eye(3))
    out = gcn_forward(nodes, adjacency, layer)
    np.testing.assert_allclose(out.data[0], np.maximum(nodes.data[1], 0.0), atol=1e-15)
    np.testing.assert_allclose(out.data[1], np.maximum(nodes.data[0], 0.0), atol=1e-15)


@pytest.mark.parametrize("agg", ["sum", "mean", "max"])
def test_gcn_matches_loop_oracle(agg):
    rng = np.random.default_rng(3)
    for _ in range(15):
        n, d = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        nodes = rng.normal(size=(n, d))
        adjacency = random_adjacency(n, int(rng.integers(1 << 30)))
        ws, wn = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        got = gcn_forward(Tensor(nodes), adjacency, layer_from(ws, wn, agg)).data
        want = reference.loop_gcn(nodes, adjacency.data, ws, wn, agg)
        np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("agg", ["sum", "mean", "max"])
def test_gcn_gradient(agg):
    rng = np.random.default_rng(7)
    n, d = 5, 3
    nodes = Tensor(rng.normal(size=(n, d)), requires_grad=True)
    adjacency = random_adjacency(n, 8)
    ws = Tensor(rng.normal(size=(d, d)), requires_grad=True)
    wn = Tensor(rng.normal(size=(d, d)), requires_grad=True)
    sink = constant(rng.normal(size=(n, d)))

    def f(ps):
        out = gcn_forward(ps[0], adjacency, GcnLayer(ps[1], ps[2], agg))
        return tc.tensor_sum(tc.mul(out, sink))

    assert finite_difference_check(f, [nodes, ws, wn]) < 1e-6


def test_gcn_mean_zero_row_gives_zero_message():
    nodes = Tensor(rand((3, 2), 9))
    adjacency = constant(np.zeros((3, 3)))
    layer = layer_from(np.zeros((2, 2)), rand((2, 2), 10), "mean")
    out = gcn_forward(nodes, adjacency, layer)
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_reasoning_zero_adjacency_identity():
    nodes = constant(np.abs(rand((4, 3), 11)))
    out = graph_reasoning_forward(nodes, constant(np.zeros((4, 4))),
                                  constant(np.eye(3)))
    np.testing.assert_array_equal(out.data, nodes.data)


def test_reasoning_self_loop_annihilates():
    nodes = Tensor(rand((4, 3), 12))
    out = graph_reasoning_forward(nodes, constant(np.eye(4)), Tensor(rand((3, 3), 13)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_reasoning_matches_loop_oracle_and_gradient():
    rng = np.random.default_rng(14)
    for _ in range(15):
        n, d = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        nodes = rng.normal(size=(n, d))
        adjacency = random_adjacency(n, int(rng.integers(1 << 30)))
        w = rng.normal(size=(d, d))
        got = graph_reasoning_forward(Tensor(nodes), adjacency, Tensor(w)).data
        want = reference.loop_graph_reasoning(nodes, adjacency.data, w)
        np.testing.assert_allclose(got, want, atol=1e-12)

    nodes = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    adjacency = random_adjacency(4, 15)
    sink = constant(rng.normal(size=(4, 3)))
    err = finite_difference_check(
        lambda ps: tc.tensor_sum(tc.mul(
            graph_reasoning_forward(ps[0], adjacency, ps[1]), sink)),
        [nodes, w],
    )
    assert err < 1e-6


def test_stack_single_layer_equals_op():
    nodes = Tensor(rand((4, 3), 16))
    adjacency = random_adjacency(4, 17)
    layer = layer_from(rand((3, 3), 18), rand((3, 3), 19))
    stack = GnnStack([layer])
    np.testing.assert_array_equal(stack_forward(nodes, adjacency, stack).data,
                                  gcn_forward(nodes, adjacency, layer).data)


def test_stack_two_swap_layers_recover_relu():
    nodes = Tensor(rand((2, 3), 20))
    adjacency = constant(np.array([[0.0, 1.0], [1.0, 0.0]]))
    swap = layer_from(np.zeros((3, 3)), np.eye(3))
    out = stack_forward(nodes, adjacency, GnnStack([swap, swap]))
    np.testing.assert_allclose(out.data, np.maximum(nodes.data, 0.0), atol=1e-15)


def test_stack_three_layers_composition():
    rng = np.random.default_rng(21)
    nodes = Tensor(rng.normal(size=(5, 4)))
    adjacency = random_adjacency(5, 22)
    layers = [layer_from(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
              for _ in range(3)]
    got = stack_forward(nodes, adjacency, GnnStack(layers)).data
    h = nodes
    for layer in layers:
        h = gcn_forward(h, adjacency, layer)
    np.testing.assert_array_equal(got, h.data)


def test_stack_empty_rejected():
    with pytest.raises(ConfigError):
        stack_forward(Tensor(rand((3, 2), 0)), constant(np.zeros((3, 3))), GnnStack([]))


def test_permutation_equivariance():
    rng = np.random.default_rng(23)
    for agg in ("sum", "mean", "max"):
        n, d = 5, 4
        nodes = rng.normal(size=(n, d))
        adjacency = random_adjacency(n, int(rng.integers(1 << 30))).data
        ws, wn = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        pi = np.eye(n)[rng.permutation(n)]
        layer = layer_from(ws, wn, agg)
        direct = gcn_forward(Tensor(pi @ nodes), constant(pi @ adjacency @ pi.T),
                             layer).data
        permuted = pi @ gcn_forward(Tensor(nodes), constant(adjacency), layer).data
        np.testing.assert_allclose(direct, permuted, atol=1e-12)


def test_locality_jacobian_sparsity():
    # Perturbing node j only moves node i when A_ij > 0 (or i == j via W_S).
    rng = np.random.default_rng(24)
    n, d = 5, 3
    adjacency = np.zeros((n, n))
    adjacency[0, 1] = adjacency[1, 0] = 0.7
    adjacency[2, 3] = adjacency[3, 2] = 0.4
    nodes = rng.normal(size=(n, d))
    layer = layer_from(rng.normal(size=(d, d)), rng.normal(size=(d, d)))
    base = gcn_forward(Tensor(nodes), constant(adjacency), layer).data
    for j in range(n):
        bumped = nodes.copy()
        bumped[j] += 0.37
        out = gcn_forward(Tensor(bumped), constant(adjacency), layer).data
        changed = np.abs(out - base).sum(axis=1) > 1e-12
        allowed = adjacency[:, j] > 0
        allowed[j] = True
        assert not np.any(changed & ~allowed)


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionError):
        gcn_forward(Tensor(rand((4, 3), 0)), constant(np.zeros((3, 3))),
                    layer_from(np.eye(3), np.eye(3)))
    with pytest.raises(DimensionError):
        graph_reasoning_forward(Tensor(rand((4, 3), 0)), constant(np.zeros((4, 4))),
                                Tensor(rand((2, 2), 1)))
