"""Re-projection back to pixel space: broadcast, residual, linearity."""

import numpy as np
import pytest

import reference
from pixelgraph import tensor as tc
from pixelgraph.errors import DimensionError
from pixelgraph.graph_build import ProjectionMatrix, harden
from pixelgraph.reprojection import ReprojectionConfig, reproject
from pixelgraph.tensor import Tensor, constant, finite_difference_check


def rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def soft_projection(n, h, w, seed):
    scores = tc.softmax(Tensor(rand((n, h * w), seed) * 2.0), axis=0)
    return ProjectionMatrix(scores=scores, mode="soft", spatial=(h, w), soft=scores)


def test_hard_projection_broadcasts_node_features():
    h, w, n = 2, 3, 3
    p = harden(soft_projection(n, h, w, seed=0))
    nodes = constant(rand((n, n), 1))
    cfg = ReprojectionConfig(t_prime=constant(np.eye(n)), residual=False)
    out = reproject(nodes, p, constant(np.zeros((n, h, w))), cfg)
    owners = p.scores.data.argmax(axis=0)
    for pix, owner in enumerate(owners):
        np.testing.assert_allclose(out.data.reshape(n, -1)[:, pix],
                                   nodes.data[owner], atol=1e-12)


def test_residual_identity_with_zero_nodes():
    h, w, n, d, c = 3, 4, 4, 2, 5
    p = soft_projection(n, h, w, seed=2)
    x_in = Tensor(rand((c, h, w), 3))
    cfg = ReprojectionConfig(t_prime=constant(rand((c, d), 4)), residual=True)
    out = reproject(constant(np.zeros((n, d))), p, x_in, cfg)
    np.testing.assert_array_equal(out.data, x_in.data)


def test_reproject_matches_loop_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n, d = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        c = int(rng.integers(1, 5))
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        p = soft_projection(n, h, w, seed=int(rng.integers(1 << 30)))
        nodes = rng.normal(size=(n, d))
        t_prime = rng.normal(size=(c, d))
        x_in = rng.normal(size=(c, h, w))
        cfg = ReprojectionConfig(t_prime=Tensor(t_prime), residual=True)
        got = reproject(Tensor(nodes), p, Tensor(x_in), cfg).data
        want = reference.loop_reproject(p.scores.data, nodes, t_prime, x_in)
        np.testing.assert_allclose(got.reshape(c, -1), want, atol=1e-12)


def test_reproject_linearity_in_node_features():
    h, w, n, d, c = 3, 3, 4, 3, 2
    p = soft_projection(n, h, w, seed=6)
    cfg = ReprojectionConfig(t_prime=constant(rand((c, d), 7)), residual=False)
    x0 = constant(np.zeros((c, h, w)))
    va, vb = rand((n, d), 8), rand((n, d), 9)
    lhs = reproject(constant(va + 2.5 * vb), p, x0, cfg).data
    rhs = (reproject(constant(va), p, x0, cfg).data
           + 2.5 * reproject(constant(vb), p, x0, cfg).data)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_hard_round_trip_region_sums():
    # project then reproject with hard P: each pixel receives its region's
    # summed feature (no mass normalization by design).
    from pixelgraph.graph_build import project_nodes

    h, w, n = 2, 4, 2
    scores = np.zeros((n, h * w))
    scores[0, : h * w // 2] = 1.0
    scores[1, h * w // 2:] = 1.0
    p = ProjectionMatrix(scores=Tensor(scores), mode="hard", spatial=(h, w),
                         soft=Tensor(scores))
    z = rand((3, h, w), 10)
    v = project_nodes(Tensor(z), p)
    cfg = ReprojectionConfig(t_prime=constant(np.eye(3)), residual=False)
    out = reproject(v, p, constant(np.zeros((3, h, w))), cfg).data.reshape(3, -1)
    want = reference.loop_reproject(scores, reference.loop_project_nodes(scores, z),
                                    np.eye(3))
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_full_gradient_through_reprojection():
    h, w, n, d, c = 3, 3, 3, 2, 2
    p_logits = Tensor(rand((n, h * w), 11), requires_grad=True)
    nodes = Tensor(rand((n, d), 12), requires_grad=True)
    t_prime = Tensor(rand((c, d), 13), requires_grad=True)
    x_in = Tensor(rand((c, h, w), 14), requires_grad=True)
    sink = constant(rand((c, h, w), 15))

    def f(ps):
        soft = tc.softmax(ps[0], axis=0)
        p = ProjectionMatrix(scores=soft, mode="soft", spatial=(h, w), soft=soft)
        cfg = ReprojectionConfig(t_prime=ps[2], residual=True)
        return tc.tensor_sum(tc.mul(reproject(ps[1], p, ps[3], cfg), sink))

    assert finite_difference_check(f, [p_logits, nodes, t_prime, x_in]) < 1e-6


def test_reproject_shape_errors():
    p = soft_projection(3, 2, 2, seed=16)
    cfg = ReprojectionConfig(t_prime=constant(rand((2, 2), 17)))
    with pytest.raises(DimensionError):
        reproject(constant(rand((4, 2), 18)), p, constant(rand((2, 2, 2), 19)), cfg)
    with pytest.raises(DimensionError):
        reproject(constant(rand((3, 2), 18)), p, constant(rand((5, 2, 2), 19)), cfg)
