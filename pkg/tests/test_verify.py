import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loramoe import layers as L
from loramoe import verify as V
from loramoe.numerics import Rng, ShapeError


@pytest.mark.parametrize("dim,n", [(2, 2), (2, 6), (18, 5), (450, 8)])
def test_convexity_random_gates(dim, n):
    rng = Rng(dim, n)
    rep = V.check_region_convexity(V.random_gate(rng, dim, n), dim, 5000, rng)
    assert rep.passed and rep.pairs_same_region > 0
    assert sum(rep.occupancy) == rep.samples


def test_convexity_midpoints_reaches_target():
    rng = Rng(5)
    rep = V.convexity_midpoints(V.random_gate(rng, 450, 8), 450, 3000, rng)
    assert rep.passed and rep.pairs_same_region >= 3000


def test_convexity_preconditions():
    g = V.random_gate(Rng(0), 3, 4)
    with pytest.raises(ShapeError):
        V.check_region_convexity(g, 4, 10, Rng(0))
    g2 = L.GatingNetwork(g.Wg, g.bg, 2)
    with pytest.raises(ValueError):
        V.check_region_convexity(g2, 3, 10, Rng(0))


def brute_nearest(W, x):
    best, best_d = 0, None
    for j, w in enumerate(W):
        d = sum((xi - wi / 2) ** 2 for xi, wi in zip(x, w))
        if best_d is None or d < best_d:
            best, best_d = j, d
    return best


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 7), st.floats(-5, 5), st.integers(0, 2 ** 31))
def test_voronoi_agreement(dim, n, offset, seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(n, dim))
    g = V.voronoi_gate(W, offset)
    pts = rng.uniform(-3, 3, size=(50, dim))
    rep = V.check_voronoi_sites(g, pts)
    assert rep.passed
    assert rep.nearest.tolist() == [brute_nearest(W, p) for p in pts]


def test_literal_minus_half_w_sites_give_farthest_site(rng):
    # with b_j - |w_j|^2/4 constant the arg-max is the site -w_j/2 farthest away
    W = rng.normal(size=(5, 3))
    g = L.GatingNetwork(W, 0.25 * (W * W).sum(axis=1) + 0.7, 1)
    pts = rng.uniform(-3, 3, size=(400, 3))
    d2 = ((pts[:, None, :] + 0.5 * W[None]) ** 2).sum(axis=2)
    assert np.array_equal(V.top1_route(g, pts), d2.argmax(axis=1))
    assert not np.array_equal(V.top1_route(g, pts), d2.argmin(axis=1))


def test_voronoi_rejects_arbitrary_bias():
    g = V.random_gate(Rng(1), 3, 4)
    with pytest.raises(ValueError):
        V.check_voronoi_sites(g, np.zeros((1, 3)))


def test_routing_suite_all_pass():
    res = V.routing_suite(seed=3, dims=(2, 18), experts=(2, 5), n_midpoints=2000)
    assert len(res) == 8 and all(ok for _, ok, _ in res)


@pytest.mark.parametrize("depth", [2, 3])
@pytest.mark.parametrize("n", [2, 5, 8])
@pytest.mark.parametrize("r", [1, 4])
def test_zero_init(depth, n, r, rng):
    m = L.build_model("LoRAMoE", 12, 6, depth, n_experts=n, rank=r, seed=depth * 100 + n * 10 + r)
    x = rng.normal(size=(10, 12))
    y = np.arange(10) % 2
    rep = V.check_zero_init(m, x, y)
    assert rep.outputs_bit_equal and rep.passed
    expected = [[j for j in s if j not in z] for s, z in zip(rep.selected, rep.zero_input)]
    assert rep.nonzero_after_step == expected
    assert rep.zero_input[0] == []  # raw inputs are never all zero
    assert all(not ad.B.any() for blk in m.blocks for ad in blk.adapters)


def test_zero_init_zero_lr_and_sgd(rng):
    m = L.build_model("LoRAMoE", 4, 3, 2, n_experts=4, seed=0)
    x, y = rng.normal(size=(5, 4)), [0, 1, 0, 1, 1]
    lr0 = V.check_zero_init(m, x, y, lr=0.0)
    assert lr0.passed and lr0.nonzero_after_step == [[], []]
    sgd = V.check_zero_init(m, x, y, optimizer="SGD")
    assert sgd.passed
    # this batch routes only dead-ReLU rows to head expert 2
    assert sgd.zero_input == [[], [2]] and sgd.nonzero_after_step[1] == [0, 1]
    with pytest.raises(ValueError):
        V.check_zero_init(L.build_model("MoE", 4, 3), x, y)


def test_zero_init_detects_nonzero_b(rng):
    m = L.build_model("LoRAMoE", 4, 3, 2, n_experts=3, seed=0)
    m.blocks[0].adapters[0].B[...] = 1.0
    assert not V.check_zero_init(m, rng.normal(size=(4, 4)), [0, 1, 0, 1]).passed


@pytest.mark.parametrize("kind", L.KINDS)
def test_param_identity(kind):
    rep = V.check_param_identity(L.build_model(kind, 450, 300, 3, n_experts=5, rank=4))
    assert rep.passed and rep.reported_total == rep.counted_total
    assert (rep.closed_form is None) == (kind != "LoRAMoE")


def test_gradcheck_grid_shape():
    grid = list(V.gradcheck_grid())
    assert len(grid) == 3 + 3 * 2 * 2 + 3 * 2 * 2 * 2
    assert ("LoRAMoE", 5, 6, 4, 2) in grid
