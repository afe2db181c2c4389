import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from loramoe import autograd as AG
from loramoe import layers as L
from loramoe.numerics import Rng, use_backend
from loramoe.verify import gradcheck_model


def numeric_grad(model, x, y, name, balance=None, eps=1e-6):
    p = model.parameters()[name]
    flat = p.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = AG.loss(model, x, y, balance)
        flat[i] = orig - eps
        lm = AG.loss(model, x, y, balance)
        flat[i] = orig
        out[i] = (lp - lm) / (2 * eps)
    return out.reshape(p.shape)


@pytest.mark.parametrize("kind", L.KINDS)
def test_backward_matches_own_finite_differences(kind, rng):
    model = gradcheck_model(kind, 3, 3, 2, 2, seed=5)
    x = rng.normal(size=(10, 6))
    y = np.arange(10) % 2
    grads = AG.loss_and_grads(model, x, y)[1]
    for name in model.parameters():
        np.testing.assert_allclose(grads[name], numeric_grad(model, x, y, name), atol=2e-7, rtol=1e-4)


def test_cross_entropy_hand_value_and_clamp():
    p = np.array([[0.8, 0.2], [0.3, 0.7]])
    assert AG.cross_entropy(p, [0, 1]) == pytest.approx(-(np.log(0.8) + np.log(0.7)) / 2, rel=1e-15)
    assert AG.cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-np.log(1e-12))
    with pytest.raises(ValueError):
        AG.cross_entropy(p, [0, 2])
    with pytest.raises(ValueError):
        AG.cross_entropy(p, [0])


def gini_pairwise(u):
    n = len(u)
    return sum(abs(a - b) for a in u for b in u) / (2 * n * n * np.mean(u))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(0.01, 1.0)))
def test_dispersion_definitions(u):
    assert AG.dispersion(u, "CV2") == pytest.approx(np.var(u) / np.mean(u) ** 2, rel=1e-12, abs=1e-15)
    assert AG.dispersion(u, "GINI") == pytest.approx(gini_pairwise(u), rel=1e-12, abs=1e-15)
    assert AG.dispersion(u, "CV2") >= 0 and 0 <= AG.dispersion(u, "GINI") < 1


def test_dispersion_zero_when_balanced():
    u = np.full(5, 0.2)
    assert AG.dispersion(u, "CV2") == pytest.approx(0, abs=1e-15)
    assert AG.dispersion(u, "GINI") == 0


@pytest.mark.parametrize("kind", ["CV2", "GINI"])
def test_dispersion_grad_finite_differences(kind):
    u = np.array([0.1, 0.45, 0.2, 0.25])
    g = AG.dispersion_grad(u, kind)
    eps = 1e-7
    for i in range(len(u)):
        e = np.zeros_like(u)
        e[i] = eps
        num = (AG.dispersion(u + e, kind) - AG.dispersion(u - e, kind)) / (2 * eps)
        assert g[i] == pytest.approx(num, abs=1e-6)


def test_balance_loss_uses_full_softmax_mean():
    P = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    cfg = AG.BalanceConfig(enabled=True, lam=0.5)
    u = P.mean(axis=0)
    assert AG.balance_loss(P, cfg) == pytest.approx(0.5 * np.var(u) / np.mean(u) ** 2)
    assert AG.balance_loss(P, AG.BalanceConfig()) == 0.0
    with pytest.raises(ValueError):
        AG.BalanceConfig(dispersion="entropy")
    with pytest.raises(ValueError):
        AG.BalanceConfig(lam=-1)


@pytest.mark.parametrize("dispersion", ["CV2", "GINI"])
def test_balance_gradients(dispersion, rng):
    model = gradcheck_model("LoRAMoE", 2, 3, 1, 1, seed=2)
    cfg = AG.BalanceConfig(enabled=True, lam=0.3, dispersion=dispersion)
    x = rng.normal(size=(8, 6))
    y = np.arange(8) % 2
    grads = AG.loss_and_grads(model, x, y, cfg)[1]
    for name in ("0.gate.W", "1.gate.b"):
        np.testing.assert_allclose(grads[name], numeric_grad(model, x, y, name, cfg), atol=2e-7, rtol=1e-4)
    # balance changes the gate gradient but not the base
    plain = AG.loss_and_grads(model, x, y)[1]
    assert np.array_equal(plain["0.base.W"], grads["0.base.W"])
    assert not np.allclose(plain["0.gate.W"], grads["0.gate.W"])


def test_top1_gate_gets_no_cross_entropy_gradient(rng):
    # with one selected expert the subset-softmax weight is constant 1
    model = gradcheck_model("MoE", 2, 4, 0, 1, seed=1)
    grads = AG.loss_and_grads(model, rng.normal(size=(6, 6)), np.arange(6) % 2)[1]
    assert not grads["0.gate.W"].any() and not grads["1.gate.b"].any()


def test_unselected_experts_get_zero_gradient(rng):
    model = gradcheck_model("LoRAMoE", 2, 6, 2, 1, seed=3)
    x = rng.normal(size=(3, 6))
    _, tape = AG.forward(model, x)
    grads = AG.backward(model, tape, [0, 1, 0])
    used = set(tape.routes[0].indices.ravel().tolist())
    for j in range(6):
        g = grads[f"0.adapter.{j}.B"]
        assert g.any() == (j in used)


def test_ordered_and_blas_backends_agree(rng):
    model = gradcheck_model("LoRAMoE", 3, 3, 2, 2, seed=4)
    x = rng.normal(size=(5, 6))
    a = AG.loss_and_grads(model, x, [0, 1, 1, 0, 1])[1]
    with use_backend("blas"):
        b = AG.loss_and_grads(model, x, [0, 1, 1, 0, 1])[1]
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=1e-10, atol=1e-14)


def test_tape_mismatch(rng):
    m2 = L.build_model("MLP", 6, 3, 2)
    m3 = L.build_model("MLP", 6, 3, 3)
    _, tape = AG.forward(m2, rng.normal(size=(2, 6)))
    with pytest.raises(AG.TapeMismatch):
        AG.backward(m3, tape, [0, 1])


def test_grad_check_report_and_skips(rng):
    model = gradcheck_model("MoE", 2, 3, 0, 2, seed=0)
    rep = AG.grad_check(model, rng.normal(size=(6, 6)), np.arange(6) % 2, max_per_block=5,
                        rng=np.random.default_rng(1))
    assert rep.passed(1e-4)
    assert all(b.checked + b.route_unstable <= 5 for b in rep.blocks)
    with pytest.raises(ValueError):
        AG.grad_check(model, rng.normal(size=(2, 6)), [0, 1], epsilon=0)


def test_grad_check_flags_route_flips():
    # two experts whose logits differ by less than epsilon for the first row
    model = gradcheck_model("MoE", 2, 2, 0, 1, seed=0)
    gate = model.blocks[0].gate
    gate.Wg[...] = 0.0
    gate.bg[...] = [0.0, 1e-7]
    rep = AG.grad_check(model, Rng(0).normal((2, 6)), [0, 1], epsilon=1e-5)
    assert any(b.name == "0.gate.b" and b.route_unstable for b in rep.blocks)
