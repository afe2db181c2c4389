"""Reverse-mode gradients for the model family in :mod:`loramoe.layers`.

The training objective is mean cross-entropy on the softmax head plus, when
enabled, a load-balancing penalty ``lambda * f(u)`` per gated block, where
``u`` is the batch mean of the full softmax over gate logits and ``f`` is
the squared coefficient of variation or the Gini coefficient.

Top-K selection is treated as a constant: gradients flow into the gate only
through the subset-softmax weights (zero for K=1) and the balance penalty.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .numerics import matmul, softmax

PROB_FLOOR = 1e-12


@dataclass
class BalanceConfig:
    enabled: bool = False
    lam: float = 0.01
    dispersion: str = "CV2"  # or "GINI"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("balance lambda must be non-negative")
        self.dispersion = self.dispersion.upper()
        if self.dispersion not in ("CV2", "GINI"):
            raise ValueError(f"unknown dispersion {self.dispersion!r}")


@dataclass
class Tape:
    inputs: list
    preacts: list
    routes: list
    x_raw: np.ndarray
    probs: np.ndarray
    n_blocks: int = field(init=False)

    def __post_init__(self):
        self.n_blocks = len(self.inputs)


class TapeMismatch(ValueError):
    pass


def forward(model: L.Model, x_raw: np.ndarray, start: int = 0, prefix: Tape | None = None) -> tuple[np.ndarray, Tape]:
    """Forward pass recording a tape; ``start``/``prefix`` reuse the blocks before ``start``."""
    parts = None if prefix is None else (prefix.inputs, prefix.preacts, prefix.routes)
    inputs, preacts, routes = L.run_blocks(model, x_raw, start, parts)
    probs = softmax(preacts[-1])
    return probs, Tape(inputs, preacts, routes, inputs[0], probs)


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} rows")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)


def cross_entropy(probs: np.ndarray, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    y = _labels(labels, probs.shape[0])
    p = probs[np.arange(len(y)), y]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


# ---------------------------------------------------------------- balance loss

def dispersion(u: np.ndarray, kind: str = "CV2") -> float:
    u = np.asarray(u, dtype=np.float64)
    if kind == "CV2":
        return float(u.var() / u.mean() ** 2)
    diffs = np.abs(u[:, None] - u[None, :]).sum()
    return float(diffs / (2 * len(u) * u.sum()))


def dispersion_grad(u: np.ndarray, kind: str = "CV2") -> np.ndarray:
    n = len(u)
    if kind == "CV2":
        m = u.mean()
        var = u.var()
        return 2 * (u - m) / (n * m ** 2) - 2 * var / (n * m ** 3)
    s = u.sum()
    num = np.abs(u[:, None] - u[None, :]).sum()
    dnum = 2 * np.sign(u[:, None] - u[None, :]).sum(axis=1)
    return dnum / (2 * n * s) - num / (2 * n * s ** 2)


def balance_loss(gate_probs: np.ndarray, cfg: BalanceConfig) -> float:
    gate_probs = np.asarray(gate_probs, dtype=np.float64)
    if gate_probs.ndim != 2 or gate_probs.shape[1] == 0:
        raise ValueError("gate_probs must be (B, N) with N >= 1")
    if not cfg.enabled:
        return 0.0
    return cfg.lam * dispersion(gate_probs.mean(axis=0), cfg.dispersion)


def _balance_logit_grad(logits: np.ndarray, cfg: BalanceConfig) -> np.ndarray:
    P = softmax(logits)
    u = P.mean(axis=0)
    dP = np.broadcast_to(cfg.lam * dispersion_grad(u, cfg.dispersion) / P.shape[0], P.shape)
    return P * (dP - (P * dP).sum(axis=1, keepdims=True))


def total_loss(model: L.Model, tape: Tape, labels, balance: BalanceConfig | None = None) -> float:
    loss = cross_entropy(tape.probs, labels)
    if balance is not None and balance.enabled:
        for r in tape.routes:
            if r is not None:
                loss += balance_loss(softmax(r.logits), balance)
    return loss


def loss(model: L.Model, x_raw: np.ndarray, labels, balance: BalanceConfig | None = None) -> float:
    _, tape = forward(model, x_raw)
    return total_loss(model, tape, labels, balance)


# ---------------------------------------------------------------- backward

def _gate_grads(gate: L.GatingNetwork, routes: L.Routes, dw_sel: np.ndarray, x_raw, balance):
    # dw_sel: (B, k) gradient w.r.t. the subset-softmax weights
    p = routes.weights
    dsel = p * (dw_sel - (p * dw_sel).sum(axis=1, keepdims=True))
    dlogits = np.zeros(routes.logits.shape)
    np.put_along_axis(dlogits, routes.indices, dsel, axis=1)
    if balance is not None and balance.enabled:
        dlogits += _balance_logit_grad(routes.logits, balance)
    return {"gate.W": matmul(dlogits.T, x_raw), "gate.b": dlogits.sum(axis=0)}


def _lora_moe_backward(blk: L.LoRAMoELayer, x, routes: L.Routes, dy, x_raw, balance):
    g = {"base.W": matmul(dy.T, x), "base.b": dy.sum(axis=0)}
    dx = matmul(dy, blk.base.W)
    mask, w = routes.mask(), routes.dense_weights()
    dw = np.zeros(w.shape)
    for j, ad in enumerate(blk.adapters):
        gA, gB = np.zeros_like(ad.A), np.zeros_like(ad.B)
        rows = np.flatnonzero(mask[:, j])
        if rows.size:
            xr, dyr = x[rows], dy[rows]
            h = matmul(xr, ad.A)
            delta = matmul(h, ad.B) * ad.scale
            dw[rows, j] = (dyr * delta).sum(axis=1)
            ddelta = w[rows, j, None] * dyr
            gB = matmul(h.T, ddelta) * ad.scale
            dh = matmul(ddelta, ad.B.T) * ad.scale
            gA = matmul(xr.T, dh)
            dx[rows] += matmul(dh, ad.A.T)
        g[f"adapter.{j}.A"] = gA
        g[f"adapter.{j}.B"] = gB
    g.update(_gate_grads(blk.gate, routes, np.take_along_axis(dw, routes.indices, axis=1), x_raw, balance))
    return g, dx


def _moe_backward(blk: L.MoELayer, x, routes: L.Routes, dy, x_raw, balance):
    g = {}
    dx = np.zeros(x.shape)
    mask, w = routes.mask(), routes.dense_weights()
    dw = np.zeros(w.shape)
    for j, e in enumerate(blk.experts):
        gW, gb = np.zeros_like(e.W), np.zeros_like(e.b)
        rows = np.flatnonzero(mask[:, j])
        if rows.size:
            xr, dyr = x[rows], dy[rows]
            dw[rows, j] = (dyr * L.dense_forward(e, xr)).sum(axis=1)
            dout = w[rows, j, None] * dyr
            gW = matmul(dout.T, xr)
            gb = dout.sum(axis=0)
            dx[rows] += matmul(dout, e.W)
        g[f"expert.{j}.W"] = gW
        g[f"expert.{j}.b"] = gb
    g.update(_gate_grads(blk.gate, routes, np.take_along_axis(dw, routes.indices, axis=1), x_raw, balance))
    return g, dx


def backward(model: L.Model, tape: Tape, labels, balance: BalanceConfig | None = None) -> dict[str, np.ndarray]:
    """Gradients of the training objective, keyed like ``model.parameters()``."""
    if tape.n_blocks != len(model.blocks):
        raise TapeMismatch("tape was recorded on a model with a different depth")
    y = _labels(labels, tape.probs.shape[0])
    n = len(y)
    onehot = np.zeros_like(tape.probs)
    onehot[np.arange(n), y] = 1.0
    dz = (tape.probs - onehot) / n
    # the probability floor in cross_entropy is flat below 1e-12
    clamped = tape.probs[np.arange(n), y] < PROB_FLOOR
    dz[clamped] = 0.0

    grads = {}
    for i in range(len(model.blocks) - 1, -1, -1):
        blk, x, r = model.blocks[i], tape.inputs[i], tape.routes[i]
        if isinstance(blk, L.LoRAMoELayer):
            g, dx = _lora_moe_backward(blk, x, r, dz, tape.x_raw, balance)
        elif isinstance(blk, L.MoELayer):
            g, dx = _moe_backward(blk, x, r, dz, tape.x_raw, balance)
        else:
            g = {"W": matmul(dz.T, x), "b": dz.sum(axis=0)}
            dx = matmul(dz, blk.W)
        grads.update({f"{i}.{k}": v for k, v in g.items()})
        if i > 0:
            dz = dx * (tape.preacts[i - 1] > 0)

    params = model.parameters()
    if grads.keys() != params.keys():
        raise TapeMismatch("gradient keys do not match model parameters")
    return {k: grads[k] for k in params}


def loss_and_grads(model: L.Model, x_raw, labels, balance: BalanceConfig | None = None):
    _, tape = forward(model, x_raw)
    return total_loss(model, tape, labels, balance), backward(model, tape, labels, balance)


# ---------------------------------------------------------------- gradient check

@dataclass
class BlockCheck:
    name: str
    max_rel_error: float
    checked: int
    route_unstable: int


@dataclass
class GradCheckReport:
    blocks: list[BlockCheck]

    @property
    def max_rel_error(self) -> float:
        errs = [b.max_rel_error for b in self.blocks if b.checked]
        return max(errs) if errs else 0.0

    @property
    def unstable(self) -> list[str]:
        return [b.name for b in self.blocks if b.route_unstable]

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _signature(tape: Tape) -> list:
    # routing decisions plus the ReLU on/off pattern of every hidden block
    sig = [None if r is None else np.sort(r.indices, axis=1) for r in tape.routes]
    sig += [z > 0 for z in tape.preacts[:-1]]
    return sig


def _same_routes(a, b) -> bool:
    return all((x is None and y is None) or np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(model: L.Model, x_raw, labels, epsilon: float = 1e-5,
               balance: BalanceConfig | None = None, max_per_block: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences, block by block.

    Entries whose +/- epsilon perturbation changes any routing decision or
    flips a ReLU between on and off are skipped and counted as
    route-unstable (the loss is not differentiable there). The error of a block is
    ``max|a - n| / max(max|a|, max|n|, 1e-8)`` over its checked entries.
    ``max_per_block`` limits the number of sampled entries per block.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    _, tape = forward(model, x_raw)
    base_sig = _signature(tape)
    analytic = backward(model, tape, labels, balance)
    rng = rng or np.random.default_rng(0)

    report = []
    for name, p in model.parameters().items():
        block = int(name.split(".", 1)[0])
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_block is not None and flat.size > max_per_block:
            idx = np.sort(rng.choice(flat.size, max_per_block, replace=False))
        a_vals, n_vals, unstable = [], [], 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            _, tp = forward(model, x_raw, block, tape)
            lp, sp = total_loss(model, tp, labels, balance), _signature(tp)
            flat[i] = orig - epsilon
            _, tm = forward(model, x_raw, block, tape)
            lm, sm = total_loss(model, tm, labels, balance), _signature(tm)
            flat[i] = orig
            if not (_same_routes(sp, base_sig) and _same_routes(sm, base_sig)):
                unstable += 1
                continue
            a_vals.append(analytic[name].reshape(-1)[i])
            n_vals.append((lp - lm) / (2 * epsilon))
        if a_vals:
            a, n = np.array(a_vals), np.array(n_vals)
            denom = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
            err = float(np.abs(a - n).max() / denom)
        else:
            err = 0.0
        report.append(BlockCheck(name, err, len(a_vals), unstable))
    return GradCheckReport(report)
