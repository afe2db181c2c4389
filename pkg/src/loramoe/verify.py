"""Executable checks of the routing geometry, zero-init behaviour and parameter counts.

Under Top-1 routing with a linear gate, the set of inputs sent to one expert
is an intersection of half-spaces and therefore convex. When every gate bias
equals ``-||w_j||^2 / 4`` plus a shared constant, arg-max routing coincides
with nearest-site assignment to the sites ``w_j / 2``, since
``||x - w/2||^2 = ||x||^2 - (w.x - ||w||^2/4)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as AG
from . import layers as L
from .numerics import Rng, ShapeError, softmax, use_backend
from .training import Adam, SGD

BOX = 3.0


@dataclass
class GeometryReport:
    samples: int
    pairs_same_region: int
    violations: int
    occupancy: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def top1_route(gate: L.GatingNetwork, points: np.ndarray) -> np.ndarray:
    return L.route_batch(L.gate_logits(gate, points), 1).top1()


def check_region_convexity(gate: L.GatingNetwork, dim: int, n_pairs: int, rng: Rng,
                           box: float = BOX) -> GeometryReport:
    """Sample point pairs in ``[-box, box]^dim``; same-expert pairs must keep their midpoint."""
    if gate.top_k != 1:
        raise ValueError("convexity holds for Top-1 routing only")
    if dim != gate.d_gate:
        raise ShapeError(f"gate expects {gate.d_gate} inputs, asked for {dim}")
    p = rng.uniform(-box, box, (n_pairs, dim))
    q = rng.uniform(-box, box, (n_pairs, dim))
    rp, rq = top1_route(gate, p), top1_route(gate, q)
    same = rp == rq
    mid = top1_route(gate, 0.5 * (p[same] + q[same]))
    occupancy = np.bincount(np.concatenate([rp, rq]), minlength=gate.n_experts)
    return GeometryReport(
        samples=2 * n_pairs,
        pairs_same_region=int(same.sum()),
        violations=int(np.sum(mid != rp[same])),
        occupancy=occupancy.tolist(),
    )


def voronoi_gate(W: np.ndarray, offset: float = 0.0, top_k: int = 1) -> L.GatingNetwork:
    """A gate whose biases satisfy ``b_j + ||w_j||^2 / 4 = offset`` for every expert."""
    W = np.asarray(W, dtype=np.float64)
    return L.GatingNetwork(W, offset - 0.25 * np.sum(W * W, axis=1), top_k)


@dataclass
class VoronoiReport:
    points: int
    agreements: int
    routed: np.ndarray
    nearest: np.ndarray

    @property
    def passed(self) -> bool:
        return self.agreements == self.points


def nearest_site(W: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Index of the closest site ``w_j / 2`` for every point (ties to the lowest index)."""
    sites = 0.5 * np.asarray(W, dtype=np.float64)
    d2 = ((points[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def check_voronoi_sites(gate: L.GatingNetwork, points: np.ndarray, atol: float = 1e-9) -> VoronoiReport:
    """Compare arg-max routing with nearest-site assignment on ``points``."""
    W = gate.Wg
    gap = gate.bg + 0.25 * np.sum(W * W, axis=1)
    if np.ptp(gap) > atol * max(1.0, np.abs(gap).max()):
        raise ValueError("gate biases do not satisfy b_j + ||w_j||^2/4 = const")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    routed = top1_route(gate, points)
    nearest = nearest_site(W, points)
    return VoronoiReport(len(points), int(np.sum(routed == nearest)), routed, nearest)


@dataclass
class ZeroInitReport:
    outputs_bit_equal: bool
    selected: list[list[int]]  # per gated block, experts used by the batch
    nonzero_after_step: list[list[int]]
    passed: bool
    # selected experts whose routed rows all reach the block as zero vectors
    # (dead ReLUs): xA = 0, so their B gradient is exactly zero
    zero_input: list[list[int]] = field(default_factory=list)


def check_zero_init(model: L.Model, x_raw: np.ndarray, labels, lr: float = 1e-3,
                    optimizer: str = "ADAM") -> ZeroInitReport:
    """Fresh LoRA-MoE equals its base network; one step moves only the selected B's.

    ``model`` is not modified.
    """
    if model.kind != "LoRAMoE":
        raise ValueError("zero-init check applies to LoRA-MoE models")
    inputs, preacts, routes = L.run_blocks(model, x_raw)
    probs = softmax(preacts[-1])
    base_probs, _ = L.model_forward(L.base_only(model), x_raw)
    bit_equal = bool(np.array_equal(probs, base_probs))

    trial = model.copy()
    _, grads = AG.loss_and_grads(trial, x_raw, labels)
    params = trial.parameters()
    opt = SGD(params, lr) if optimizer.upper() == "SGD" else Adam(params, lr)
    opt.step(grads)

    selected, moved, dead = [], [], []
    ok = bit_equal
    for blk, r, x in zip(trial.blocks, routes, inputs):
        mask = r.mask()
        used = [j for j in range(r.n_experts) if mask[:, j].any()]
        zero = [j for j in used if not x[mask[:, j]].any()]
        nz = [j for j, ad in enumerate(blk.adapters) if np.any(ad.B != 0)]
        selected.append(used)
        moved.append(nz)
        dead.append(zero)
        if lr == 0:
            ok = ok and not nz
        else:
            ok = ok and nz == [j for j in used if j not in zero]
    return ZeroInitReport(bit_equal, selected, moved, ok, dead)


@dataclass
class ParamIdentityReport:
    reported_total: int
    counted_total: int
    reduction: float
    closed_form: float | None
    passed: bool


def check_param_identity(model: L.Model, tol: float = 1e-12) -> ParamIdentityReport:
    rep = L.param_report(model)
    counted = sum(p.size for p in model.parameters().values())
    closed = None
    ok = counted == rep.total
    if model.kind == "LoRAMoE":
        # closed form from the stored matrices, independent of param_report's bookkeeping
        shared = full = 0
        for blk in model.blocks:
            expert = blk.base.W.size
            lora = blk.adapters[0].A.size + blk.adapters[0].B.size
            n = len(blk.adapters)
            shared += expert + n * lora
            full += n * expert
        closed = 1.0 - shared / full
        ok = ok and abs(closed - rep.reduction_vs_moe) <= tol
    return ParamIdentityReport(rep.total, counted, rep.reduction_vs_moe, closed, ok)


def random_gate(rng: Rng, dim: int, n_experts: int, bias_scale: float = 1.0) -> L.GatingNetwork:
    return L.GatingNetwork(rng.normal((n_experts, dim)), rng.normal(n_experts, scale=bias_scale), 1)


def convexity_midpoints(gate: L.GatingNetwork, dim: int, n_midpoints: int, rng: Rng,
                        box: float = BOX, max_rounds: int = 1000) -> GeometryReport:
    """Repeat :func:`check_region_convexity` until ``n_midpoints`` same-region midpoints were tested."""
    total = GeometryReport(0, 0, 0, [0] * gate.n_experts)
    rounds = 0
    while total.pairs_same_region < n_midpoints and rounds < max_rounds:
        need = n_midpoints - total.pairs_same_region
        rep = check_region_convexity(gate, dim, max(need, 256), rng, box)
        total.samples += rep.samples
        total.pairs_same_region += rep.pairs_same_region
        total.violations += rep.violations
        total.occupancy = [a + b for a, b in zip(total.occupancy, rep.occupancy)]
        rounds += 1
    return total


def routing_suite(seed: int = 0, dims=(2, 18, 450), experts=(2, 5, 8), n_midpoints: int = 10_000,
                  n_points: int = 1000) -> list[tuple[str, bool, str]]:
    """Convexity and Voronoi checks over a grid of random gates, as (name, passed, detail)."""
    rng = Rng(seed, 0x6E0)
    results = []
    for dim in dims:
        for n in experts:
            g = random_gate(rng, dim, n)
            rep = convexity_midpoints(g, dim, n_midpoints, rng)
            ok = rep.passed and rep.pairs_same_region >= n_midpoints
            results.append((f"convexity dim={dim} N={n}", ok,
                            f"{rep.violations} violations over {rep.pairs_same_region} midpoints"))
            vg = voronoi_gate(rng.normal((n, dim)), offset=float(rng.normal(1)[0]))
            pts = rng.uniform(-BOX, BOX, (n_points, dim))
            vr = check_voronoi_sites(vg, pts)
            results.append((f"voronoi dim={dim} N={n}", vr.passed, f"{vr.agreements}/{vr.points} agree"))
    return results


def gradcheck_grid():
    """(kind, depth, n_experts, rank, top_k) combinations covered by :func:`gradcheck_suite`."""
    for kind in L.KINDS:
        for depth in (2, 3, 5):
            if kind == "MLP":
                yield kind, depth, 0, 0, 1
                continue
            for n in (3, 6):
                for k in (1, 2):
                    for r in ((1, 4) if kind == "LoRAMoE" else (0,)):
                        yield kind, depth, n, r, k


def gradcheck_model(kind: str, depth: int, n_experts: int, rank: int, top_k: int, seed: int = 0) -> L.Model:
    """A 6-input, hidden-4 model with randomized biases and adapter B's.

    Nonzero biases and B's keep the check away from the ReLU kinks and the
    all-zero adapter state of a fresh model.
    """
    model = L.build_model(kind, 6, 4, depth, n_experts=max(n_experts, 1), rank=max(rank, 1),
                          top_k=top_k, seed=seed)
    g = Rng(seed, 0x6C)
    for name, p in model.parameters().items():
        if name.endswith((".B", ".b")):
            p[...] = g.uniform(-0.5, 0.5, p.shape)
    return model


def gradcheck_suite(seed: int = 0, epsilon: float = 1e-5, tol: float = 1e-4, balance: bool = True,
                    batch: int = 16) -> list[tuple[str, bool, str]]:
    g = Rng(seed, 0xBA7C)
    results = []
    cfg = AG.BalanceConfig(enabled=balance)
    with use_backend("blas"):
        for kind, depth, n, r, k in gradcheck_grid():
            model = gradcheck_model(kind, depth, n, r, k, seed)
            x = g.normal((batch, 6))
            y = np.arange(batch) % 2
            rep = AG.grad_check(model, x, y, epsilon, balance=cfg)
            name = f"{kind} depth={depth}" + (f" N={n} top_k={k}" if kind != "MLP" else "")
            name += f" r={r}" if kind == "LoRAMoE" else ""
            skipped = sum(b.route_unstable for b in rep.blocks)
            results.append((name, rep.passed(tol), f"max rel err {rep.max_rel_error:.2e}, {skipped} unstable skipped"))
    return results
