"""Forward passes and parameter accounting for MLP, MoE and LoRA-MoE models.

Conventions: a batch is a ``(B, d_in)`` matrix, one sample per row. Dense
weights are stored ``(d_out, d_in)`` so a layer computes ``x @ W.T + b``.
LoRA adapters are stored ``A: (d_in, r)``, ``B: (r, d_out)`` and contribute
``(x @ A) @ B * alpha / r``.

Every gate in a model sees the standardized model input ``x_raw``, not the
output of the previous block.
"""
from __future__ import annotations

import copy
import functools
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, ShapeError, as_matrix, kaiming_uniform, matmul, relu, softmax, zeros

KINDS = ("MLP", "MoE", "LoRAMoE")


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")
        self.b = np.ascontiguousarray(self.b, dtype=np.float64).reshape(-1)
        if self.b.shape[0] != self.W.shape[0]:
            raise ShapeError("bias length must equal W.rows")

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


@dataclass
class GatingNetwork:
    Wg: np.ndarray
    bg: np.ndarray
    top_k: int = 1

    def __post_init__(self):
        self.Wg = as_matrix(self.Wg, "Wg")
        self.bg = np.ascontiguousarray(self.bg, dtype=np.float64).reshape(-1)
        if self.bg.shape[0] != self.Wg.shape[0]:
            raise ShapeError("gate bias length must equal number of experts")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} outside 1..{self.n_experts}")

    @property
    def n_experts(self) -> int:
        return self.Wg.shape[0]

    @property
    def d_gate(self) -> int:
        return self.Wg.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.Wg, "b": self.bg}


@dataclass
class LoraAdapter:
    A: np.ndarray
    B: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        self.A = as_matrix(self.A, "A")
        self.B = as_matrix(self.B, "B")
        if self.A.shape[1] != self.B.shape[0]:
            raise ShapeError("A.cols must equal B.rows (the rank)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def params(self) -> dict[str, np.ndarray]:
        return {"A": self.A, "B": self.B}


@dataclass
class LoRAMoELayer:
    base: DenseLayer
    adapters: list[LoraAdapter]
    gate: GatingNetwork

    def __post_init__(self):
        if len(self.adapters) != self.gate.n_experts:
            raise ShapeError("one adapter per expert required")
        for ad in self.adapters:
            if ad.A.shape[0] != self.base.d_in or ad.B.shape[1] != self.base.d_out:
                raise ShapeError("adapter shape does not match base layer")
            if ad.rank != self.adapters[0].rank or ad.alpha != self.adapters[0].alpha:
                raise ValueError("all adapters must share rank and alpha")

    @property
    def d_in(self) -> int:
        return self.base.d_in

    @property
    def d_out(self) -> int:
        return self.base.d_out

    def params(self) -> dict[str, np.ndarray]:
        out = {f"base.{k}": v for k, v in self.base.params().items()}
        out.update({f"gate.{k}": v for k, v in self.gate.params().items()})
        for j, ad in enumerate(self.adapters):
            out.update({f"adapter.{j}.{k}": v for k, v in ad.params().items()})
        return out


@dataclass
class MoELayer:
    experts: list[DenseLayer]
    gate: GatingNetwork

    def __post_init__(self):
        if len(self.experts) != self.gate.n_experts:
            raise ShapeError("one expert per gate logit required")
        shape = self.experts[0].W.shape
        if any(e.W.shape != shape for e in self.experts):
            raise ShapeError("all experts must share (d_in, d_out)")

    @property
    def d_in(self) -> int:
        return self.experts[0].d_in

    @property
    def d_out(self) -> int:
        return self.experts[0].d_out

    def params(self) -> dict[str, np.ndarray]:
        out = {f"gate.{k}": v for k, v in self.gate.params().items()}
        for j, e in enumerate(self.experts):
            out.update({f"expert.{j}.{k}": v for k, v in e.params().items()})
        return out


@dataclass
class Model:
    kind: str
    blocks: list

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.blocks) < 2:
            raise ValueError("a model needs at least two blocks")
        if self.blocks[-1].d_out != 2:
            raise ShapeError("the final block must produce 2 logits")
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev.d_out != nxt.d_in:
                raise ShapeError("consecutive blocks do not chain")
        gated = (MoELayer, LoRAMoELayer)
        if self.kind != "MLP" and not isinstance(self.blocks[-1], gated):
            raise ValueError("gated models must end in a gated block")

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def input_dim(self) -> int:
        return self.blocks[0].d_in

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every parameter array, keyed ``"<block>.<path>"``."""
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update({f"{i}.{k}": v for k, v in blk.params().items()})
        return out

    def copy(self) -> "Model":
        return copy.deepcopy(self)


@dataclass
class Routes:
    """Routing decision of one gated block for a batch."""

    logits: np.ndarray  # (B, N)
    indices: np.ndarray  # (B, k), selected experts in descending logit order
    weights: np.ndarray  # (B, k), subset softmax

    @property
    def n_experts(self) -> int:
        return self.logits.shape[1]

    def mask(self) -> np.ndarray:
        return self._dense[0].copy()

    def dense_weights(self) -> np.ndarray:
        return self._dense[1].copy()

    @functools.cached_property
    def _dense(self):
        m = np.zeros(self.logits.shape, dtype=bool)
        w = np.zeros(self.logits.shape)
        rows = np.arange(self.indices.shape[0])[:, None]
        m[rows, self.indices] = True
        w[rows, self.indices] = self.weights
        return m, w

    def expert_rows(self) -> list[tuple[int, np.ndarray, np.ndarray]]:
        """(expert, selected rows, their combination weights) for every expert with traffic."""
        m, w = self._dense
        out = []
        for j in range(m.shape[1]):
            rows = np.flatnonzero(m[:, j])
            if rows.size:
                out.append((j, rows, w[rows, j, None]))
        return out

    def top1(self) -> np.ndarray:
        return self.indices[:, 0].copy()


# ---------------------------------------------------------------- forward ops

def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != layer.d_in:
        raise ShapeError(f"input has {x.shape[1]} columns, layer expects {layer.d_in}")
    return matmul(x, layer.W.T) + layer.b


def gate_logits(gate: GatingNetwork, x_raw: np.ndarray) -> np.ndarray:
    x_raw = as_matrix(x_raw, "x_raw")
    if x_raw.shape[1] != gate.d_gate:
        raise ShapeError(f"gate expects {gate.d_gate} raw features, got {x_raw.shape[1]}")
    return matmul(x_raw, gate.Wg.T) + gate.bg


def route_topk(logits, k: int) -> list[tuple[int, float]]:
    """Pick the k largest logits (ties to the lowest index) and softmax over them."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 1 <= k <= logits.shape[0]:
        raise ValueError(f"k={k} outside 1..{logits.shape[0]}")
    idx = np.argsort(-logits, kind="stable")[:k]
    w = softmax(logits[idx])
    return [(int(i), float(p)) for i, p in zip(idx, w)]


def route_batch(logits: np.ndarray, k: int) -> Routes:
    logits = as_matrix(logits, "logits")
    if not 1 <= k <= logits.shape[1]:
        raise ValueError(f"k={k} outside 1..{logits.shape[1]}")
    idx = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    w = softmax(np.take_along_axis(logits, idx, axis=1))
    return Routes(logits=logits, indices=idx, weights=w)


def lora_delta(adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != adapter.A.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} columns, adapter expects {adapter.A.shape[0]}")
    return matmul(matmul(x, adapter.A), adapter.B) * adapter.scale


def _check_gated_inputs(layer, x, x_raw):
    x = as_matrix(x, "x")
    x_raw = as_matrix(x_raw, "x_raw")
    if x.shape[0] != x_raw.shape[0]:
        raise ShapeError("x and x_raw must have the same number of rows")
    if x.shape[1] != layer.d_in:
        raise ShapeError(f"input has {x.shape[1]} columns, layer expects {layer.d_in}")
    return x, x_raw


def lora_moe_forward(layer: LoRAMoELayer, x: np.ndarray, x_raw: np.ndarray) -> tuple[np.ndarray, Routes]:
    x, x_raw = _check_gated_inputs(layer, x, x_raw)
    routes = route_batch(gate_logits(layer.gate, x_raw), layer.gate.top_k)
    y = dense_forward(layer.base, x)
    for j, rows, w in routes.expert_rows():
        y[rows] += w * lora_delta(layer.adapters[j], x[rows])
    return y, routes


def moe_forward(layer: MoELayer, x: np.ndarray, x_raw: np.ndarray) -> tuple[np.ndarray, Routes]:
    x, x_raw = _check_gated_inputs(layer, x, x_raw)
    routes = route_batch(gate_logits(layer.gate, x_raw), layer.gate.top_k)
    y = np.zeros((x.shape[0], layer.d_out))
    for j, rows, w in routes.expert_rows():
        y[rows] += w * dense_forward(layer.experts[j], x[rows])
    return y, routes


def block_forward(block, x: np.ndarray, x_raw: np.ndarray) -> tuple[np.ndarray, Routes | None]:
    if isinstance(block, LoRAMoELayer):
        return lora_moe_forward(block, x, x_raw)
    if isinstance(block, MoELayer):
        return moe_forward(block, x, x_raw)
    return dense_forward(block, x), None


def run_blocks(model: Model, x_raw: np.ndarray, start: int = 0, prefix=None):
    """Run every block; returns (block inputs, pre-activations, routes).

    With ``start > 0``, ``prefix`` must be an earlier result of this function
    for the same input; blocks before ``start`` are reused from it.
    """
    x_raw = as_matrix(x_raw, "x_raw")
    if x_raw.shape[1] != model.input_dim:
        raise ShapeError(f"model expects {model.input_dim} features, got {x_raw.shape[1]}")
    if start:
        inputs, preacts, routes = (list(part[:start]) for part in prefix)
        h = relu(preacts[-1])
    else:
        inputs, preacts, routes = [], [], []
        h = x_raw
    last = len(model.blocks) - 1
    for i in range(start, last + 1):
        inputs.append(h)
        z, r = block_forward(model.blocks[i], h, x_raw)
        preacts.append(z)
        routes.append(r)
        if i < last:
            h = relu(z)
    return inputs, preacts, routes


def model_forward(model: Model, x_raw: np.ndarray) -> tuple[np.ndarray, list[Routes | None]]:
    """Class probabilities ``(B, 2)`` (column 1 = Patient) and per-block routes."""
    _, preacts, routes = run_blocks(model, x_raw)
    return softmax(preacts[-1]), routes


def predict_proba(model: Model, x_raw: np.ndarray) -> np.ndarray:
    return model_forward(model, x_raw)[0]


# ---------------------------------------------------------------- construction

def init_dense(rng: Rng, d_in: int, d_out: int) -> DenseLayer:
    return DenseLayer(kaiming_uniform(rng, d_out, d_in, d_in), np.zeros(d_out))


def init_gate(rng: Rng, d_gate: int, n_experts: int, top_k: int) -> GatingNetwork:
    return GatingNetwork(kaiming_uniform(rng, n_experts, d_gate, d_gate), np.zeros(n_experts), top_k)


def init_adapter(rng: Rng, d_in: int, d_out: int, rank: int, alpha: float) -> LoraAdapter:
    return LoraAdapter(kaiming_uniform(rng, d_in, rank, d_in), zeros(rank, d_out), alpha)


def build_model(kind: str, input_dim: int, hidden: int, depth: int = 2, *,
                n_experts: int = 6, rank: int = 2, alpha: float = 1.0, top_k: int = 1,
                rng: Rng | None = None, seed: int = 0) -> Model:
    """Build a freshly initialized model of ``depth`` blocks ending in 2 logits."""
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if depth < 2:
        raise ValueError("depth must be >= 2")
    rng = rng or Rng(seed)
    dims = [input_dim] + [hidden] * (depth - 1) + [2]
    blocks = []
    for d_in, d_out in zip(dims, dims[1:]):
        if kind == "MLP":
            blocks.append(init_dense(rng, d_in, d_out))
        elif kind == "MoE":
            experts = [init_dense(rng, d_in, d_out) for _ in range(n_experts)]
            blocks.append(MoELayer(experts, init_gate(rng, input_dim, n_experts, top_k)))
        else:
            base = init_dense(rng, d_in, d_out)
            adapters = [init_adapter(rng, d_in, d_out, rank, alpha) for _ in range(n_experts)]
            blocks.append(LoRAMoELayer(base, adapters, init_gate(rng, input_dim, n_experts, top_k)))
    return Model(kind, blocks)


def base_only(model: Model) -> Model:
    """The dense model obtained by dropping gates and adapters of a LoRA-MoE model."""
    if model.kind != "LoRAMoE":
        raise ValueError("base_only applies to LoRA-MoE models")
    return Model("MLP", [copy.deepcopy(b.base) for b in model.blocks])


# ---------------------------------------------------------------- accounting

@dataclass
class LayerCount:
    kind: str
    d_in: int
    d_out: int
    weights: int
    biases: int
    activated: int
    n_experts: int = 0
    top_k: int = 0
    rank: int = 0
    expert_size: int = 0  # d_in * d_out, no bias
    lora_size: int = 0  # r * (d_in + d_out)

    @property
    def total(self) -> int:
        return self.weights + self.biases


@dataclass
class ParamReport:
    total: int
    activated_per_sample: int
    reduction_vs_moe: float
    layers: list[LayerCount] = field(default_factory=list)

    @property
    def total_without_bias(self) -> int:
        return sum(l.weights for l in self.layers)


def lora_reduction(n_experts: int, expert_size: int, lora_size: int) -> float:
    """Fraction of parameters saved by shared base + N adapters versus N full experts.

    ``1 - (expert + N*lora) / (N*expert)``; not clamped, so it is <= 0 when
    N == 1 or the adapters are as large as an expert.
    """
    return 1.0 - (expert_size + n_experts * lora_size) / (n_experts * expert_size)


def param_report(model: Model) -> ParamReport:
    layers = []
    for blk in model.blocks:
        d_in, d_out = blk.d_in, blk.d_out
        if isinstance(blk, DenseLayer):
            layers.append(LayerCount("dense", d_in, d_out, d_in * d_out, d_out, d_in * d_out + d_out))
            continue
        g = blk.gate
        n, k = g.n_experts, g.top_k
        gate_w, gate_b = n * g.d_gate, n
        if isinstance(blk, MoELayer):
            layers.append(LayerCount(
                "moe", d_in, d_out,
                weights=gate_w + n * d_in * d_out, biases=gate_b + n * d_out,
                activated=gate_w + gate_b + k * (d_in * d_out + d_out),
                n_experts=n, top_k=k, expert_size=d_in * d_out))
        else:
            r = blk.adapters[0].rank
            lora = r * (d_in + d_out)
            layers.append(LayerCount(
                "loramoe", d_in, d_out,
                weights=d_in * d_out + gate_w + n * lora, biases=d_out + gate_b,
                activated=d_in * d_out + d_out + gate_w + gate_b + k * lora,
                n_experts=n, top_k=k, rank=r, expert_size=d_in * d_out, lora_size=lora))
    lm = [l for l in layers if l.kind == "loramoe"]
    if lm:
        shared = sum(l.expert_size + l.n_experts * l.lora_size for l in lm)
        full = sum(l.n_experts * l.expert_size for l in lm)
        reduction = 1.0 - shared / full
    else:
        reduction = 0.0
    return ParamReport(
        total=sum(l.total for l in layers),
        activated_per_sample=sum(l.activated for l in layers),
        reduction_vs_moe=reduction,
        layers=layers,
    )
