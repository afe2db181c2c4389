"""
How many parameters does a LoRA-MoE layer save?
===============================================

Five 300x300 experts cost 450,000 weights. A shared 300x300 base plus five
rank-4 adapters costs 90,000 + 5 * 2,400 = 102,000.
"""
from loramoe import layers as L

red = L.lora_reduction(n_experts=5, expert_size=300 * 300, lora_size=4 * (300 + 300))
print(f"reduction vs. a plain MoE layer: {red:.4%}")

for kind in L.KINDS:
    model = L.build_model(kind, 450, 300, depth=2, n_experts=5, rank=4)
    rep = L.param_report(model)
    print(f"{kind:8s} total {rep.total:>9,d}  without bias {rep.total_without_bias:>9,d}  "
          f"active per sample {rep.activated_per_sample:>9,d}")

# reduction as a function of rank for N = 6, 300 x 300
for r in range(1, 9):
    print(f"rank {r}: {L.lora_reduction(6, 90000, r * 600):.3f}")

# the MLP head: 2 * hidden + 2
for hidden in (100, 200):
    head = L.param_report(L.build_model("MLP", 450, hidden)).layers[-1]
    print(f"MLP hidden {hidden}: first layer {hidden * 450:,d} weights, head {head.total} parameters")
