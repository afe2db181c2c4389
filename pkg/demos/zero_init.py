"""
Zero-initialized adapters
=========================

B starts at zero, so a fresh LoRA-MoE computes exactly what its shared base
network computes. After one optimizer step only the adapters that received
traffic have moved.
"""
import numpy as np

from loramoe import layers as L
from loramoe import verify as V
from loramoe.numerics import Rng

model = L.build_model("LoRAMoE", 18, 12, depth=3, n_experts=5, rank=2, seed=1)
x = Rng(3).normal((8, 18))
y = np.array([0, 1] * 4)

p_full = L.predict_proba(model, x)
p_base = L.predict_proba(L.base_only(model), x)
print("bit-identical to base:", np.array_equal(p_full, p_base))

rep = V.check_zero_init(model, x, y, lr=1e-3)
for i, (sel, moved) in enumerate(zip(rep.selected, rep.nonzero_after_step)):
    print(f"block {i}: experts used {sel}, nonzero B after one step {moved}")
print("check passed:", rep.passed)
