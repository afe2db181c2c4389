"""
Training on DARWIN-shaped data
==============================

Uses the real DARWIN CSV when ``LORAMOE_DARWIN`` points at it and a
synthetic stand-in otherwise. One 75/25 split, three architectures.
"""
import os

from loramoe import data as D
from loramoe import layers as L
from loramoe import training as T

path = os.environ.get("LORAMOE_DARWIN")
data = D.load_darwin(path) if path else D.synthetic_darwin(seed=0)
print("subjects:", data.n, "patients:", int(data.labels.sum()), "features:", data.d,
      "(synthetic)" if not path else "")

split = D.split_subjects(data.n, seed=0)
train, test = D.prepare_split(data, split)
cfg = T.TrainConfig(epochs=100)

for kind in L.KINDS:
    model = L.build_model(kind, data.d, 100, depth=2, n_experts=6, rank=2, seed=0)
    res = T.train(model, train.features, train.labels, cfg)
    m = T.evaluate(model, test.features, test.labels, res.train_time_s)
    print(f"{kind:8s} loss {res.losses[0]:.3f} -> {res.losses[-1]:.3f}  acc {m.accuracy:.3f}  "
          f"auc {m.auc:.3f}  f1 {m.f1:.3f}  {res.train_time_s:.1f}s")
