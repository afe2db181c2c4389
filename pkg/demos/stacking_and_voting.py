"""
Stacking base learners and voting across tasks
==============================================

A scaled-down run of two built-in protocols on synthetic data: a hidden
size sweep with StackMax/StackMean rows, and per-task models combined by a
hard vote. Use ``loramoe run`` with a config file for full-size runs.
"""
from loramoe import data as D
from loramoe import experiments as X

data = D.synthetic_darwin(seed=0)

sweep = X.override(X.built_in_specs()["hidden_sweep"], sweep=(16, 32, 64), repetitions=2,
                   train={"epochs": 40})
print(X.to_csv(X.run(sweep, data)))

vote = X.override(X.built_in_specs()["vote_by_task"], sweep=(5, 10), repetitions=1,
                  architectures=("LoRAMoE",), train={"epochs": 40})
table = X.run(vote, data)
print(X.to_csv(table))
for name, acc in table.extra["single_task_mean_accuracy"].items():
    print(f"{name}: vote {table.row('LoRA-MoE', name.split('/')[1]).metrics.accuracy:.3f}, "
          f"single task mean {acc:.3f}")
