"""Low-rank mixture-of-experts classifiers for handwriting-based screening.

A numpy implementation of a shared-base mixture of experts with per-expert
LoRA adapters, its MLP and MoE baselines, explicit backpropagation, and the
experiment protocols (ablation sweeps, stacking, task-level voting) used on
the DARWIN handwriting dataset.
"""
__version__ = "0.1.0"

from .layers import (DenseLayer, GatingNetwork, LoRAMoELayer, LoraAdapter, MoELayer, Model,  # noqa: E402
                     ParamReport, build_model, model_forward, param_report)
from .numerics import Rng  # noqa: E402

__all__ = [
    "DenseLayer", "GatingNetwork", "LoRAMoELayer", "LoraAdapter", "MoELayer", "Model",
    "ParamReport", "Rng", "build_model", "model_forward", "param_report", "__version__",
]
