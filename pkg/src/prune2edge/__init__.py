"""Pruned, int8-quantized MLP ensembles served from distributed worker nodes."""
from .errors import Prune2EdgeError
from .nncore import LayerSpec, Model, forward, init_model, mlp_layers
from .pruner import PruningSchedule, build_mask, pruned_train, sparsity_at
from .quantizer import QuantParams, dequantize, quantize, quantize_model

__version__ = "0.1.0"

__all__ = [
    "LayerSpec", "Model", "Prune2EdgeError", "PruningSchedule", "QuantParams",
    "build_mask", "dequantize", "forward", "init_model", "mlp_layers", "pruned_train",
    "quantize", "quantize_model", "sparsity_at",
]
