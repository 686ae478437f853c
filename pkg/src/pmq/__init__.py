"""Patch-wise mixed-precision quantization for a toy vision transformer."""

from .allocator import BitConfig, ParetoPoint, model_size, pareto_frontier, perturbation, select_config
from .quant import QuantParams, calibrate_percentile, dequantize, fake_quant, quantize
from .sensitivity import ImportanceScore, gsm_scores, hessian_diag_oracle, rank_components
from .vit import ComponentId, ViTConfig, ViTParams, model_forward, per_sample_gradients, train_toy

__version__ = "0.1.0"
