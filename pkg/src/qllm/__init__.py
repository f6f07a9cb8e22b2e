"""Post-training quantization of toy LLaMA-style transformers with channel
reassembly and low-rank error correction."""

__version__ = "0.1.0"

from .correction import CorrectionConfig, sequential_correct
from .model import ModelConfig, gen_calibration, gen_synthetic_model, model_forward, quantize_model
from .quant import QuantConfig
from .reassembly import ReassemblyPlan, adaptive_search, apply_plan_runtime

__all__ = [
    "CorrectionConfig", "ModelConfig", "QuantConfig", "ReassemblyPlan", "adaptive_search",
    "apply_plan_runtime", "gen_calibration", "gen_synthetic_model", "model_forward",
    "quantize_model", "sequential_correct",
]
