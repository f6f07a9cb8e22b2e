"""Low-rank error correction on top of reassembly, block group by block group.

Run with ``python3 demos/low_rank_correction.py``.  Takes about ten seconds.
"""
import warnings

from qllm.correction import count_params, sequential_correct
from qllm.metrics import stage_output_mse
from qllm.model import quantize_model
from qllm.pipeline import PipelineConfig, build_plans, make_calibration, make_eval_set, make_model

cfg = PipelineConfig(seed=0)
model = make_model(cfg)
calib, held_out = make_calibration(cfg).samples, make_eval_set(cfg).samples
qc = cfg.quant_config()

print(f"W{cfg.w_bits}A{cfg.a_bits} on an {cfg.n_layers}-layer toy, d_model={cfg.d_model}")
naive = quantize_model(model, None, qc)
plans, _ = build_plans(model, calib, cfg)
reassembled = quantize_model(model, plans, qc)

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    result = sequential_correct(model, reassembled, calib, cfg.correction_config())

print(f"adapters train {count_params(result.adapters)} parameters (rank {cfg.rank})")
for i, t in enumerate(result.traces):
    print(f"  group {i}: loss {t.initial_loss:.4f} -> {t.final_loss:.4f}")

print("\nheld-out output MSE (adapters merged into the 4-bit weights):")
for name, m in (("naive", naive), ("reassembled", reassembled), ("corrected", result.model)):
    print(f"  {name:12s} {stage_output_mse(model, m, held_out):.4f}")
