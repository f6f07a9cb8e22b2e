"""Why a single outlier channel ruins 4-bit activations, and how reassembly fixes it.

Run with ``python3 demos/outliers_and_reassembly.py``.
"""
import numpy as np

from qllm.metrics import channel_minmax_report
from qllm.model import ModelConfig, gen_calibration, gen_synthetic_model, site_activations
from qllm.quant import QuantConfig
from qllm.reassembly import (adaptive_search, apply_plan_runtime, channel_outlier_stats, disassemble,
                             reassemble_weights, replicate_rows)

cfg = ModelConfig(n_layers=1)
block = gen_synthetic_model(cfg, seed=0).blocks[0]
acts = [site_activations(x, block)["attn"] for x in gen_calibration(cfg, seed=0, n_samples=8).samples]

print("1. The attention input has one channel far wider than the rest.")
spans = sorted(channel_minmax_report(acts), key=lambda r: r[1] - r[2])
for ch, lo, hi in spans[:3]:
    print(f"   channel {ch:2d}: [{lo:8.2f}, {hi:8.2f}]")
median = np.median([hi - lo for _, lo, hi in spans])
print(f"   median span is only {median:.2f}\n")

x = np.vstack(acts)
w_q, w_k, w_v = block.proj["q"], block.proj["k"], block.proj["v"]
qc = QuantConfig(4, 4)

print("2. Per-token 4-bit quantization spends its 16 levels on that one channel.")
plain = qc.quant_act(x) @ w_q
print(f"   output MSE without reassembly: {np.mean((plain - x @ w_q) ** 2):.4f}\n")

print("3. Disassembly splits wide channels into equal parts. The product is unchanged.")
stats = channel_outlier_stats(acts)
theta = stats.maxabs.max() / 4
splits = np.maximum(np.ceil(stats.maxabs / theta), 1).astype(int)
gap = np.abs(x @ w_q - disassemble(x, splits) @ replicate_rows(w_q, splits)).max()
print(f"   theta={theta:.2f} adds {int((splits - 1).sum())} channels, max |XW - X'W'| = {gap:.1e}\n")

print("4. Assembly merges similar channel pairs to give the extra width back, and a grid")
print("   search picks the threshold with the smallest quantized attention error.")
res = adaptive_search(stats, acts, [w_q, w_k, w_v], 16, qc, "attention", block.n_heads)
for t, loss in zip(res.grid, res.losses):
    mark = "  <- chosen" if t == res.theta else ""
    print(f"   theta {t:8.3f}  error {loss:10.4f}{mark}")
plan = res.plan
print(f"   {len(plan.merge_pairs)} merges, channel count back to {x.shape[1]}\n")

fixed = qc.quant_act(apply_plan_runtime(x, plan)) @ reassemble_weights(w_q, plan)
print(f"5. Output MSE with reassembly: {np.mean((fixed - x @ w_q) ** 2):.4f}")
