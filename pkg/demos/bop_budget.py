"""Bit-operation counts: what quantization buys at LLaMA-7B scale.

Run with ``python3 demos/bop_budget.py``.
"""
from qllm.metrics import LLAMA_7B, bop_count

seq_len = 256
print(f"LLaMA-7B, sequence length {seq_len}")
ref = bop_count(LLAMA_7B, seq_len, 16, 16).total
for b_w, b_a in ((16, 16), (8, 8), (4, 8), (4, 4)):
    b = bop_count(LLAMA_7B, seq_len, b_w, b_a)
    print(f"  W{b_w:<2d}A{b_a:<2d} {b.total / 1e12:8.2f} T BOPs  ({ref / b.total:4.1f}x below FP16)")

extra = 32 * 64
b = bop_count(LLAMA_7B, seq_len, 4, 4, extra_channels=extra)
print(f"\nreassembly overhead for {extra} extra channels at W4A4: {b.overhead / 1e6:.1f} M BOPs"
      f" ({b.overhead / b.total:.1e} of the matmul budget)")
