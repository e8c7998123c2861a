"""rlrc: structured pruning, SFT+PPO recovery, and blockwise quantization
for a small decoder-only transformer policy, plus a benchmark harness."""

__version__ = "0.1.0"
