"""Measurement harness: latency, throughput, memory and success-rate rows.

Latency is the median wall time of one greedy action decode at batch 1
(>= 10 warmups, >= 50 timed iterations); throughput is decodes per second
at the largest configured batch.  Throughput here always means greedy
env-action decodes per second.  Memory numbers come from
quant.memory_bytes and reconcile exactly with serialized checkpoints.
"""

import csv
import json
import os
import platform
import statistics
import time

import numpy as np

from . import kernels
from .env import reset
from .model import PolicyModel, build_contexts, fast_logits_last
from .pruning import param_counts
from .quant import QuantizedModel, memory_bytes

REPORT_COLUMNS = [
    "variant", "total_params", "prunable_params", "weights_bytes",
    "scales_bytes", "total_bytes", "latency_ms", "latency_cv",
    "throughput_sps", "throughput_batch", "ind_sr", "ood_sr",
]


def _cpu_model():
    try:
        with open("/proc/cpuinfo", "r", encoding="utf-8") as f:
            for line in f:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def report_header(extra=None):
    h = {
        "cpu": _cpu_model(),
        "platform": platform.platform(),
        "kernel_backend": kernels.backend(),
        "threads": os.environ.get("RLRC_THREADS", "unset"),
        "throughput_definition": "greedy action decodes per second at the stated batch size",
        "latency_definition": "median wall ms of one greedy decode at batch 1",
    }
    if extra:
        h.update(extra)
    return h


def _decode_step(model, contexts):
    if isinstance(model, QuantizedModel):
        return np.argmax(model.logits_last(contexts), axis=1)
    return np.argmax(fast_logits_last(model, contexts), axis=1)


def probe_contexts(model, env_config, batch, task, seed=0):
    obs = np.stack([reset(env_config, task, seed + i)[1] for i in range(batch)])
    return build_contexts(model.config, obs)


def measure_latency_throughput(model, env_config, task, batch_sizes=(1, 16),
                               warmup=10, iters=50, seed=0):
    """Timing rows per batch size; flags rows with cv >= 15% as unstable."""
    rows = []
    for batch in sorted(batch_sizes):
        contexts = probe_contexts(model, env_config, batch, task, seed)
        for _ in range(max(warmup, 10)):
            _decode_step(model, contexts)
        times = []
        n_iters = max(iters, 50)
        for _ in range(n_iters):
            t0 = time.perf_counter()
            _decode_step(model, contexts)
            times.append(time.perf_counter() - t0)
        med = statistics.median(times)
        mu = statistics.fmean(times)
        cv = statistics.pstdev(times) / mu if mu > 0 else 0.0
        rows.append({
            "batch_size": batch,
            "latency_ms": med * 1e3,
            "latency_cv": cv,
            "unstable": cv >= 0.15,
            "throughput_sps": batch * n_iters / sum(times),
            "iters": n_iters,
        })
    return rows


def variant_row(name, model, timing_rows, ind_sr=None, ood_sr=None, exempt_layers=None):
    """One BenchReport row; memory fields come straight from memory_bytes."""
    mem = memory_bytes(model)
    if isinstance(model, PolicyModel):
        counts = param_counts(model, exempt_layers)
        total, prunable = counts["total"], counts["prunable"]
    else:
        total = sum(a.size for _, a in model.named_dense_arrays()) + \
            sum(q.n_elements for _, q in model.named_quant_tensors())
        prunable = None
    batch1 = min(timing_rows, key=lambda r: r["batch_size"])
    batchmax = max(timing_rows, key=lambda r: r["batch_size"])
    return {
        "variant": name,
        "total_params": total,
        "prunable_params": prunable,
        "weights_bytes": mem["weights_bytes"],
        "scales_bytes": mem["scales_bytes"],
        "total_bytes": mem["total_bytes"],
        "latency_ms": batch1["latency_ms"],
        "latency_cv": batch1["latency_cv"],
        "throughput_sps": batchmax["throughput_sps"],
        "throughput_batch": batchmax["batch_size"],
        "ind_sr": ind_sr,
        "ood_sr": ood_sr,
    }


def write_report(prefix, header, rows, extra_columns=()):
    """Emit <prefix>.csv and <prefix>.json with a fixed column order."""
    columns = REPORT_COLUMNS + [c for c in extra_columns if c not in REPORT_COLUMNS]
    csv_path = prefix + ".csv"
    json_path = prefix + ".json"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        for k, v in header.items():
            f.write(f"# {k}: {v}\n")
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump({"header": header, "columns": columns, "rows": rows}, f, indent=2)
    return csv_path, json_path


def bench_kernels(sizes=((1, 16, 128, 512), (64, 16, 128, 512)), block=64, seed=0):
    """Compare the numba and numpy kernel backends on the hot paths.

    Sizes are (batch, seq, d_model, d_ff) matching real decode workloads.
    """
    rng = np.random.default_rng(seed)
    results = []
    backends = ["numpy"]
    try:
        kernels.set_backend("numba")
        backends.insert(0, "numba")
    except RuntimeError:
        pass
    prev = kernels.backend()
    for (b, s, k, n) in sizes:
        x = rng.standard_normal((b, s, k)).astype(np.float32)
        gain = np.ones(k, dtype=np.float32)
        wq = (rng.standard_normal((k, k)) / np.sqrt(k)).astype(np.float32)
        wup = (rng.standard_normal((k, n)) / np.sqrt(k)).astype(np.float32)
        wdown = (rng.standard_normal((n, k)) / np.sqrt(n)).astype(np.float32)
        from .quant import quantize_tensor
        qt = quantize_tensor(wup, 4, block)
        x2 = np.ascontiguousarray(x.reshape(b * s, k))
        rewards = rng.random((16, 64))
        values = rng.random((16, 64))
        dones = (rng.random((16, 64)) < 0.05).astype(np.float64)
        nv = rng.random(16)
        cases = {
            "attn_block": lambda: kernels.attn_block(x, gain, wq, wq, wq, wq, 4, k // 4),
            "mlp_block": lambda: kernels.mlp_block(x, gain, wup, wup, wdown),
            "qdot4": lambda: kernels.qdot4(x2, qt.packed, qt.scales, n, block),
            "gae_scan": lambda: kernels.gae_scan(rewards, values, dones, nv, 0.99, 0.95),
        }
        for cname, fn in cases.items():
            row = {"case": f"{cname}[b{b}xs{s}x{k}x{n}]"}
            for b in backends:
                kernels.set_backend(b)
                fn()
                t0 = time.perf_counter()
                reps = 20
                for _ in range(reps):
                    fn()
                row[f"{b}_ms"] = (time.perf_counter() - t0) / reps * 1e3
            if "numba_ms" in row and "numpy_ms" in row:
                row["speedup"] = row["numpy_ms"] / row["numba_ms"]
            results.append(row)
    kernels.set_backend(prev)
    return results
