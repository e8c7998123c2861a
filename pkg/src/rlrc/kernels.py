"""Hot numeric kernels with two interchangeable backends.

The inference-side inner loops (decoder blocks, dequantize-matmul, GAE
scan) are implemented twice: once with numba @njit and once in plain
vectorized numpy.  RLRC_KERNELS selects the backend:

    RLRC_KERNELS=auto    use numba when importable (default)
    RLRC_KERNELS=numba   require numba
    RLRC_KERNELS=numpy   pure numpy fallback

Both backends compute the same math; equivalence is covered by tests and
`rlrc bench-kernels` reports the speed difference.  Training-side autodiff
(tensor.py) always runs on numpy/BLAS and is unaffected by this flag.
"""

import os

import numpy as np

_EPS_NORM = 1e-6

_env = os.environ.get("RLRC_KERNELS", "auto").lower()
if _env not in ("auto", "numba", "numpy"):
    raise ValueError(f"RLRC_KERNELS must be auto|numba|numpy, got {_env!r}")

_HAS_NUMBA = False
if _env != "numpy":
    try:
        import numba
        from numba import njit

        _HAS_NUMBA = True
    except ImportError:
        if _env == "numba":
            raise

_BACKEND = "numba" if _HAS_NUMBA else "numpy"


def backend():
    """Name of the active backend ('numba' or 'numpy')."""
    return _BACKEND


def set_backend(name):
    """Switch backend at runtime (used by tests and the kernel benchmark)."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    _BACKEND = name


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _rms_rows_np(x2, gain):
    ms = np.mean(np.square(x2, dtype=np.float64), axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + _EPS_NORM)).astype(np.float32)
    return x2 * inv * gain


def _attn_block_np(x, gain, wq, wk, wv, wo, n_heads, head_dim):
    b, s, d = x.shape
    xn = _rms_rows_np(x.reshape(b * s, d), gain)
    q = (xn @ wq).reshape(b, s, n_heads, head_dim).transpose(0, 2, 1, 3)
    k = (xn @ wk).reshape(b, s, n_heads, head_dim).transpose(0, 2, 1, 3)
    v = (xn @ wv).reshape(b, s, n_heads, head_dim).transpose(0, 2, 1, 3)
    scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * np.float32(1.0 / np.sqrt(head_dim))
    mask = np.triu(np.full((s, s), -1e9, dtype=np.float32), k=1)
    scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = np.matmul(p, v).transpose(0, 2, 1, 3).reshape(b * s, n_heads * head_dim)
    return x + (ctx @ wo).reshape(b, s, d)


def _mlp_block_np(x, gain, wup, wgate, wdown):
    b, s, d = x.shape
    xn = _rms_rows_np(x.reshape(b * s, d), gain)
    u = xn @ wup
    g = xn @ wgate
    h = u * (g / (1.0 + np.exp(-g)))
    return x + (h @ wdown).reshape(b, s, d)


# transient-buffer audit hook for the fallback qdot paths; the numpy
# implementation works one weight row (one row of blocks) at a time
_alloc_hook = None


def set_alloc_hook(fn):
    """Install fn(num_f32_elements) called per transient buffer (numpy path)."""
    global _alloc_hook
    _alloc_hook = fn


def _qdot4_np(x, packed, scales, n, block):
    m, k = x.shape
    out = np.zeros((m, n), dtype=np.float32)
    idx = np.arange(n)
    for i in range(k):
        flat = i * n + idx
        byte = packed[flat >> 1]
        c = np.where(flat & 1, byte >> 4, byte & 0xF).astype(np.int8)
        c = np.where(c >= 8, c - 16, c)
        row = scales[flat // block] * c
        if _alloc_hook is not None:
            _alloc_hook(row.size)
        out += x[:, i : i + 1] * row[None, :]
    return out


def _qdot8_np(x, codes, scales, n, block):
    m, k = x.shape
    out = np.zeros((m, n), dtype=np.float32)
    idx = np.arange(n)
    for i in range(k):
        flat = i * n + idx
        row = scales[flat // block] * codes[flat]
        if _alloc_hook is not None:
            _alloc_hook(row.size)
        out += x[:, i : i + 1] * row[None, :]
    return out


def _gae_scan_np(rewards, values, dones, next_values, gamma, lam):
    n, h = rewards.shape
    adv = np.zeros((n, h), dtype=np.float64)
    acc = np.zeros(n, dtype=np.float64)
    for t in range(h - 1, -1, -1):
        nv = next_values if t == h - 1 else values[:, t + 1]
        nonterm = 1.0 - dones[:, t]
        delta = rewards[:, t] + gamma * nv * nonterm - values[:, t]
        acc = delta + gamma * lam * nonterm * acc
        adv[:, t] = acc
    return adv


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAS_NUMBA:

    @njit(cache=True, fastmath=True)
    def _rms_rows_nb(x2, gain, out):
        r, d = x2.shape
        for i in range(r):
            ms = 0.0
            for c in range(d):
                v = x2[i, c]
                ms += v * v
            inv = 1.0 / np.sqrt(ms / d + _EPS_NORM)
            for c in range(d):
                out[i, c] = np.float32(x2[i, c] * inv) * gain[c]

    @njit(cache=True, fastmath=True)
    def _attn_block_nb(x, gain, wq, wk, wv, wo, n_heads, head_dim):
        b, s, d = x.shape
        x2 = x.reshape(b * s, d)
        xn = np.empty_like(x2)
        _rms_rows_nb(x2, gain, xn)
        q = np.dot(xn, wq)
        k = np.dot(xn, wk)
        v = np.dot(xn, wv)
        hd = n_heads * head_dim
        ctx = np.empty((b * s, hd), dtype=np.float32)
        scale = np.float32(1.0 / np.sqrt(head_dim))
        scores = np.empty(s, dtype=np.float32)
        for bi in range(b):
            base = bi * s
            for h in range(n_heads):
                off = h * head_dim
                for i in range(s):
                    mx = np.float32(-1e30)
                    for j in range(i + 1):
                        acc = np.float32(0.0)
                        for dd in range(head_dim):
                            acc += q[base + i, off + dd] * k[base + j, off + dd]
                        acc *= scale
                        scores[j] = acc
                        if acc > mx:
                            mx = acc
                    den = np.float32(0.0)
                    for j in range(i + 1):
                        e = np.exp(scores[j] - mx)
                        scores[j] = e
                        den += e
                    for dd in range(head_dim):
                        acc = np.float32(0.0)
                        for j in range(i + 1):
                            acc += scores[j] * v[base + j, off + dd]
                        ctx[base + i, off + dd] = acc / den
        out = np.dot(ctx, wo)
        return (x2 + out).reshape(b, s, d)

    @njit(cache=True, fastmath=True)
    def _mlp_block_nb(x, gain, wup, wgate, wdown):
        b, s, d = x.shape
        x2 = x.reshape(b * s, d)
        xn = np.empty_like(x2)
        _rms_rows_nb(x2, gain, xn)
        u = np.dot(xn, wup)
        g = np.dot(xn, wgate)
        r, f = u.shape
        for i in range(r):
            for c in range(f):
                gv = g[i, c]
                u[i, c] = u[i, c] * (gv / (1.0 + np.exp(-gv)))
        out = np.dot(u, wdown)
        return (x2 + out).reshape(b, s, d)

    @njit(cache=True, fastmath=True)
    def _qdot4_nb(x, packed, scales, n, block):
        m, k = x.shape
        out = np.zeros((m, n), dtype=np.float32)
        row = np.empty(n, dtype=np.float32)
        for i in range(k):
            base = i * n
            for j in range(n):
                flat = base + j
                byte = packed[flat >> 1]
                if flat & 1:
                    c = (byte >> 4) & 0xF
                else:
                    c = byte & 0xF
                if c >= 8:
                    c -= 16
                row[j] = scales[flat // block] * c
            for r in range(m):
                xv = x[r, i]
                if xv != 0.0:
                    for j in range(n):
                        out[r, j] += xv * row[j]
        return out

    @njit(cache=True, fastmath=True)
    def _qdot8_nb(x, codes, scales, n, block):
        m, k = x.shape
        out = np.zeros((m, n), dtype=np.float32)
        row = np.empty(n, dtype=np.float32)
        for i in range(k):
            base = i * n
            for j in range(n):
                flat = base + j
                row[j] = scales[flat // block] * codes[flat]
            for r in range(m):
                xv = x[r, i]
                if xv != 0.0:
                    for j in range(n):
                        out[r, j] += xv * row[j]
        return out

    @njit(cache=True)
    def _gae_scan_nb(rewards, values, dones, next_values, gamma, lam):
        n, h = rewards.shape
        adv = np.zeros((n, h), dtype=np.float64)
        for i in range(n):
            acc = 0.0
            for t in range(h - 1, -1, -1):
                if t == h - 1:
                    nv = next_values[i]
                else:
                    nv = values[i, t + 1]
                nonterm = 1.0 - dones[i, t]
                delta = rewards[i, t] + gamma * nv * nonterm - values[i, t]
                acc = delta + gamma * lam * nonterm * acc
                adv[i, t] = acc
        return adv


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def attn_block(x, gain, wq, wk, wv, wo, n_heads, head_dim):
    """Pre-norm causal self-attention block with residual; returns new x."""
    if _BACKEND == "numba":
        return _attn_block_nb(x, gain, wq, wk, wv, wo, n_heads, head_dim)
    return _attn_block_np(x, gain, wq, wk, wv, wo, n_heads, head_dim)


def mlp_block(x, gain, wup, wgate, wdown):
    """Pre-norm gated MLP block (silu gate) with residual; returns new x."""
    if _BACKEND == "numba":
        return _mlp_block_nb(x, gain, wup, wgate, wdown)
    return _mlp_block_np(x, gain, wup, wgate, wdown)


def rms_rows(x2, gain):
    """Row-wise rms normalization with gain (2-d input)."""
    if _BACKEND == "numba":
        out = np.empty_like(x2)
        _rms_rows_nb(x2, gain, out)
        return out
    return _rms_rows_np(x2, gain)


def qdot4(x, packed, scales, n, block):
    """x @ W for a 4-bit packed weight of logical shape (x.shape[1], n).

    Dequantizes one weight row at a time; never materializes the dense
    matrix.
    """
    if _BACKEND == "numba":
        return _qdot4_nb(x, packed, scales, n, block)
    return _qdot4_np(x, packed, scales, n, block)


def qdot8(x, codes, scales, n, block):
    """x @ W for an 8-bit weight of logical shape (x.shape[1], n)."""
    if _BACKEND == "numba":
        return _qdot8_nb(x, codes, scales, n, block)
    return _qdot8_np(x, codes, scales, n, block)


def gae_scan(rewards, values, dones, next_values, gamma, lam):
    """Reverse-time GAE recursion over an (envs, horizon) grid (float64)."""
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    dones = np.ascontiguousarray(dones, dtype=np.float64)
    next_values = np.ascontiguousarray(next_values, dtype=np.float64)
    if _BACKEND == "numba":
        return _gae_scan_nb(rewards, values, dones, next_values, gamma, lam)
    return _gae_scan_np(rewards, values, dones, next_values, gamma, lam)


def warmup():
    """Trigger jit compilation of every kernel (no-op on the numpy backend)."""
    if _BACKEND != "numba":
        return
    x = np.zeros((1, 2, 8), dtype=np.float32)
    gain = np.ones(8, dtype=np.float32)
    w = np.zeros((8, 8), dtype=np.float32)
    attn_block(x, gain, w, w, w, w, 2, 4)
    mlp_block(x, gain, w, w, w.copy())
    qdot4(np.zeros((1, 4), dtype=np.float32), np.zeros(16, dtype=np.uint8),
          np.ones(1, dtype=np.float32), 8, 64)
    qdot8(np.zeros((1, 4), dtype=np.float32), np.zeros(32, dtype=np.int8),
          np.ones(1, dtype=np.float32), 8, 64)
    gae_scan(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)),
             np.zeros(1), 0.99, 0.95)
