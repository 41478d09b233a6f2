"""Shared oracles for the test suite.

Everything here is computed independently of the library's forward/backward
paths: straight-line float64 formulas, brute-force loops, and central finite
differences. Tests compare library output against these.
"""

import numpy as np
from scipy.special import erf


def matmul_triple_loop(a, b):
    """Naive float64 triple loop, 2-D only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_ref(x, axis):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def layernorm_ref(x, gamma, beta, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return np.asarray(gamma, dtype=np.float64) * xhat + np.asarray(beta, dtype=np.float64)


def gelu_ref(x):
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def central_difference(f, arrays, h=1e-3):
    """Central finite differences of scalar f(arrays) w.r.t. each array.

    f receives float64 copies and must return a python float; the forward
    evaluations stay entirely in 64-bit.
    """
    grads = []
    base = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    for i, a in enumerate(base):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = f(*base)
            flat[j] = orig - h
            down = f(*base)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(actual, expected, floor=1e-8):
    """Max-norm relative error with an absolute floor for near-zero references."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    denom = max(np.abs(expected).max(), floor)
    return np.abs(actual - expected).max() / denom


def nearest_code_1d(targets, scale, zero, qmax):
    """Exhaustive nearest-code search on a 1-D transformed/affine domain.

    For each target t, enumerate every code q in [0, qmax], measure
    |t - scale * (q - zero)|, and keep the minimizer. Exact ties resolve to
    the code with the larger |q - zero|, which is half-away-from-zero
    rounding expressed in value space.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    codes = np.arange(qmax + 1)
    grid = scale * (codes - zero)
    dist = np.abs(targets[:, None] - grid[None, :])
    best = dist.min(axis=1, keepdims=True)
    tie = dist == best
    pref = np.where(tie, np.abs(codes - zero)[None, :], -1)
    return codes[np.argmax(pref, axis=1)]


def oracle_uq(x, p):
    """Nearest representable value under uniform params, channel-aware."""
    x = np.asarray(x, dtype=np.float64)
    if len(p.scale) == 1:
        return nearest_code_1d(x, float(p.scale[0]), int(p.zero_point[0]), p.qmax).reshape(x.shape)
    out = np.empty(x.shape, dtype=np.int64)
    flat = x.reshape(-1, x.shape[-1])
    oflat = out.reshape(-1, x.shape[-1])
    for c in range(x.shape[-1]):
        oflat[:, c] = nearest_code_1d(flat[:, c], float(p.scale[c]),
                                      int(p.zero_point[c]), p.qmax)
    return out


def oracle_lq(x, p):
    """Nearest code in the -log2(x / s) domain (codes are the integers)."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        t = -np.log2(x / float(p.scale[0]))
    t = np.minimum(t, p.qmax + 1.0)  # +inf (x == 0) saturates
    return nearest_code_1d(t, 1.0, 0, p.qmax).reshape(x.shape)


def oracle_sulq(x, p):
    """Nearest code in the shifted-log domain t = -log2(x + eta)."""
    x = np.asarray(x, dtype=np.float64)
    t = -np.log2(x + p.eta)
    return nearest_code_1d(t, float(p.scale[0]), int(p.zero_point[0]),
                           p.qmax).reshape(x.shape)


def softmax_longtail_samples(rng, n, rows=64, sharpness=6.0):
    """Draw post-Softmax-style values: flatten softmax rows of sharp logits."""
    width = max(2, n // rows + 1)
    logits = rng.normal(scale=sharpness, size=(rows, width))
    probs = softmax_ref(logits, axis=-1).reshape(-1)
    return probs[:n].astype(np.float64)


def mhsa_ref(x, w_qkv, b_qkv, w_o, b_o, heads):
    """Straight-line float64 multi-head attention on a normalized (B, N, D) input."""
    x = np.asarray(x, dtype=np.float64)
    b, n, d = x.shape
    dh = d // heads
    qkv = x @ np.asarray(w_qkv, dtype=np.float64) + np.asarray(b_qkv, dtype=np.float64)
    per_head = []
    for h in range(heads):
        q = qkv[:, :, h * dh:(h + 1) * dh]
        k = qkv[:, :, d + h * dh:d + (h + 1) * dh]
        v = qkv[:, :, 2 * d + h * dh:2 * d + (h + 1) * dh]
        scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(dh)
        probs = softmax_ref(scores, axis=-1)
        per_head.append(probs @ v)
    ctx = np.concatenate(per_head, axis=-1)
    return ctx @ np.asarray(w_o, dtype=np.float64) + np.asarray(b_o, dtype=np.float64)


def block_forward_ref(x, params, heads, eps=1e-6):
    """Independent float64 reference for one pre-LN transformer block."""
    x = np.asarray(x, dtype=np.float64)
    h = layernorm_ref(x, params["ln1.gamma"], params["ln1.beta"], eps)
    z = mhsa_ref(h, params["attn.qkv.weight"], params["attn.qkv.bias"],
                 params["attn.proj.weight"], params["attn.proj.bias"], heads) + x
    h2 = layernorm_ref(z, params["ln2.gamma"], params["ln2.beta"], eps)
    a = gelu_ref(h2 @ np.asarray(params["mlp.fc1.weight"], dtype=np.float64)
                 + np.asarray(params["mlp.fc1.bias"], dtype=np.float64))
    return (a @ np.asarray(params["mlp.fc2.weight"], dtype=np.float64)
            + np.asarray(params["mlp.fc2.bias"], dtype=np.float64)) + z


def random_block(rng, dim, heads, hidden, weight_scale=0.3):
    from vitptq.model import ViTBlock
    from vitptq.tensor import Tensor

    def w(*shape):
        return Tensor((rng.normal(size=shape) * weight_scale / np.sqrt(shape[0])
                       ).astype(np.float32))

    return ViTBlock(
        w_qkv=w(dim, 3 * dim), b_qkv=w(3 * dim),
        w_o=w(dim, dim), b_o=w(dim),
        w1=w(dim, hidden), b1=w(hidden),
        w2=w(hidden, dim), b2=w(dim),
        ln1_gamma=Tensor(np.ones(dim, dtype=np.float32)),
        ln1_beta=Tensor(np.zeros(dim, dtype=np.float32)),
        ln2_gamma=Tensor(np.ones(dim, dtype=np.float32)),
        ln2_beta=Tensor(np.zeros(dim, dtype=np.float32)),
        heads=heads, head_dim=dim // heads,
    )


def random_model(rng, depth=2, dim=16, heads=2, mlp_ratio=2.0, tokens=6, classes=0):
    from vitptq.model import Model, ModelConfig

    config = ModelConfig(depth=depth, dim=dim, heads=heads,
                         mlp_ratio=mlp_ratio, tokens=tokens)
    blocks = [random_block(rng, dim, heads, config.hidden) for _ in range(depth)]
    extras = {}
    if classes:
        extras["head.weight"] = (rng.normal(size=(dim, classes)) * 0.3).astype(np.float32)
        extras["head.bias"] = np.zeros(classes, dtype=np.float32)
    return Model(config=config, blocks=blocks, extras=extras)
