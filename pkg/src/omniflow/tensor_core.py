"""Dense float64 primitives with hand-written backward passes, plus a portable RNG.

Arrays are plain ``numpy.ndarray`` objects in float64. Every primitive accepts
optional leading batch dimensions; the documented shapes refer to the trailing
two axes. Backward functions take the upstream gradient first and return
gradients in argument order.
"""
import hashlib
import math

import numpy as np

from .exceptions import RejectedInputError

RMS_EPS = 1e-6

_MASK64 = (1 << 64) - 1
# SplitMix64 constants (Weyl increment and the two xorshift-multiply mixers).
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z):
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def mix_seed(*parts):
    """Fold integers and strings into one 64-bit seed (stable across platforms)."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class Rng:
    """SplitMix64 generator.

    State advances by the Weyl constant ``0x9E3779B97F4A7C15`` per 64-bit draw
    and each output is the state passed through the xorshift-multiply
    finalizer (shifts 30/27/31, multipliers ``0xBF58476D1CE4E5B9`` and
    ``0x94D049BB133111EB``). Because draws are a pure function of
    ``(seed, index)`` a block of ``n`` draws is computed in one vectorized step.
    Uniforms use the top 53 bits; normals use the Box-Muller cosine branch, two
    uniforms per normal.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def spawn(self, key):
        """Independent child stream keyed by ``key`` (e.g. a sample id)."""
        return Rng(mix_seed(self.seed, key))

    def next_u64(self, n):
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
            z = idx + np.uint64(self.state)
            out = _mix64(z)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return out

    def uniform(self, shape=()):
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        bits = self.next_u64(n) >> np.uint64(11)
        vals = bits.astype(np.float64) * (1.0 / (1 << 53))
        return vals.reshape(shape) if shape != () else float(vals[0])

    def normal(self, shape=()):
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        u = self.uniform((2, n))
        # 1 - u lies in (0, 1], so the log is finite.
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        vals = r * np.cos(2.0 * np.pi * u[1])
        return vals.reshape(shape) if shape != () else float(vals[0])

    def integers(self, high, size=None):
        if high <= 0:
            raise RejectedInputError("high must be positive")
        if size is None:
            return min(int(self.uniform() * high), high - 1)
        vals = np.floor(self.uniform((size,)) * high).astype(np.int64)
        return np.minimum(vals, high - 1)

    def permutation(self, n):
        return np.argsort(self.uniform((n,)), kind="stable")


def hash_embedding(key, dim):
    """Deterministic vector in [-1, 1]^dim derived from a string key."""
    vec = Rng(mix_seed("hash-embedding", key)).uniform((dim,))
    return 2.0 * vec - 1.0


def _check_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise RejectedInputError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise RejectedInputError(f"inner extents differ: {a.shape} @ {b.shape}")


def _sum_to_shape(g, shape):
    """Reduce broadcast leading dims of ``g`` so it matches ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_matmul(a, b)
    return np.matmul(a, b)


def matmul_backward(dc, a, b):
    da = np.matmul(dc, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), dc)
    return _sum_to_shape(da, a.shape), _sum_to_shape(db, b.shape)


def softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows_backward(dy, y):
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def attention_forward(q, k, v, key_mask=None):
    """Return ``(softmax(q k^T / sqrt(d)) v, probs)``.

    ``key_mask`` is a boolean vector over keys; False entries receive zero
    weight. With zero keys the output is all zeros.
    """
    if k.shape[-2] != v.shape[-2]:
        raise RejectedInputError(f"key/value counts differ: {k.shape} vs {v.shape}")
    d = q.shape[-1]
    if d <= 0:
        raise RejectedInputError("attention width must be positive")
    if k.shape[-2] == 0:
        out_shape = q.shape[:-1] + (v.shape[-1],)
        return np.zeros(out_shape), np.zeros(q.shape[:-1] + (0,))
    logits = matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(d)
    if key_mask is not None:
        logits = np.where(key_mask, logits, -np.inf)
    probs = softmax_rows(logits)
    return matmul(probs, v), probs


def scaled_dot_attention(q, k, v, key_mask=None):
    return attention_forward(q, k, v, key_mask)[0]


def attention_backward(dout, q, k, v, probs):
    if k.shape[-2] == 0:
        return np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    scale = 1.0 / math.sqrt(q.shape[-1])
    dprobs, dv = matmul_backward(dout, probs, v)
    dlogits = softmax_rows_backward(dprobs, probs) * scale
    dq, dkt = matmul_backward(dlogits, q, np.swapaxes(k, -1, -2))
    return dq, np.swapaxes(dkt, -1, -2), dv


def linear_forward(x, w, b=None):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise RejectedInputError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise RejectedInputError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    y = x @ w
    return y + b if b is not None else y


def linear_backward(dy, x, w):
    """Gradients ``(dx, dw, db)``; weight and bias grads sum over leading dims."""
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def rms_norm(x, gain):
    x = np.asarray(x, dtype=np.float64)
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r * gain


def rms_norm_backward(dy, x, gain):
    d = x.shape[-1]
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    gdy = dy * gain
    dx = gdy / r - x * np.sum(gdy * x, axis=-1, keepdims=True) / (d * r**3)
    dgain = (dy * x / r).reshape(-1, d).sum(axis=0)
    return dx, dgain


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    # plain multiplications: numpy's generic pow for x**3 is several times slower
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu_backward(dy, x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def finite_difference(f, x, index, step=1e-5):
    """Central difference of scalar ``f()`` wrt ``x[index]``; ``x`` is perturbed in place."""
    old = x[index]
    x[index] = old + step
    fp = f()
    x[index] = old - step
    fm = f()
    x[index] = old
    return (fp - fm) / (2.0 * step)


def relative_error(analytic, numeric, floor=1e-12):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)
