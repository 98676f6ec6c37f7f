"""Toy diffusion transformer with shared cross-attention conditioning and two noise experts.

Each block is pre-norm: self-attention over latent tokens, cross-attention
whose keys and values come from the unified condition sequence, then a GELU
MLP. Forward passes return a cache consumed by the matching backward pass.
All functions operate on a leading batch axis ``B``.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive_int, check_unit_interval
from .conditioning import ConditionBundle, init_adapter_params
from .exceptions import RejectedInputError, TrainingDivergenceError
from .tensor_core import (
    attention_backward,
    attention_forward,
    gelu,
    gelu_backward,
    linear_backward,
    linear_forward,
    rms_norm,
    rms_norm_backward,
)

TIME_SCALE = 1000.0
_ATTN_WEIGHTS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


@dataclass
class DiTConfig:
    n_blocks: int = 2
    d_dit: int = 32
    n_heads: int = 4
    d_latent: int = 4
    d_mllm: int = 16
    d_txt: int = 16
    mlp_ratio: int = 4
    max_frames: int = 16
    max_height: int = 16
    max_width: int = 16

    def __post_init__(self):
        for name in ("d_dit", "n_heads", "d_latent", "d_mllm", "d_txt", "mlp_ratio",
                     "max_frames", "max_height", "max_width"):
            check_positive_int(getattr(self, name), name)
        check_positive_int(self.n_blocks, "n_blocks", allow_zero=True)
        if self.d_dit % self.n_heads:
            raise RejectedInputError(f"d_dit={self.d_dit} not divisible by n_heads={self.n_heads}")
        if self.d_dit % 2:
            raise RejectedInputError("d_dit must be even for the sinusoidal time embedding")

    @property
    def d_head(self):
        return self.d_dit // self.n_heads


@dataclass
class DiTParams:
    config: DiTConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self):
        return DiTParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def n_parameters(self):
        return sum(v.size for v in self.tensors.values())


@dataclass
class LatentGrid:
    """Latent tokens flattened row-major from an ``F x h x w`` grid."""

    tokens: np.ndarray
    grid_shape: tuple

    def __post_init__(self):
        self.grid_shape = tuple(int(n) for n in self.grid_shape)
        if self.tokens.shape[-2] != int(np.prod(self.grid_shape)):
            raise RejectedInputError(
                f"{self.tokens.shape[-2]} tokens do not fill grid {self.grid_shape}"
            )

    @classmethod
    def from_array(cls, z):
        z = np.asarray(z, dtype=np.float64)
        return cls(z.reshape(z.shape[:-4] + (-1, z.shape[-1])), z.shape[-4:-1])

    def to_array(self):
        return self.tokens.reshape(self.tokens.shape[:-2] + self.grid_shape + (self.tokens.shape[-1],))


@dataclass
class ExpertRouter:
    low_noise: DiTParams
    high_noise: DiTParams
    u_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.u_threshold < 1.0:
            raise RejectedInputError("u_threshold must lie strictly inside (0, 1)")
        if self.low_noise.config != self.high_noise.config:
            raise RejectedInputError("experts must share hyperparameters")

    def experts(self):
        return {"low": self.low_noise, "high": self.high_noise}


def route_expert(u, router):
    """High-noise expert for ``u > threshold``; ties go to the low-noise expert."""
    return router.high_noise if expert_name(u, router.u_threshold) == "high" else router.low_noise


def expert_name(u, u_threshold):
    u = check_unit_interval(u)
    return "high" if u > u_threshold else "low"


def init_dit_params(config, rng, zero_head=True):
    d, c = config.d_dit, config.d_latent
    hidden = config.mlp_ratio * d

    def dense(fan_in, fan_out):
        return rng.normal((fan_in, fan_out)) / math.sqrt(fan_in)

    t = {
        "in.w": dense(c, d),
        "in.b": np.zeros(d),
        "pos.f": 0.1 * rng.normal((config.max_frames, d)),
        "pos.h": 0.1 * rng.normal((config.max_height, d)),
        "pos.w": 0.1 * rng.normal((config.max_width, d)),
        "time.w": dense(d, d),
        "time.b": np.zeros(d),
    }
    for i in range(config.n_blocks):
        pre = f"blocks.{i}"
        for j in (1, 2, 3):
            t[f"{pre}.norm{j}"] = np.ones(d)
        for kind in ("self", "cross"):
            for name in _ATTN_WEIGHTS:
                t[f"{pre}.{kind}.{name}"] = dense(d, d) if name[0] == "w" else np.zeros(d)
        t[f"{pre}.mlp.w1"] = dense(d, hidden)
        t[f"{pre}.mlp.b1"] = np.zeros(hidden)
        t[f"{pre}.mlp.w2"] = dense(hidden, d)
        t[f"{pre}.mlp.b2"] = np.zeros(d)
    t["out.norm"] = np.ones(d)
    t["out.w"] = np.zeros((d, c)) if zero_head else dense(d, c)
    t["out.b"] = np.zeros(c)
    t.update(init_adapter_params(config.d_mllm, config.d_txt, c, d, rng))
    return DiTParams(config, t)


def time_embed(u, d_dit):
    """Interleaved ``[sin, cos]`` features of ``u`` at ``d_dit / 2`` frequencies.

    Accepts a scalar (returns shape ``(d_dit,)``) or a vector of times
    (returns ``(B, d_dit)``).
    """
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any(u_arr < 0.0) or np.any(u_arr > 1.0) or not np.all(np.isfinite(u_arr)):
        raise RejectedInputError(f"u must lie in [0, 1], got {u}")
    half = d_dit // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = TIME_SCALE * u_arr[..., None] * freqs
    out = np.empty(u_arr.shape + (d_dit,))
    out[..., 0::2] = np.sin(args)
    out[..., 1::2] = np.cos(args)
    return out


def grid_indices(grid_shape):
    f, i, j = np.meshgrid(*(np.arange(n) for n in grid_shape), indexing="ij")
    return f.ravel(), i.ravel(), j.ravel()


def _split_heads(x, n_heads):
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _attn_weights(p, pre):
    return [p[f"{pre}.{n}"] for n in _ATTN_WEIGHTS]


def _mha_forward(xq, xkv, p, pre, n_heads, fabric=None, kind="self"):
    wq, bq, wk, bk, wv, bv, wo, bo = _attn_weights(p, pre)
    q = linear_forward(xq, wq, bq)
    if fabric is not None:
        from . import seq_parallel as sp

        merged = np.empty_like(q)
        for b in range(q.shape[0]):
            if kind == "self":
                merged[b] = sp.sp_self_attention_full(
                    fabric, q[b], linear_forward(xkv[b], wk, bk), linear_forward(xkv[b], wv, bv), n_heads
                )
            else:
                merged[b] = sp.sp_cross_attention_full(fabric, q[b], xkv[b], wk, bk, wv, bv, n_heads)
        return linear_forward(merged, wo, bo), None
    k = linear_forward(xkv, wk, bk)
    v = linear_forward(xkv, wv, bv)
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    o, probs = attention_forward(qh, kh, vh)
    om = _merge_heads(o)
    return linear_forward(om, wo, bo), (xq, xkv, qh, kh, vh, probs, om)


def _mha_backward(dout, cache, p, pre, n_heads, grads):
    xq, xkv, qh, kh, vh, probs, om = cache
    wq, _, wk, _, wv, _, wo, _ = _attn_weights(p, pre)
    dom, dwo, dbo = linear_backward(dout, om, wo)
    dqh, dkh, dvh = attention_backward(_split_heads(dom, n_heads), qh, kh, vh, probs)
    dxq, dwq, dbq = linear_backward(_merge_heads(dqh), xq, wq)
    dxk, dwk, dbk = linear_backward(_merge_heads(dkh), xkv, wk)
    dxv, dwv, dbv = linear_backward(_merge_heads(dvh), xkv, wv)
    for name, g in zip(_ATTN_WEIGHTS, (dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo)):
        grads[f"{pre}.{name}"] += g
    return dxq, dxk + dxv


def _block_forward(h, c, p, pre, n_heads, fabric=None):
    cache = {"h0": h}
    a1 = rms_norm(h, p[f"{pre}.norm1"])
    sa, cache["self"] = _mha_forward(a1, a1, p, f"{pre}.self", n_heads, fabric, "self")
    h = h + sa
    cache["h1"] = h
    if c.shape[1] > 0:
        a2 = rms_norm(h, p[f"{pre}.norm2"])
        ca, cache["cross"] = _mha_forward(a2, c, p, f"{pre}.cross", n_heads, fabric, "cross")
        h = h + ca
    cache["h2"] = h
    a3 = rms_norm(h, p[f"{pre}.norm3"])
    pre_act = linear_forward(a3, p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"])
    act = gelu(pre_act)
    h = h + linear_forward(act, p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"])
    cache.update(a3=a3, pre_act=pre_act, act=act)
    return h, cache


def _block_backward(dh, c, cache, p, pre, n_heads, grads, dc):
    dact, dw2, db2 = linear_backward(dh, cache["act"], p[f"{pre}.mlp.w2"])
    dpre = gelu_backward(dact, cache["pre_act"])
    da3, dw1, db1 = linear_backward(dpre, cache["a3"], p[f"{pre}.mlp.w1"])
    grads[f"{pre}.mlp.w2"] += dw2
    grads[f"{pre}.mlp.b2"] += db2
    grads[f"{pre}.mlp.w1"] += dw1
    grads[f"{pre}.mlp.b1"] += db1
    dn, dg = rms_norm_backward(da3, cache["h2"], p[f"{pre}.norm3"])
    grads[f"{pre}.norm3"] += dg
    dh = dh + dn
    if c.shape[1] > 0:
        da2, dck = _mha_backward(dh, cache["cross"], p, f"{pre}.cross", n_heads, grads)
        dc += dck
        dn, dg = rms_norm_backward(da2, cache["h1"], p[f"{pre}.norm2"])
        grads[f"{pre}.norm2"] += dg
        dh = dh + dn
    dxq, dxkv = _mha_backward(dh, cache["self"], p, f"{pre}.self", n_heads, grads)
    dn, dg = rms_norm_backward(dxq + dxkv, cache["h0"], p[f"{pre}.norm1"])
    grads[f"{pre}.norm1"] += dg
    return dh + dn


def _check_grid(grid_shape, config):
    limits = (config.max_frames, config.max_height, config.max_width)
    if len(grid_shape) != 3 or any(n < 1 or n > m for n, m in zip(grid_shape, limits)):
        raise RejectedInputError(f"grid {grid_shape} outside model limits {limits}")


def forward(x, u, c, params, grid_shape, fabric=None):
    """Batched forward.

    Args:
        x: noisy latents, ``(B, S, d_latent)``.
        u: noise levels, ``(B,)``.
        c: condition sequences, ``(B, L_C, d_dit)``.
        grid_shape: ``(F, h, w)`` with ``F * h * w == S``.
        fabric: optional :class:`~omniflow.seq_parallel.WorkerFabric`; routes
            both attention types through the sequence-parallel path
            (forward only, no cache).

    Returns:
        ``(v, cache)`` with ``v`` of shape ``(B, S, d_latent)``.
    """
    cfg = params.config
    p = params.tensors
    _check_grid(grid_shape, cfg)
    if x.ndim != 3 or x.shape[1] != int(np.prod(grid_shape)) or x.shape[2] != cfg.d_latent:
        raise RejectedInputError(f"latent shape {x.shape} inconsistent with grid {grid_shape}")
    if c.ndim != 3 or c.shape[0] != x.shape[0] or c.shape[2] != cfg.d_dit:
        raise RejectedInputError(f"condition shape {c.shape} inconsistent with model width")
    fi, hi, wi = grid_indices(grid_shape)
    te = time_embed(u, cfg.d_dit)
    h = (
        linear_forward(x, p["in.w"], p["in.b"])
        + (p["pos.f"][fi] + p["pos.h"][hi] + p["pos.w"][wi])
        + linear_forward(te, p["time.w"], p["time.b"])[:, None, :]
    )
    caches = []
    for i in range(cfg.n_blocks):
        h, blk = _block_forward(h, c, p, f"blocks.{i}", cfg.n_heads, fabric)
        if not np.all(np.isfinite(h)):
            raise TrainingDivergenceError(f"non-finite activations after block {i}", block_index=i)
        caches.append(blk)
    a = rms_norm(h, p["out.norm"])
    v = linear_forward(a, p["out.w"], p["out.b"])
    if not np.all(np.isfinite(v)):
        raise TrainingDivergenceError("non-finite output projection", block_index=cfg.n_blocks)
    cache = None
    if fabric is None:
        cache = {"x": x, "c": c, "te": te, "blocks": caches, "h": h, "a": a, "idx": (fi, hi, wi)}
    return v, cache


def backward(dv, cache, params):
    """Return ``(grads, dc)`` for the upstream gradient ``dv`` of :func:`forward`.

    Adapter entries of ``grads`` stay zero here; they are filled from ``dc``
    by :func:`omniflow.conditioning.bundle_backward`.
    """
    cfg = params.config
    p = params.tensors
    grads = params.zeros_like()
    c = cache["c"]
    dc = np.zeros_like(c)
    da, dw, db = linear_backward(dv, cache["a"], p["out.w"])
    grads["out.w"] += dw
    grads["out.b"] += db
    dh, dg = rms_norm_backward(da, cache["h"], p["out.norm"])
    grads["out.norm"] += dg
    for i in reversed(range(cfg.n_blocks)):
        dh = _block_backward(dh, c, cache["blocks"][i], p, f"blocks.{i}", cfg.n_heads, grads, dc)
    fi, hi, wi = cache["idx"]
    dpos = dh.sum(axis=0)
    np.add.at(grads["pos.f"], fi, dpos)
    np.add.at(grads["pos.h"], hi, dpos)
    np.add.at(grads["pos.w"], wi, dpos)
    _, dw, db = linear_backward(dh.sum(axis=1), cache["te"], p["time.w"])
    grads["time.w"] += dw
    grads["time.b"] += db
    _, dw, db = linear_backward(dh, cache["x"], p["in.w"])
    grads["in.w"] += dw
    grads["in.b"] += db
    return grads, dc


def _as_batch(z_u, u, c):
    if isinstance(z_u, LatentGrid):
        grid, x = z_u.grid_shape, z_u.tokens
    else:
        z = np.asarray(z_u, dtype=np.float64)
        grid, x = z.shape[-4:-1], z.reshape(z.shape[:-4] + (-1, z.shape[-1]))
    seq = c.sequence if isinstance(c, ConditionBundle) else np.asarray(c, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x, seq = x[None], seq[None]
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), (x.shape[0],)).copy()
    return x, u, seq, grid, single


def model_forward(z_u, u, c, params, fabric=None):
    """Predicted velocity for one latent (``LatentGrid`` or ``F x h x w x c`` array).

    Returns a ``S x d_latent`` array (or ``B x S x d_latent`` for batched input).
    """
    x, u, seq, grid, single = _as_batch(z_u, u, c)
    v, _ = forward(x, u, seq, params, grid, fabric)
    return v[0] if single else v


def dit_block_forward(x, c, params, block=0):
    """Run one transformer block on width-``d_dit`` latent tokens."""
    p = params.tensors
    n_heads = params.config.n_heads
    seq = c.sequence if isinstance(c, ConditionBundle) else np.asarray(c, dtype=np.float64)
    if seq.shape[-1] != x.tokens.shape[-1]:
        raise RejectedInputError("latent tokens and condition sequence disagree on width")
    h, _ = _block_forward(x.tokens[None], seq[None], p, f"blocks.{block}", n_heads)
    return LatentGrid(h[0], x.grid_shape)
