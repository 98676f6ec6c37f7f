"""Flow-matching objective, optimizer, training step and Euler sampler.

The interpolation path is ``z_u = (1 - u) z + u eps`` so ``u = 0`` is data,
``u = 1`` is noise, and the target velocity ``eps - z`` is constant along
each path. Sampling integrates from ``u = 1`` down to ``u = 0``.
"""
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive_int, check_unit_interval
from .conditioning import (
    DropoutConfig,
    DropoutMasks,
    apply_masks,
    build_bundle,
    bundle_backward,
    draw_dropout_masks,
    with_masks_zeroed,
)
from .dit import backward, expert_name, forward
from .exceptions import RejectedInputError, SamplerDivergenceError, TrainingDivergenceError

EXPERT_ORDER = ("low", "high")


@dataclass
class FlowSample:
    z: np.ndarray
    eps: np.ndarray
    u: float
    z_u: np.ndarray
    v_star: np.ndarray


def sample_path(z, eps, u):
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise RejectedInputError(f"z {z.shape} and eps {eps.shape} differ in shape")
    u = check_unit_interval(u)
    return FlowSample(z, eps, u, (1.0 - u) * z + u * eps, eps - z)


def flow_loss(pred, v_star):
    """Mean squared error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    v_star = np.asarray(v_star, dtype=np.float64)
    if pred.shape != v_star.shape:
        raise RejectedInputError(f"prediction {pred.shape} and target {v_star.shape} differ")
    loss = float(np.mean((pred - v_star) ** 2))
    if not np.isfinite(loss):
        raise TrainingDivergenceError("non-finite flow loss")
    return loss


def flow_loss_grad(pred, v_star):
    return 2.0 * (pred - v_star) / pred.size


@dataclass
class OptimState:
    """Adam moments for one expert."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optim(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return OptimState(lr, beta1, beta2, eps, 0, params.zeros_like(), params.zeros_like())


def adam_update(params, grads, state):
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.tensors[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainingExample:
    """A target latent ``F x h x w x c`` and its unprojected condition sources."""

    latent: np.ndarray
    sources: object
    sample_id: str = ""


@dataclass
class StepResult:
    loss: float
    experts: list
    masks: list

    def __float__(self):
        return self.loss

    def expert_counts(self):
        return {e: self.experts.count(e) for e in EXPERT_ORDER}

    def kept_counts(self):
        return {s: sum(m.get(s) for m in self.masks) for s in ("mllm", "tgt", "edit")}


def _draw(batch, rng, dropout, u_range, u_threshold):
    lo, hi = u_range
    draws = []
    for ex in batch:
        u = lo + (hi - lo) * rng.uniform()
        eps = rng.normal(ex.latent.shape)
        masks = draw_dropout_masks(dropout, rng)
        draws.append((sample_path(ex.latent, eps, u), masks, expert_name(u, u_threshold)))
    return draws


def _group_by_length(indices, bundles):
    groups = defaultdict(list)
    for i in indices:
        groups[bundles[i].length].append(i)
    return [groups[k] for k in sorted(groups)]


def batch_loss(batch, router, rng, dropout=None, u_range=(0.0, 1.0), with_grads=True):
    """Loss (and per-expert gradients) for one shape-homogeneous batch.

    Random draws happen per sample in batch order: ``u``, then ``eps``, then the
    three dropout masks.
    """
    if not batch:
        raise RejectedInputError("batch must be nonempty")
    shape = batch[0].latent.shape
    if any(ex.latent.shape != shape for ex in batch):
        raise RejectedInputError("batch mixes latent shapes; draw batches from one bucket")
    dropout = dropout or DropoutConfig()
    grid = shape[:3]
    draws = _draw(batch, rng, dropout, u_range, router.u_threshold)
    n = len(batch)
    total = 0.0
    grads = {}
    for name in EXPERT_ORDER:
        idx = [i for i, d in enumerate(draws) if d[2] == name]
        if not idx:
            continue
        params = router.experts()[name]
        bundles = {i: apply_masks(build_bundle(batch[i].sources, params), draws[i][1], dropout.mode)
                   for i in idx}
        g_expert = params.zeros_like() if with_grads else None
        for group in _group_by_length(idx, bundles):
            fs = [draws[i][0] for i in group]
            x = np.stack([f.z_u.reshape(-1, shape[-1]) for f in fs])
            target = np.stack([f.v_star.reshape(-1, shape[-1]) for f in fs])
            u = np.array([f.u for f in fs])
            c = np.stack([bundles[i].sequence for i in group])
            v, cache = forward(x, u, c, params, grid)
            diff = v - target
            total += float(np.sum(np.mean(diff**2, axis=(1, 2))))
            if not with_grads:
                continue
            dv = 2.0 * diff / (diff[0].size * n)
            g, dc = backward(dv, cache, params)
            for k in g:
                g_expert[k] += g[k]
            for j, i in enumerate(group):
                bundle_backward(dc[j], batch[i].sources, draws[i][1], bundles[i], g_expert)
        if with_grads:
            grads[name] = g_expert
    loss = total / n
    if not np.isfinite(loss):
        raise TrainingDivergenceError("non-finite batch loss")
    result = StepResult(loss, [d[2] for d in draws], [d[1] for d in draws])
    return result, grads


def train_step(batch, router, optims, rng, dropout=None, u_range=(0.0, 1.0)):
    """One optimizer update per expert that received samples.

    ``optims`` maps ``"low"``/``"high"`` to :class:`OptimState`. Returns a
    :class:`StepResult` (``float(result)`` is the batch loss).
    """
    result, grads = batch_loss(batch, router, rng, dropout, u_range)
    experts = router.experts()
    for name in EXPERT_ORDER:
        if name in grads:
            adam_update(experts[name], grads[name], optims[name])
    return result


@dataclass
class SamplerConfig:
    n_steps: int = 32
    guidance: object = None

    def __post_init__(self):
        check_positive_int(self.n_steps, "n_steps")
        if self.guidance not in (None, "off"):
            raise RejectedInputError("guidance is reserved and must be off")


def euler_integrate(velocity, z1, n_steps):
    """Integrate ``dz/du = velocity(z, u)`` from ``u = 1`` to ``u = 0`` with fixed steps."""
    z = np.array(z1, dtype=np.float64)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        u = (n_steps - k) / n_steps
        z = z - dt * velocity(z, u)
        if not np.all(np.isfinite(z)):
            raise SamplerDivergenceError(f"non-finite sampler state at step {k}", step_index=k)
    return z


def euler_sample(sources, router, cfg, rng, grid_shape, n_samples=1, zero_segments=(), velocity_fn=None):
    """Draw latents conditioned on ``sources``.

    Returns an array of shape ``(n_samples, F, h, w, c)``. ``zero_segments``
    forces condition segments to be dropped at inference. ``velocity_fn``
    replaces the learned field with ``f(z, u)`` (used for oracle checks).
    """
    from .dit import LatentGrid

    d_latent = router.low_noise.config.d_latent
    grid_shape = tuple(grid_shape)
    s = int(np.prod(grid_shape))
    masks = with_masks_zeroed(DropoutMasks(), zero_segments)
    z1 = rng.normal((n_samples, s, d_latent))
    if velocity_fn is None:
        seqs = {}
        for name, params in router.experts().items():
            seq = apply_masks(build_bundle(sources, params), masks).sequence
            seqs[name] = np.broadcast_to(seq, (n_samples,) + seq.shape)

        def velocity_fn(z, u):
            name = expert_name(u, router.u_threshold)
            v, _ = forward(z, np.full(n_samples, u), seqs[name], router.experts()[name], grid_shape)
            return v

    z0 = euler_integrate(velocity_fn, z1, cfg.n_steps)
    return LatentGrid(z0, grid_shape).to_array()
