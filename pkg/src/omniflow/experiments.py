"""Experiment drivers behind the CLI: training, evaluation, gradient and SP checks, ablations."""
import time
from dataclasses import dataclass, field

import numpy as np

from .conditioning import (
    DROPPABLE,
    ConditionSources,
    DropoutConfig,
    DropoutMasks,
    apply_masks,
    build_bundle,
    with_masks_zeroed,
)
from .data_pipeline import bucket_samples, mix_datasets, parse_manifest, run_cleaning
from .dit import DiTConfig, ExpertRouter, expert_name, forward, init_dit_params
from .estimators import ConditionEncoder
from .exceptions import ExhaustedDataError, RejectedInputError
from .flow import TrainingExample, batch_loss, euler_integrate, init_optim, train_step
from .seq_parallel import measure
from .synthetic import ConditionalMeanTask
from .tensor_core import Rng, finite_difference, mix_seed, relative_error

GRADCHECK_TOLERANCE = 1e-4


# --- training -------------------------------------------------------------

def make_router(model, u_threshold, seed, zero_head=True):
    root = Rng(mix_seed("router", seed))
    return ExpertRouter(init_dit_params(model, root.spawn("low"), zero_head),
                        init_dit_params(model, root.spawn("high"), zero_head), u_threshold)


def conditional_task(model, seed=0):
    return ConditionalMeanTask(d_latent=model.d_latent, d_mllm=model.d_mllm, d_txt=model.d_txt,
                               seed=seed)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]


def _log_row(step, res):
    experts = res.expert_counts()
    kept = res.kept_counts()
    return {
        "step": step,
        "loss": res.loss,
        "n_low": experts["low"],
        "n_high": experts["high"],
        "kept_mllm": kept["mllm"],
        "kept_tgt": kept["tgt"],
        "kept_edit": kept["edit"],
    }


def run_training(router, batches, n_steps, learning_rate, rng, dropout=None):
    """Train ``router`` in place on ``n_steps`` batches drawn from ``batches``."""
    optims = {k: init_optim(p, lr=learning_rate) for k, p in router.experts().items()}
    log = TrainLog()
    start = time.perf_counter()
    for step in range(n_steps):
        try:
            batch = next(batches)
        except StopIteration:
            raise ExhaustedDataError(f"data ran out after {step} steps") from None
        res = train_step(batch, router, optims, rng, dropout)
        log.rows.append(_log_row(step, res))
    log.seconds = time.perf_counter() - start
    return log


def conditional_batches(task, batch_size, rng):
    while True:
        yield task.examples(batch_size, rng)


def train_conditional(cfg, dropout=None, seed=None, n_steps=None):
    """Train on the synthetic conditional-mean task; returns ``(router, task, log)``."""
    seed = cfg.seed if seed is None else seed
    n_steps = cfg.n_steps if n_steps is None else n_steps
    task = conditional_task(cfg.model)
    router = make_router(cfg.model, cfg.u_threshold, seed)
    rng = Rng(mix_seed("train", seed))
    dropout = cfg.dropout if dropout is None else dropout
    log = run_training(router, conditional_batches(task, cfg.batch_size, rng), n_steps,
                       cfg.learning_rate, rng, dropout)
    return router, task, log


def manifest_batches(cfg, encoder=None):
    """Clean, bucket and mix a manifest into batches of :class:`TrainingExample`."""
    samples = parse_manifest(cfg.manifest)
    kept, report = run_cleaning(samples, cfg.cleaning)
    if not kept:
        raise ExhaustedDataError("no samples survive cleaning")
    encoder = encoder or ConditionEncoder(cfg.model.d_mllm, cfg.model.d_txt, cfg.selection.budget,
                                          cfg.selection.strategy, cfg.latent_patch,
                                          cfg.model.d_latent).fit()
    cache = {}

    def example(s):
        if s.id not in cache:
            cache[s.id] = encoder.examples([s])[0]
        return cache[s.id]

    mixer = mix_datasets(bucket_samples(kept), cfg.task_weights,
                         Rng(mix_seed("mix", cfg.seed)), cfg.batch_size)

    def gen():
        for batch in mixer:
            yield [example(s) for s in batch.samples]

    return gen(), report


def train_from_config(cfg):
    """Returns ``(router, log, extra)``; ``extra`` holds artifact provenance details."""
    if cfg.task == "conditional_mean":
        router, _, log = train_conditional(cfg)
        return router, log, {}
    router = make_router(cfg.model, cfg.u_threshold, cfg.seed)
    batches, report = manifest_batches(cfg)
    log = run_training(router, batches, cfg.n_steps, cfg.learning_rate,
                       Rng(mix_seed("train", cfg.seed)), cfg.dropout)
    return router, log, {"clean_report": report.to_dict()}


# --- evaluation -----------------------------------------------------------

def sample_conditions(router, task, conditions, n_samples, n_steps, seed=0, zero_segments=()):
    """Euler samples for many conditions at once: ``(C, n_samples, F, h, w, c)``."""
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    masks = with_masks_zeroed(DropoutMasks(), zero_segments)
    n_cond = len(conditions)
    seqs = {}
    for name, params in router.experts().items():
        rows = [apply_masks(build_bundle(task.sources(a), params), masks).sequence for a in conditions]
        seqs[name] = np.repeat(np.stack(rows), n_samples, axis=0)
    grid = task.grid_shape
    s = int(np.prod(grid))
    total = n_cond * n_samples
    z1 = Rng(mix_seed("eval", seed)).normal((total, s, task.d_latent))

    def velocity(z, u):
        name = expert_name(u, router.u_threshold)
        v, _ = forward(z, np.full(total, u), seqs[name], router.experts()[name], grid)
        return v

    z0 = euler_integrate(velocity, z1, n_steps)
    return z0.reshape((n_cond, n_samples) + task.latent_shape)


def conditional_errors(router, task, conditions, n_samples=128, n_steps=64, seed=0,
                       zero_segments=()):
    """Max-abs error between each condition's sample mean and its analytic target."""
    z = sample_conditions(router, task, conditions, n_samples, n_steps, seed, zero_segments)
    targets = np.stack([task.target_mean(a) for a in conditions])
    return np.abs(z.mean(axis=1) - targets).reshape(len(conditions), -1).max(axis=1)


# --- gradient check -------------------------------------------------------

def param_group(name):
    """``blocks.0.self.wq`` -> ``blocks.0.self``; ``in.w`` -> ``in``."""
    parts = name.split(".")
    if parts[0] == "blocks":
        sub = parts[2]
        return ".".join(parts[:2] + (["norm"] if sub.startswith("norm") else [sub]))
    return parts[0] if parts[0] != "adapter" else name


@dataclass
class GradcheckReport:
    groups: dict
    n_entries: int
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def worst(self):
        return max(self.groups.values(), default=0.0)

    @property
    def worst_group(self):
        return max(self.groups, key=self.groups.get) if self.groups else None

    @property
    def passed(self):
        return self.worst < self.tolerance

    def rows(self):
        return [{"group": g, "relative_error": e, "passed": e < self.tolerance}
                for g, e in sorted(self.groups.items())]


def check_gradients(loss_fn, tensors, grads, rng, top_k=4, n_random=4, step=1e-5):
    """Compare analytic ``grads`` with central differences of ``loss_fn()``.

    Per tensor, the ``top_k`` largest-magnitude analytic entries plus
    ``n_random`` random entries are checked; errors are aggregated per
    parameter group as a relative vector error. An empty ``tensors`` mapping
    passes vacuously.
    """
    analytic, numeric = {}, {}
    n = 0
    for name in sorted(tensors):
        x = tensors[name]
        g = grads[name].ravel()
        if x.size == 0:
            continue
        top = np.argsort(-np.abs(g), kind="stable")[:top_k]
        extra = rng.integers(x.size, size=n_random)
        idx = np.unique(np.concatenate([top, extra]))
        group = param_group(name)
        for flat in idx:
            pos = np.unravel_index(int(flat), x.shape)
            analytic.setdefault(group, []).append(g[flat])
            numeric.setdefault(group, []).append(finite_difference(loss_fn, x, pos, step))
            n += 1
    groups = {k: relative_error(analytic[k], numeric[k]) for k in analytic}
    return GradcheckReport(groups, n)


def gradcheck_batch(model, rng):
    """Two samples sharing condition lengths plus one with different lengths.

    All four segments are nonempty so every adapter receives gradient.
    """
    def example(n_mllm, n_txt, n_frames):
        src = ConditionSources(rng.normal((n_mllm, model.d_mllm)), rng.normal((n_txt, model.d_txt)),
                               rng.normal((n_txt + 1, model.d_txt)),
                               rng.normal((n_frames, 2, 2, model.d_latent)))
        return TrainingExample(rng.normal((2, 2, 2, model.d_latent)), src)

    return [example(3, 2, 1), example(3, 2, 1), example(2, 4, 2)]


def gradient_check(model=None, seed=0, break_backward=None, top_k=4, n_random=4):
    """Finite-difference check of both experts on a randomly initialized model.

    ``break_backward`` names a parameter tensor whose analytic gradient is
    scaled by 1.5 before comparison (negative control).
    """
    model = model or DiTConfig(n_blocks=2, d_dit=32)
    router = make_router(model, 0.5, seed, zero_head=False)
    data_rng = Rng(mix_seed("gradcheck-data", seed))
    batch = gradcheck_batch(model, data_rng)
    groups = {}
    n = 0
    # u ranges chosen so each call exercises exactly one expert
    for name, u_range in (("low", (0.05, 0.45)), ("high", (0.55, 0.95))):
        draw_seed = mix_seed("gradcheck-draws", seed, name)

        def loss_fn():
            res, _ = batch_loss(batch, router, Rng(draw_seed), DropoutConfig(), u_range, False)
            return res.loss

        _, grads = batch_loss(batch, router, Rng(draw_seed), DropoutConfig(), u_range)
        g = grads[name]
        if break_backward is not None:
            if break_backward not in g:
                raise RejectedInputError(f"unknown parameter {break_backward!r}")
            g[break_backward] = 1.5 * g[break_backward]
        tensors = router.experts()[name].tensors
        rep = check_gradients(loss_fn, tensors, g, data_rng.spawn(name), top_k, n_random)
        groups.update({f"{name}/{k}": v for k, v in rep.groups.items()})
        n += rep.n_entries
    return GradcheckReport(groups, n)


# --- sequence parallelism -------------------------------------------------

def sp_check(sweep, seed=0, corrupt=None):
    """Serial-vs-SP equivalence and communication accounting over a config sweep."""
    reports = []
    for s, lc, h, dh, p in sweep.configs():
        if s % p:
            raise RejectedInputError(f"P={p} must divide S={s}")
        reports.append(measure(s, lc, h, dh, p, seed=seed, corrupt=corrupt))
    return reports


# --- dropout ablation -----------------------------------------------------

ABLATION_COLUMNS = ("p_mllm", "p_tgt", "p_edit", "seed", "final_loss", "zeroed",
                    "mean_error", "within_tol", "error_increase")


def evaluate_zeroing(router, task, cfg, zero_segments=DROPPABLE):
    """Mean held-out error with nothing zeroed, then with each segment forced off."""
    conds = task.held_out_conditions(cfg.eval.n_conditions)
    kw = dict(n_samples=cfg.eval.n_samples, n_steps=cfg.sampler_steps, seed=cfg.seed)
    out = {"none": conditional_errors(router, task, conds, **kw)}
    for seg in zero_segments:
        out[seg] = conditional_errors(router, task, conds, zero_segments=(seg,), **kw)
    return out


def robustness_gap(errors):
    """Mean over zeroed segments of the increase in mean error versus no zeroing."""
    base = float(np.mean(errors["none"]))
    segs = [k for k in errors if k != "none"]
    return float(np.mean([np.mean(errors[k]) - base for k in segs])) if segs else 0.0


def ablate_dropout(cfg, grid=None, seeds=None, zero_segments=None):
    """Train one model per (dropout setting, seed) and measure forced-zeroing robustness.

    Returns a list of row dicts with :data:`ABLATION_COLUMNS`.
    """
    grid = cfg.ablation.grid if grid is None else grid
    zero_segments = tuple(cfg.ablation.zero_segments if zero_segments is None else zero_segments)
    with_masks_zeroed(DropoutMasks(), zero_segments)  # rejects "ref" before any training
    seeds = [cfg.seed + r for r in range(cfg.ablation.repeats)] if seeds is None else seeds
    rows = []
    for probs in grid:
        dropout = DropoutConfig(*probs, mode=cfg.dropout.mode)
        for seed in seeds:
            router, task, log = train_conditional(cfg, dropout, seed, cfg.ablation.n_steps)
            errors = evaluate_zeroing(router, task, cfg, zero_segments)
            base = float(np.mean(errors["none"]))
            final = float(np.mean(log.losses[-100:]))
            for seg, err in errors.items():
                rows.append({
                    "p_mllm": dropout.p_mllm, "p_tgt": dropout.p_tgt, "p_edit": dropout.p_edit,
                    "seed": seed, "final_loss": final, "zeroed": seg,
                    "mean_error": float(np.mean(err)),
                    "within_tol": float(np.mean(err < cfg.eval.tolerance)),
                    "error_increase": float(np.mean(err)) - base,
                })
    return rows


def gaps_by_setting(rows):
    """``{(p_mllm, p_tgt, p_edit): {seed: mean increase over zeroed segments}}``."""
    out = {}
    for r in rows:
        if r["zeroed"] == "none":
            continue
        key = (r["p_mllm"], r["p_tgt"], r["p_edit"])
        out.setdefault(key, {}).setdefault(r["seed"], []).append(r["error_increase"])
    return {k: {s: float(np.mean(v)) for s, v in d.items()} for k, d in out.items()}
