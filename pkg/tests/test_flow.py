import numpy as np
import pytest

from omniflow.conditioning import ConditionSources, DropoutConfig
from omniflow.dit import DiTConfig, ExpertRouter, init_dit_params
from omniflow.exceptions import RejectedInputError, SamplerDivergenceError, TrainingDivergenceError
from omniflow.flow import (
    SamplerConfig,
    TrainingExample,
    batch_loss,
    euler_integrate,
    euler_sample,
    flow_loss,
    flow_loss_grad,
    init_optim,
    sample_path,
    train_step,
)
from omniflow.tensor_core import Rng, finite_difference, relative_error

CFG = DiTConfig(n_blocks=2, d_dit=16, n_heads=2, d_latent=2, d_mllm=4, d_txt=4)


def sources(rng, ref_frames=1):
    return ConditionSources(rng.normal((2, 4)), rng.normal((3, 4)), rng.normal((1, 4)),
                            rng.normal((ref_frames, 1, 2, 2)))


def router(seed=0, zero_head=True):
    root = Rng(seed)
    return ExpertRouter(init_dit_params(CFG, root.spawn("low"), zero_head),
                        init_dit_params(CFG, root.spawn("high"), zero_head))


def batch(rng, n=4):
    return [TrainingExample(rng.normal((1, 2, 2, 2)), sources(rng)) for _ in range(n)]


def test_sample_path_examples():
    z, eps = np.array([2.0]), np.array([0.0])
    assert np.array_equal(sample_path(z, eps, 0.0).z_u, z)
    assert np.array_equal(sample_path(z, eps, 1.0).z_u, eps)
    fs = sample_path(z, eps, 0.5)
    assert fs.z_u.tolist() == [1.0] and fs.v_star.tolist() == [-2.0]
    with pytest.raises(RejectedInputError):
        sample_path(z, eps, 1.5)
    with pytest.raises(RejectedInputError):
        sample_path(z, np.zeros(2), 0.5)


def test_flow_loss_examples_and_gradient():
    v = np.array([1.0, 1.0])
    assert flow_loss(v, v) == 0.0
    assert flow_loss(np.zeros(2), v) == 1.0
    pred = Rng(0).normal(5)
    target = Rng(1).normal(5)
    num = np.array([finite_difference(lambda: flow_loss(pred, target), pred, (i,)) for i in range(5)])
    assert relative_error(flow_loss_grad(pred, target), num) < 1e-8
    with pytest.raises(TrainingDivergenceError):
        flow_loss(np.array([np.nan]), np.array([0.0]))


def test_zero_head_first_batch_loss_equals_mean_target_norm():
    rng = Rng(3)
    b = batch(rng, 6)
    res, _ = batch_loss(b, router(), Rng(9), with_grads=False)
    # replay the same draws to build the analytic baseline
    replay = Rng(9)
    norms = []
    for ex in b:
        u = replay.uniform()
        eps = replay.normal(ex.latent.shape)
        replay.uniform((3,))
        norms.append(np.mean((eps - ex.latent) ** 2))
        assert 0.0 <= u <= 1.0
    assert relative_error(res.loss, np.mean(norms)) < 1e-10


def test_zero_learning_rate_keeps_parameters():
    r = router(zero_head=False)
    before = {k: {n: t.copy() for n, t in p.tensors.items()} for k, p in r.experts().items()}
    optims = {k: init_optim(p, lr=0.0) for k, p in r.experts().items()}
    train_step(batch(Rng(1)), r, optims, Rng(2))
    for k, p in r.experts().items():
        for n, t in p.tensors.items():
            assert t.tobytes() == before[k][n].tobytes()


def test_only_routed_expert_updates():
    r = router(zero_head=False)
    low_before = r.low_noise.copy()
    high_before = r.high_noise.copy()
    optims = {k: init_optim(p) for k, p in r.experts().items()}
    res = train_step(batch(Rng(1)), r, optims, Rng(2), u_range=(0.6, 1.0))
    assert res.experts == ["high"] * 4
    assert all(np.array_equal(r.low_noise[n], low_before[n]) for n in r.low_noise.names())
    assert any(not np.array_equal(r.high_noise[n], high_before[n]) for n in r.high_noise.names())


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_train_step_extreme_dropout(p):
    r = router()
    optims = {k: init_optim(v) for k, v in r.experts().items()}
    res = train_step(batch(Rng(1)), r, optims, Rng(2), DropoutConfig(p, p, p))
    assert np.isfinite(float(res))
    assert res.kept_counts() == {s: (4 if p == 0 else 0) for s in ("mllm", "tgt", "edit")}


def test_mixed_condition_lengths_in_one_batch():
    rng = Rng(5)
    b = batch(rng, 3) + [TrainingExample(rng.normal((1, 2, 2, 2)), sources(rng, ref_frames=0))]
    r = router(zero_head=False)
    optims = {k: init_optim(v) for k, v in r.experts().items()}
    assert np.isfinite(float(train_step(b, r, optims, Rng(6))))
    with pytest.raises(RejectedInputError):
        train_step(b + [TrainingExample(rng.normal((1, 1, 2, 2)), sources(rng))], r, optims, Rng(6))
    with pytest.raises(RejectedInputError):
        batch_loss([], r, Rng(0))


def test_single_sample_overfit():
    rng = Rng(11)
    ex = batch(rng, 1)
    r = router(seed=1)
    optims = {k: init_optim(v, lr=1e-3) for k, v in r.experts().items()}
    # reseeding every step replays the same (u, eps) draw: one fixed training pair
    losses = [float(train_step(ex, r, optims, Rng(12))) for _ in range(500)]
    assert losses[-1] < 0.01 * losses[0]


def test_euler_exact_for_constant_field():
    z0 = Rng(0).normal((3, 4, 2))
    eps = Rng(1).normal((3, 4, 2))
    out = euler_integrate(lambda z, u: eps - z0, eps, 1)
    np.testing.assert_allclose(out, z0, atol=1e-15)
    np.testing.assert_allclose(euler_integrate(lambda z, u: eps - z0, eps, 7), z0, atol=1e-14)


def test_euler_divergence_reports_step():
    with pytest.raises(SamplerDivergenceError) as exc:
        euler_integrate(lambda z, u: np.full_like(z, np.inf), np.zeros(2), 4)
    assert exc.value.step_index == 0


def test_euler_sample_shapes_and_zeroing():
    r = router(zero_head=False)
    src = sources(Rng(0))
    one = euler_sample(src, r, SamplerConfig(1), Rng(1), (1, 2, 2), n_samples=3)
    many = euler_sample(src, r, SamplerConfig(64), Rng(1), (1, 2, 2), n_samples=3)
    assert one.shape == many.shape == (3, 1, 2, 2, 2)
    assert np.all(np.isfinite(one)) and np.all(np.isfinite(many))
    zeroed = euler_sample(src, r, SamplerConfig(8), Rng(1), (1, 2, 2), zero_segments=("tgt",))
    plain = euler_sample(src, r, SamplerConfig(8), Rng(1), (1, 2, 2))
    assert not np.array_equal(zeroed, plain)
    with pytest.raises(RejectedInputError):
        euler_sample(src, r, SamplerConfig(8), Rng(1), (1, 2, 2), zero_segments=("ref",))


def test_sampler_config_validation():
    with pytest.raises(RejectedInputError):
        SamplerConfig(0)
    with pytest.raises(RejectedInputError):
        SamplerConfig(4, guidance=2.0)


def test_velocity_override_recovers_target():
    z0 = np.ones((1, 1, 2, 2, 2))
    tokens = z0.reshape(1, 4, 2)
    out = euler_sample(None, router(), SamplerConfig(5), Rng(0), (1, 2, 2),
                       velocity_fn=lambda z, u: (z - tokens) / max(u, 1e-12))
    np.testing.assert_allclose(out, z0, atol=1e-12)
