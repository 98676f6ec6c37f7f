import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omniflow.conditioning import build_condition_sequence
from omniflow.dit import (
    DiTConfig,
    ExpertRouter,
    LatentGrid,
    _mha_forward,
    backward,
    dit_block_forward,
    expert_name,
    forward,
    init_dit_params,
    model_forward,
    route_expert,
    time_embed,
)
from omniflow.exceptions import RejectedInputError, TrainingDivergenceError
from omniflow.experiments import check_gradients, gradient_check, param_group
from omniflow.seq_parallel import WorkerFabric
from omniflow.tensor_core import Rng, finite_difference, relative_error

SMALL = DiTConfig(n_blocks=1, d_dit=8, n_heads=2, d_latent=2, d_mllm=4, d_txt=4)


def test_time_embed_values():
    e0 = time_embed(0.0, 8)
    np.testing.assert_array_equal(e0, [0, 1, 0, 1, 0, 1, 0, 1])
    assert np.linalg.norm(time_embed(0.1, 8) - time_embed(0.9, 8)) > 0
    assert np.array_equal(time_embed(0.3, 8), time_embed(0.3, 8))
    assert time_embed(np.array([0.1, 0.2]), 8).shape == (2, 8)
    with pytest.raises(RejectedInputError):
        time_embed(1.5, 8)


def test_zero_weight_block_is_identity():
    params = init_dit_params(SMALL, Rng(0))
    for k in params.tensors:
        if k.startswith("blocks."):
            params.tensors[k] = np.zeros_like(params.tensors[k])
    x = LatentGrid(Rng(1).normal((4, 8)), (1, 2, 2))
    c = Rng(2).normal((3, 8))
    np.testing.assert_array_equal(dit_block_forward(x, c, params).tokens, x.tokens)


def test_empty_versus_zero_conditions():
    params = init_dit_params(SMALL, Rng(0))
    x = LatentGrid(Rng(1).normal((4, 8)), (1, 2, 2))
    a = dit_block_forward(x, np.zeros((0, 8)), params)
    b = dit_block_forward(x, np.zeros((5, 8)), params)
    np.testing.assert_allclose(a.tokens, b.tokens, atol=1e-12)


def test_single_condition_token_cross_attention():
    params = init_dit_params(SMALL, Rng(3)).tensors
    xq = Rng(4).normal((1, 1, 8))
    c = Rng(5).normal((1, 1, 8))
    out, _ = _mha_forward(xq, c, params, "blocks.0.cross", 2)
    v = c @ params["blocks.0.cross.wv"] + params["blocks.0.cross.bv"]
    expected = v @ params["blocks.0.cross.wo"] + params["blocks.0.cross.bo"]
    np.testing.assert_allclose(out, expected, atol=1e-13)


def test_zero_head_gives_zero_velocity_and_shape():
    cfg = DiTConfig(d_latent=3)
    params = init_dit_params(cfg, Rng(0))
    z = Rng(1).normal((2, 2, 2, 3))
    c = Rng(2).normal((5, cfg.d_dit))
    v = model_forward(z, 0.4, c, params)
    assert v.shape == (8, 3) and np.all(v == 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 4), st.integers(1, 3))
def test_output_shape_contract(f, h, w, lc, batch):
    cfg = DiTConfig(n_blocks=1, d_dit=8, n_heads=2, d_latent=3)
    params = init_dit_params(cfg, Rng(f * 100 + h * 10 + w), zero_head=False)
    x = Rng(1).normal((batch, f * h * w, 3))
    v, _ = forward(x, np.full(batch, 0.5), Rng(2).normal((batch, lc, 8)), params, (f, h, w))
    assert v.shape == x.shape and np.all(np.isfinite(v))


def test_full_model_single_weight_gradient():
    cfg = DiTConfig(n_blocks=2, d_dit=16, n_heads=2, d_latent=2)
    params = init_dit_params(cfg, Rng(0), zero_head=False)
    r = Rng(1)
    x, c = r.normal((2, 4, 2)), r.normal((2, 3, 16))
    u = np.array([0.2, 0.7])
    dv = r.normal((2, 4, 2))
    _, cache = forward(x, u, c, params, (1, 2, 2))
    grads, dc = backward(dv, cache, params)

    def loss():
        return float(np.sum(forward(x, u, c, params, (1, 2, 2))[0] * dv))

    for name, idx in (("blocks.0.self.wq", (1, 2)), ("blocks.1.cross.wv", (0, 3)),
                      ("blocks.0.mlp.w1", (4, 5)), ("time.w", (2, 2)), ("pos.h", (1, 0))):
        num = finite_difference(loss, params.tensors[name], idx)
        assert relative_error(grads[name][idx], num) < 1e-6, name
    num = finite_difference(loss, c, (1, 2, 5))
    assert relative_error(dc[1, 2, 5], num) < 1e-6


def test_gradcheck_all_groups_pass():
    rep = gradient_check(DiTConfig(n_blocks=1, d_dit=8, n_heads=2, d_latent=2, d_mllm=4, d_txt=4),
                         top_k=2, n_random=2)
    assert rep.passed and rep.worst < 1e-6
    assert any(g.endswith("adapter.ref") for g in rep.groups)


def test_gradcheck_empty_and_broken():
    rep = check_gradients(lambda: 0.0, {}, {}, Rng(0))
    assert rep.passed and rep.n_entries == 0 and rep.worst_group is None
    x = np.array([1.0, 2.0])
    rep = check_gradients(lambda: float(np.sum(x ** 2)), {"in.w": x}, {"in.w": 2 * x}, Rng(0))
    assert rep.passed and rep.worst < 1e-8
    rep = check_gradients(lambda: float(np.sum(x ** 2)), {"in.w": x}, {"in.w": 3 * x}, Rng(0))
    assert not rep.passed and rep.worst_group == "in"


def test_param_group_names():
    assert param_group("blocks.0.self.wq") == "blocks.0.self"
    assert param_group("blocks.1.norm2.g") == "blocks.1.norm"
    assert param_group("adapter.ref") == "adapter.ref"
    assert param_group("in.w") == "in"


def test_routing_rule():
    cfg = SMALL
    router = ExpertRouter(init_dit_params(cfg, Rng(0)), init_dit_params(cfg, Rng(1)), 0.5)
    assert route_expert(0.9, router) is router.high_noise
    assert route_expert(0.5, router) is router.low_noise
    assert route_expert(0.0, router) is router.low_noise
    assert expert_name(1.0, 0.5) == "high"
    with pytest.raises(RejectedInputError):
        ExpertRouter(router.low_noise, router.high_noise, 1.0)
    with pytest.raises(RejectedInputError):
        expert_name(-0.1, 0.5)


def test_experts_are_independent_parameter_sets():
    router = ExpertRouter(init_dit_params(SMALL, Rng(0)), init_dit_params(SMALL, Rng(1)))
    assert set(router.low_noise.names()) == set(router.high_noise.names())
    assert not np.array_equal(router.low_noise["in.w"], router.high_noise["in.w"])


def test_config_and_grid_validation():
    with pytest.raises(RejectedInputError):
        DiTConfig(d_dit=30, n_heads=4)
    params = init_dit_params(SMALL, Rng(0))
    with pytest.raises(RejectedInputError):
        forward(np.zeros((1, 4, 2)), np.zeros(1), np.zeros((1, 1, 8)), params, (1, 2, 3))
    with pytest.raises(RejectedInputError):
        forward(np.zeros((1, 4, 2)), np.zeros(1), np.zeros((1, 1, 7)), params, (1, 2, 2))
    with pytest.raises(RejectedInputError):
        forward(np.zeros((1, 4, 2)), np.zeros(1), np.zeros((1, 1, 8)), params, (1, 17, 1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_block():
    params = init_dit_params(SMALL, Rng(0))
    params.tensors["blocks.0.mlp.w2"][:] = np.inf
    with pytest.raises(TrainingDivergenceError) as exc:
        forward(Rng(1).normal((1, 4, 2)), np.array([0.3]), np.zeros((1, 1, 8)), params, (1, 2, 2))
    assert exc.value.block_index == 0


def test_sequence_parallel_forward_matches_serial():
    cfg = DiTConfig(n_blocks=2, d_dit=16, n_heads=4, d_latent=2)
    params = init_dit_params(cfg, Rng(0), zero_head=False)
    r = Rng(1)
    x, c = r.normal((1, 8, 2)), r.normal((1, 5, 16))
    serial, _ = forward(x, np.array([0.6]), c, params, (2, 2, 2))
    for p in (2, 4):
        sp, _ = forward(x, np.array([0.6]), c, params, (2, 2, 2), fabric=WorkerFabric(p))
        np.testing.assert_allclose(sp, serial, atol=1e-12)


def test_bundle_input_accepted():
    params = init_dit_params(SMALL, Rng(0), zero_head=False)
    r = Rng(2)
    b = build_condition_sequence(r.normal((1, 8)), r.normal((2, 8)), np.zeros((0, 8)), np.zeros((0, 8)))
    v1 = model_forward(LatentGrid(r.normal((4, 2)), (1, 2, 2)), 0.5, b, params)
    assert v1.shape == (4, 2)
