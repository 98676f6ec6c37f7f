import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from omniflow.checkpoint import load_checkpoint, save_checkpoint
from omniflow.config import ExperimentConfig, apply_env
from omniflow.data_pipeline import generate_corpus
from omniflow.dit import DiTConfig
from omniflow.estimators import ConditionEncoder, FlowMatchingGenerator
from omniflow.exceptions import RejectedInputError
from omniflow.experiments import conditional_task, make_router
from omniflow.latents import PixelLatentEncoder
from omniflow.synthetic import ConditionalMeanTask
from omniflow.tensor_core import Rng

TINY = DiTConfig(n_blocks=1, d_dit=8, n_heads=2, d_latent=2, d_mllm=16, d_txt=16)


# --- latents / synthetic task ---------------------------------------------------

def test_latent_encoder_shapes_and_determinism():
    enc = PixelLatentEncoder(patch=4, channels=3)
    px = np.arange(2 * 8 * 12, dtype=np.uint8).reshape(2, 8, 12)
    z = enc.encode(px)
    assert z.shape == (2, 2, 3, 3)
    np.testing.assert_array_equal(z, PixelLatentEncoder(patch=4, channels=3).encode(px))
    with pytest.raises(RejectedInputError):
        enc.encode(np.zeros((1, 6, 8), dtype=np.uint8))


def test_conditional_task_mean_is_linear():
    task = ConditionalMeanTask()
    a, b = np.array([0.5, -0.2]), np.array([-0.3, 0.9])
    np.testing.assert_allclose(task.target_mean(a + b), task.target_mean(a) + task.target_mean(b))
    ex = task.examples(4, Rng(1))
    assert all(e.latent.shape == task.latent_shape for e in ex)
    assert ex[0].sources.ref_latents.shape[0] == 0
    held = task.held_out_conditions(20)
    assert held.shape == (20, 2) and np.all(np.abs(held) <= 1)
    np.testing.assert_array_equal(held, task.held_out_conditions(20))


# --- estimators ---------------------------------------------------------------

def test_condition_encoder_params_and_transform():
    enc = ConditionEncoder(budget=8)
    assert enc.get_params()["budget"] == 8
    assert clone(enc).get_params() == enc.get_params()
    samples, _ = generate_corpus(6, seed=0)
    with pytest.raises(NotFittedError):
        enc.transform(samples)
    out = enc.fit().transform(samples)
    for s, src in zip(samples, out):
        assert src.h_mllm.shape[0] <= 8 and src.h_mllm.shape[1] == 16
        if s.source is None:
            assert src.edit.shape[0] == 0 and src.ref_latents.shape[0] == 0
        else:
            assert src.edit.shape[0] > 0
            assert src.ref_latents.shape == enc.encode_target(s).shape
    ex = enc.examples(samples)
    assert ex[0].latent.shape == enc.encode_target(samples[0]).shape


def test_generator_fit_sample_and_score():
    task = conditional_task(TINY)
    rng = Rng(3)
    conds = task.draw_conditions(8, rng)
    X = [task.sources(a) for a in conds]
    y = [task.target_mean(a) for a in conds]
    gen = FlowMatchingGenerator(model=TINY, n_steps=5, batch_size=4, sampler_steps=4)
    assert clone(gen).get_params()["n_steps"] == 5
    with pytest.raises(NotFittedError):
        gen.sample(X[0], task.grid_shape)
    gen.fit(X, y)
    assert len(gen.loss_curve_) == 5 and np.all(np.isfinite(gen.loss_curve_))
    s = gen.sample(X[0], task.grid_shape, n_samples=3)
    assert s.shape == (3,) + task.latent_shape
    assert gen.predict(X[:2], task.grid_shape, 2).shape == (2,) + task.latent_shape
    assert np.isfinite(gen.score(X[:2], y[:2], 2))
    again = FlowMatchingGenerator(model=TINY, n_steps=5, batch_size=4, sampler_steps=4).fit(X, y)
    assert again.loss_curve_ == gen.loss_curve_
    with pytest.raises(RejectedInputError):
        gen.fit(X, y[:3])


def test_generator_fit_stream():
    task = conditional_task(TINY)
    rng = Rng(4)
    gen = FlowMatchingGenerator(model=TINY, n_steps=3).fit_stream(task.examples(2, rng) for _ in range(3))
    assert len(gen.step_results_) == 3


# --- config ---------------------------------------------------------------------

def test_config_round_trip_and_nested():
    cfg = ExperimentConfig.from_dict({"seed": 3, "model": {"n_blocks": 1}, "dropout": {"p_tgt": 0.2}})
    assert cfg.seed == 3 and cfg.model.n_blocks == 1 and cfg.dropout.p_tgt == 0.2
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again.to_json() == cfg.to_json()


@pytest.mark.parametrize("bad", [
    {"sed": 1},
    {"model": {"width": 3}},
    {"task": "video"},
    {"u_threshold": 1.0},
    {"task_weights": {"t2x": 1.0}},
    {"task": "manifest"},
    {"model": 4},
])
def test_config_rejects(bad):
    with pytest.raises(RejectedInputError):
        ExperimentConfig.from_dict(bad)


def test_env_seed_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1}))
    assert ExperimentConfig.from_file(path, env={}).seed == 1
    assert ExperimentConfig.from_file(path, env={"OMNIFLOW_SEED": "9"}).seed == 9
    with pytest.raises(RejectedInputError):
        apply_env({}, {"OMNIFLOW_SEED": "nine"})


def test_sp_sweep_enumerates_grid():
    cfg = ExperimentConfig()
    assert len(list(cfg.sp_sweep.configs())) == 4 * 2 * 2
    assert (16, 24, 4, 8, 1) in set(cfg.sp_sweep.configs())


# --- checkpoint -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    router = make_router(TINY, 0.4, seed=2, zero_head=False)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, router, {"note": "x"})
    loaded, header = load_checkpoint(path)
    assert header["extra"] == {"note": "x"} and loaded.u_threshold == 0.4
    for name in router.low_noise.names():
        assert loaded.low_noise[name].tobytes() == router.low_noise[name].tobytes()
        assert loaded.high_noise[name].tobytes() == router.high_noise[name].tobytes()


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, make_router(TINY, 0.5, seed=0), None)
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"X" + raw[1:])
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    (tmp_path / "long.bin").write_bytes(raw + b"\0")
    for name in ("bad.bin", "short.bin", "long.bin"):
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / name)
