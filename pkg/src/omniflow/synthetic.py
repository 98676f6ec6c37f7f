"""Synthetic conditional-mean task for training checks.

A condition vector ``a`` in ``[-1, 1]^k`` is written redundantly into the
MLLM, caption and instruction segments (one informative token plus one fixed
filler token each). The target latent is ``A a + noise_std * n`` for a fixed
matrix ``A``, so the per-condition mean of generated latents has the closed
form ``A a``.
"""
from dataclasses import dataclass, field

import numpy as np

from .conditioning import ConditionSources
from .flow import TrainingExample
from .tensor_core import Rng, hash_embedding, mix_seed


@dataclass
class ConditionalMeanTask:
    cond_dim: int = 2
    grid_shape: tuple = (1, 2, 2)
    d_latent: int = 2
    d_mllm: int = 16
    d_txt: int = 16
    noise_std: float = 0.1
    mean_scale: float = 0.6
    seed: int = 0
    _weights: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.grid_shape = tuple(self.grid_shape)
        rng = Rng(mix_seed("conditional-mean-task", self.seed))
        n_out = int(np.prod(self.grid_shape)) * self.d_latent
        self._weights = {
            "A": self.mean_scale * rng.normal((n_out, self.cond_dim)),
            "mllm": rng.uniform((self.d_mllm, self.cond_dim)) - 0.5,
            "tgt": rng.uniform((self.d_txt, self.cond_dim)) - 0.5,
            "edit": rng.uniform((self.d_txt, self.cond_dim)) - 0.5,
        }

    @property
    def latent_shape(self):
        return self.grid_shape + (self.d_latent,)

    def target_mean(self, a):
        return (self._weights["A"] @ np.asarray(a, dtype=np.float64)).reshape(self.latent_shape)

    def sources(self, a):
        a = np.asarray(a, dtype=np.float64)

        def segment(name, width):
            info = self._weights[name] @ a
            return np.stack([hash_embedding(f"filler|{name}", width), info])

        return ConditionSources(
            h_mllm=segment("mllm", self.d_mllm),
            tgt=segment("tgt", self.d_txt),
            edit=segment("edit", self.d_txt),
            ref_latents=np.zeros((0, 1, 1, self.d_latent)),
        )

    def draw_conditions(self, n, rng):
        return 2.0 * rng.uniform((n, self.cond_dim)) - 1.0

    def examples(self, n, rng):
        out = []
        for a in self.draw_conditions(n, rng):
            z = self.target_mean(a) + self.noise_std * rng.normal(self.latent_shape)
            out.append(TrainingExample(z, self.sources(a)))
        return out

    def held_out_conditions(self, n=20, seed=12345):
        return self.draw_conditions(n, Rng(mix_seed("held-out", self.seed, seed)))
