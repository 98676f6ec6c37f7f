"""Fixed linear stand-in for a video VAE: pixel patches -> latent channels."""
from dataclasses import dataclass, field

import numpy as np

from .exceptions import RejectedInputError
from .tensor_core import Rng, mix_seed


@dataclass
class PixelLatentEncoder:
    patch: int = 4
    channels: int = 4
    seed: int = 0
    weight: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = Rng(mix_seed("latent-stand-in", self.seed))
        self.weight = rng.normal((self.patch * self.patch, self.channels)) / self.patch

    def grid_shape(self, frames, height, width):
        if height % self.patch or width % self.patch:
            raise RejectedInputError(f"{height}x{width} is not a multiple of patch {self.patch}")
        return frames, height // self.patch, width // self.patch

    def encode(self, pixels):
        """``(F, H, W)`` uint8 frames -> ``(F, H/p, W/p, channels)`` latents."""
        pixels = np.asarray(pixels)
        f, h, w = self.grid_shape(*pixels.shape)
        p = self.patch
        x = pixels.astype(np.float64) / 127.5 - 1.0
        patches = x.reshape(f, h, p, w, p).transpose(0, 1, 3, 2, 4).reshape(f, h, w, p * p)
        return patches @ self.weight
