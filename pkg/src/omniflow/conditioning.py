"""Unified conditioning sequence: token selection, adapter projections, concatenation, dropout.

The four condition sources are projected to the transformer width and
concatenated in the fixed order ``[mllm; tgt; edit; ref]``. The result serves
as the key/value sequence of every cross-attention layer. Condition dropout
masks the first three segments; the source reference is never dropped.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import check_positive_int, check_probability, check_same_width, check_tensor
from .exceptions import RejectedInputError
from .tensor_core import hash_embedding, linear_forward

SEGMENTS = ("mllm", "tgt", "edit", "ref")
DROPPABLE = ("mllm", "tgt", "edit")
SELECTION_STRATEGIES = ("keep_first", "keep_last", "uniform_visual")
DROPOUT_MODES = ("zero", "remove")


@dataclass
class TextEmbedding:
    tokens: np.ndarray

    @property
    def length(self):
        return self.tokens.shape[0]


def encode_text_stub(text, d_txt):
    """Per-word hash embedding standing in for a frozen text encoder."""
    check_positive_int(d_txt, "d_txt")
    words = text.split()
    rows = [hash_embedding(f"text|{w}", d_txt) for w in words]
    return TextEmbedding(np.array(rows, dtype=np.float64).reshape(len(words), d_txt))


def _uniform_indices(count, keep):
    """``keep`` evenly spaced indices out of ``range(count)``."""
    if keep >= count:
        return np.arange(count)
    return (np.arange(keep) * count) // keep


def select_tokens(h, budget, strategy="keep_first", text_count=0):
    """Reduce a token sequence to at most ``budget`` rows.

    ``uniform_visual`` keeps every text token (assumed to lead the sequence)
    and fills the remaining budget with evenly spaced visual tokens.
    """
    h = check_tensor(h, ndim=2, name="h")
    check_positive_int(budget, "budget", allow_zero=True)
    if strategy not in SELECTION_STRATEGIES:
        raise RejectedInputError(f"unknown selection strategy {strategy!r}")
    n = h.shape[0]
    if not 0 <= text_count <= n:
        raise RejectedInputError(f"text_count={text_count} outside [0, {n}]")
    if strategy == "uniform_visual" and budget < text_count:
        raise RejectedInputError(
            f"budget {budget} cannot hold the {text_count} text tokens"
        )
    if n <= budget:
        return h.copy()
    if strategy == "keep_first":
        return h[:budget].copy()
    if strategy == "keep_last":
        return h[n - budget:].copy() if budget else h[:0].copy()
    visual = _uniform_indices(n - text_count, budget - text_count) + text_count
    idx = np.concatenate([np.arange(text_count), visual])
    return h[idx].copy()


def project_mllm(h, w):
    h = check_tensor(h, ndim=2, name="h")
    return linear_forward(h, w)


def encode_reference(latents, w):
    """Flatten an ``F x h x w x c`` latent grid into tokens and project each to ``d_dit``."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 4:
        raise RejectedInputError(f"reference latents must be F x h x w x c, got {latents.shape}")
    tokens = latents.reshape(-1, latents.shape[-1])
    return linear_forward(tokens, w)


@dataclass
class ConditionBundle:
    c_mllm: np.ndarray
    c_tgt: np.ndarray
    c_edit: np.ndarray
    c_ref: np.ndarray
    segment_map: list = field(init=False)

    def __post_init__(self):
        offset = 0
        self.segment_map = []
        for name in SEGMENTS:
            n = self.segment(name).shape[0]
            self.segment_map.append((name, offset, n))
            offset += n

    def segment(self, name):
        return getattr(self, "c_" + name)

    @property
    def width(self):
        return self.c_mllm.shape[1]

    @property
    def length(self):
        return sum(n for _, _, n in self.segment_map)

    @property
    def sequence(self):
        return np.concatenate([self.segment(s) for s in SEGMENTS], axis=0)

    def slices(self):
        return {name: slice(off, off + n) for name, off, n in self.segment_map}


def build_condition_sequence(c_mllm, c_tgt, c_edit, c_ref):
    raw = (c_mllm, c_tgt, c_edit, c_ref)
    segments = [check_tensor(c, ndim=2, name=f"c_{s}") for c, s in zip(raw, SEGMENTS)]
    check_same_width(segments, "condition segments")
    return ConditionBundle(*segments)


@dataclass
class DropoutConfig:
    p_mllm: float = 0.0
    p_tgt: float = 0.0
    p_edit: float = 0.0
    mode: str = "zero"

    def __post_init__(self):
        for name in DROPPABLE:
            check_probability(getattr(self, "p_" + name), "p_" + name)
        if self.mode not in DROPOUT_MODES:
            raise RejectedInputError(f"dropout mode must be one of {DROPOUT_MODES}")


@dataclass(frozen=True)
class DropoutMasks:
    m_mllm: int = 1
    m_tgt: int = 1
    m_edit: int = 1

    def get(self, name):
        return 1 if name == "ref" else getattr(self, "m_" + name)

    def as_dict(self):
        return {s: self.get(s) for s in DROPPABLE}


def draw_dropout_masks(cfg, rng):
    """Independent keep/drop draws in the order mllm, tgt, edit."""
    keep = {}
    for name in DROPPABLE:
        keep[name] = int(rng.uniform() >= getattr(cfg, "p_" + name))
    return DropoutMasks(keep["mllm"], keep["tgt"], keep["edit"])


def apply_masks(bundle, masks, mode="zero"):
    parts = {}
    for name in SEGMENTS:
        seg = bundle.segment(name)
        if masks.get(name):
            parts[name] = seg
        elif mode == "remove":
            parts[name] = seg[:0]
        else:
            parts[name] = seg * 0.0
    return ConditionBundle(parts["mllm"], parts["tgt"], parts["edit"], parts["ref"])


def apply_condition_dropout(bundle, cfg, rng):
    masks = draw_dropout_masks(cfg, rng)
    return apply_masks(bundle, masks, cfg.mode), masks


@dataclass
class ConditionSources:
    """Unprojected condition inputs for one sample.

    ``ref_latents`` has shape ``F x h x w x c`` with ``F = 0`` when there is no
    source visual input.
    """

    h_mllm: np.ndarray
    tgt: np.ndarray
    edit: np.ndarray
    ref_latents: np.ndarray

    def lengths(self):
        ref = int(np.prod(self.ref_latents.shape[:3]))
        return (self.h_mllm.shape[0], self.tgt.shape[0], self.edit.shape[0], ref)


def init_adapter_params(d_mllm, d_txt, d_latent, d_dit, rng):
    def glorot(fan_in):
        return rng.normal((fan_in, d_dit)) / math.sqrt(fan_in)

    return {
        "adapter.mllm": glorot(d_mllm),
        "adapter.tgt": glorot(d_txt),
        "adapter.edit": glorot(d_txt),
        "adapter.ref": glorot(d_latent),
    }


def build_bundle(sources, params):
    """Project raw condition sources with an expert's adapter weights."""
    return ConditionBundle(
        project_mllm(sources.h_mllm, params["adapter.mllm"]),
        linear_forward(sources.tgt, params["adapter.tgt"]),
        linear_forward(sources.edit, params["adapter.edit"]),
        encode_reference(sources.ref_latents, params["adapter.ref"]),
    )


def bundle_backward(d_seq, sources, masks, dropped_bundle, grads):
    """Accumulate adapter weight gradients from d(loss)/d(masked sequence) of one sample."""
    sl = dropped_bundle.slices()
    inputs = {
        "mllm": sources.h_mllm,
        "tgt": sources.tgt,
        "edit": sources.edit,
        "ref": sources.ref_latents.reshape(-1, sources.ref_latents.shape[-1]),
    }
    for name in SEGMENTS:
        x = inputs[name]
        if not masks.get(name) or x.shape[0] == 0:
            continue
        grads["adapter." + name] += x.T @ d_seq[sl[name]]


def with_masks_zeroed(masks, names):
    """Return ``masks`` with the given segments forced to dropped (ref is refused)."""
    names = set(names)
    if "ref" in names:
        raise RejectedInputError("the source reference segment cannot be dropped")
    unknown = names - set(DROPPABLE)
    if unknown:
        raise RejectedInputError(f"unknown segments {sorted(unknown)}")
    return replace(masks, **{"m_" + n: 0 for n in names})
