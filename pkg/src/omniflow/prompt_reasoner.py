"""Editing prompt reasoner: instruction + source -> target caption and interaction tokens.

The production system runs a frozen multimodal LLM here. This module defines
the interface and ships :class:`MockPromptReasoner`, a deterministic stand-in
driven by a JSON rewrite-rule table over synthetic scene tags.
"""
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol

import numpy as np

from ._validation import check_positive_int
from .exceptions import RejectedInputError
from .tensor_core import hash_embedding

MODALITIES = ("none", "image", "video")
EDIT_CATEGORIES = (
    "local_add",
    "local_remove",
    "local_replace",
    "global_edit",
    "change_attribute",
    "complex_edit",
)
CATEGORIES = EDIT_CATEGORIES + ("generation",)
LOCAL_CATEGORIES = ("local_add", "local_remove", "local_replace")

VISUAL_TOKENS_PER_FRAME = 4
EMPTY_SCENE = "an empty scene"
_CAPTION_PREFIXES = ("a video of ", "an image of ")
_STOPWORDS = frozenset({"a", "an", "the", "of", "and", "with", "in", "on", "is", "are"})


@dataclass(frozen=True)
class SourceDescriptor:
    id: str
    modality: str = "none"
    frames: int = 0
    height: int = 0
    width: int = 0
    content_tags: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "content_tags", tuple(self.content_tags))
        if self.modality not in MODALITIES:
            raise RejectedInputError(f"unknown modality {self.modality!r}")
        expected = {"none": self.frames == 0, "image": self.frames == 1, "video": self.frames >= 1}
        if not expected[self.modality]:
            raise RejectedInputError(
                f"frames={self.frames} is inconsistent with modality {self.modality!r}"
            )

    @classmethod
    def empty(cls):
        return cls(id="", modality="none")


@dataclass(frozen=True)
class EditInstruction:
    text: str
    category: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise RejectedInputError("instruction text must be nonempty")


@dataclass(frozen=True)
class TargetCaption:
    text: str

    def __post_init__(self):
        if not self.text:
            raise RejectedInputError("target caption must be nonempty")


@dataclass
class InteractionFeatures:
    tokens: np.ndarray
    text_token_count: int
    visual_token_count: int = 0

    @property
    def length(self):
        return self.tokens.shape[0]


def load_rule_table(path=None):
    if path is None:
        text = resources.files("omniflow.data").joinpath("rewrite_rules.json").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return json.loads(text)


def tag_base(tag):
    """Object name a tag refers to (``"red-car"`` -> ``"car"``); None for style tags."""
    if tag.startswith("style:"):
        return None
    return tag.rsplit("-", 1)[-1]


def render_caption(tags, modality="video"):
    body = " and ".join(tags) if tags else EMPTY_SCENE
    prefix = "an image of " if modality == "image" else "a video of "
    return prefix + body


def caption_tags(text):
    """Invert :func:`render_caption`; free-form captions fall back to content words."""
    text = text.strip().lower()
    for prefix in _CAPTION_PREFIXES:
        if text.startswith(prefix):
            body = text[len(prefix):]
            if body == EMPTY_SCENE:
                return []
            return [t.strip() for t in body.split(" and ") if t.strip()]
    return [w for w in text.split() if w not in _STOPWORDS]


class PromptReasoner(Protocol):
    def target_caption(self, src: SourceDescriptor, edit: EditInstruction) -> TargetCaption: ...

    def interaction_features(
        self, src: SourceDescriptor, edit: EditInstruction, d_mllm: int
    ) -> InteractionFeatures: ...


@dataclass
class MockPromptReasoner:
    """Rule-table reasoner; a pure function of its inputs."""

    rules: dict = field(default_factory=load_rule_table)
    visual_tokens_per_frame: int = VISUAL_TOKENS_PER_FRAME

    def _match(self, category, text):
        rule = self.rules[category]
        m = re.match(rule["pattern"], text.strip().lower())
        if m is None:
            raise RejectedInputError(f"instruction {text!r} does not parse as {category}")
        return rule, m

    def _apply_one(self, category, text, tags):
        rule, m = self._match(category, text)
        op = rule["op"]
        tags = list(tags)
        if op == "add":
            obj = m["obj"]
            return tags if obj in tags else tags + [obj]
        if op == "remove":
            obj = m["obj"]
            return [t for t in tags if t != obj and tag_base(t) != obj]
        if op == "replace":
            obj, new = m["obj"], m["new"]
            out = []
            for t in tags:
                t = new if (t == obj or tag_base(t) == obj) else t
                if t not in out:
                    out.append(t)
            return out
        if op == "set_style":
            prefix = rule["style_prefix"]
            return [t for t in tags if not t.startswith(prefix)] + [prefix + m["style"]]
        if op == "set_attribute":
            obj, attr = m["obj"], m["attr"]
            return [f"{attr}-{obj}" if tag_base(t) == obj else t for t in tags]
        raise RejectedInputError(f"unsupported rewrite op {op!r}")

    def rewrite_tags(self, tags, edit):
        """Apply the edit's rule to a tag list and return the new list."""
        if edit.category not in self.rules:
            raise RejectedInputError(f"unknown edit category {edit.category!r}")
        rule = self.rules[edit.category]
        if rule["op"] != "compose":
            return self._apply_one(edit.category, edit.text, tags)
        for part in edit.text.strip().lower().split(rule["separator"]):
            for sub in rule["parts"]:
                try:
                    tags = self._apply_one(sub, part, tags)
                    break
                except RejectedInputError:
                    continue
            else:
                raise RejectedInputError(f"complex edit step {part!r} matches no rule")
        return tags

    def target_caption(self, src, edit):
        if edit.category == "generation":
            return TargetCaption(edit.text)
        if edit.category not in CATEGORIES:
            raise RejectedInputError(f"unknown edit category {edit.category!r}")
        if src.modality == "none":
            raise RejectedInputError("editing instructions require a source")
        tags = self.rewrite_tags(src.content_tags, edit)
        return TargetCaption(render_caption(tags, src.modality))

    def interaction_features(self, src, edit, d_mllm):
        check_positive_int(d_mllm, "d_mllm")
        words = edit.text.split()
        rows = [hash_embedding(f"mllm-text|{src.id}|{i}|{w}", d_mllm) for i, w in enumerate(words)]
        n_visual = 0
        if src.modality != "none":
            for f in range(src.frames):
                for k in range(self.visual_tokens_per_frame):
                    rows.append(hash_embedding(f"mllm-visual|{src.id}|{f}|{k}", d_mllm))
            n_visual = src.frames * self.visual_tokens_per_frame
        tokens = np.array(rows, dtype=np.float64).reshape(len(rows), d_mllm)
        return InteractionFeatures(tokens, len(words), n_visual)


_DEFAULT = None


def default_reasoner():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = MockPromptReasoner()
    return _DEFAULT


def reason_target_caption(src, edit, reasoner=None):
    return (reasoner or default_reasoner()).target_caption(src, edit)


def interaction_features(src, edit, d_mllm, reasoner=None):
    return (reasoner or default_reasoner()).interaction_features(src, edit, d_mllm)
