"""Unified sample schema, four-stage cleaning, bucketing and task mixing.

Pixel payloads are small uint8 grids stored base64-encoded in JSON-lines
manifests. The synthetic corpus generator renders them procedurally from
scene tags, so every cleaning predicate sees real signal.
"""
import base64
import binascii
import hashlib
import json
import logging
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import ExhaustedDataError, ManifestError, RejectedInputError
from .prompt_reasoner import (
    EDIT_CATEGORIES,
    LOCAL_CATEGORIES,
    EditInstruction,
    MockPromptReasoner,
    SourceDescriptor,
    TargetCaption,
    caption_tags,
    default_reasoner,
    render_caption,
    tag_base,
)
from .tensor_core import Rng, mix_seed

logger = logging.getLogger(__name__)

TASKS = ("t2i", "t2v", "image_edit", "video_edit")
GENERATION_TASKS = ("t2i", "t2v")
STAGE_NAMES = ("stage1_integrity", "stage2_quality", "stage3_consistency", "stage4_edit_verify")


class PayloadDecodeError(ValueError):
    pass


@dataclass(frozen=True)
class Payload:
    frames: int
    height: int
    width: int
    data: str
    overlay: bool = False
    content_tags: tuple = ()

    @classmethod
    def from_pixels(cls, pixels, overlay=False, content_tags=()):
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        f, h, w = pixels.shape
        data = base64.b64encode(pixels.tobytes()).decode("ascii")
        return cls(f, h, w, data, overlay, tuple(content_tags))

    def decode(self):
        try:
            raw = base64.b64decode(self.data, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise PayloadDecodeError(f"payload is not valid base64: {exc}") from None
        expected = self.frames * self.height * self.width
        if len(raw) != expected or expected == 0:
            raise PayloadDecodeError(f"payload holds {len(raw)} bytes, shape needs {expected}")
        return np.frombuffer(raw, dtype=np.uint8).reshape(self.frames, self.height, self.width)

    def digest(self):
        h = hashlib.sha1(f"{self.frames}x{self.height}x{self.width}|".encode())
        h.update(self.data.encode("ascii", "replace"))
        return h.hexdigest()


@dataclass(frozen=True)
class BucketKey:
    height: int
    width: int
    frames: int

    def __str__(self):
        return f"{self.height}x{self.width}x{self.frames}"


@dataclass
class UnifiedSample:
    id: str
    task: str
    instruction: EditInstruction
    target: Payload
    source: SourceDescriptor = None
    source_payload: Payload = None
    target_caption: TargetCaption = None
    line: int = None

    def bucket_key(self):
        return BucketKey(self.target.height, self.target.width, self.target.frames)

    def source_or_empty(self):
        return self.source if self.source is not None else SourceDescriptor.empty()

    def payloads(self):
        out = [("target", self.target)]
        if self.source_payload is not None:
            out.append(("source", self.source_payload))
        return out

    def to_dict(self):
        d = {
            "id": self.id,
            "task": self.task,
            "instruction": {"text": self.instruction.text, "category": self.instruction.category},
            "target_caption": self.target_caption.text if self.target_caption else None,
            "target": _payload_dict(self.target),
        }
        if self.source is not None:
            d["source"] = {
                "id": self.source.id,
                "modality": self.source.modality,
                **_payload_dict(self.source_payload),
            }
        return d

    @classmethod
    def from_dict(cls, d, line=None):
        """Build a sample, enforcing the schema. Raises :class:`ManifestError`."""
        try:
            return cls._from_dict(d, line)
        except ManifestError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"schema violation: {exc!r}", line) from None

    @classmethod
    def _from_dict(cls, d, line):
        if not isinstance(d, dict):
            raise ManifestError("each line must be a JSON object", line)
        task = d["task"]
        if task not in TASKS:
            raise ManifestError(f"unknown task {task!r}", line)
        instr = EditInstruction(d["instruction"]["text"], d["instruction"]["category"])
        is_gen = task in GENERATION_TASKS
        if is_gen != (instr.category == "generation"):
            raise ManifestError(f"category {instr.category!r} does not fit task {task!r}", line)
        if not is_gen and instr.category not in EDIT_CATEGORIES:
            raise ManifestError(f"unknown edit category {instr.category!r}", line)
        has_source = d.get("source") is not None
        if is_gen and has_source:
            raise ManifestError(f"{task} samples must not carry a source", line)
        if not is_gen and not has_source:
            raise ManifestError(f"{task} samples require a source", line)
        source = source_payload = None
        if has_source:
            s = d["source"]
            source_payload = _payload_from(s)
            modality = "image" if task == "image_edit" else "video"
            if s.get("modality", modality) != modality:
                raise ManifestError(f"{task} source must be {modality}", line)
            source = SourceDescriptor(str(s["id"]), modality, int(s["frames"]), int(s["height"]),
                                      int(s["width"]), tuple(s.get("content_tags", ())))
        caption = d.get("target_caption")
        return cls(
            id=str(d["id"]),
            task=task,
            instruction=instr,
            target=_payload_from(d["target"]),
            source=source,
            source_payload=source_payload,
            target_caption=TargetCaption(caption) if caption else None,
            line=line,
        )


def _payload_dict(p):
    return {
        "frames": p.frames,
        "height": p.height,
        "width": p.width,
        "content_tags": list(p.content_tags),
        "overlay": p.overlay,
        "data": p.data,
    }


def _payload_from(d):
    for key in ("frames", "height", "width"):
        if not isinstance(d[key], int) or isinstance(d[key], bool):
            raise ValueError(f"{key} must be an integer")
    if not isinstance(d["data"], str):
        raise ValueError("data must be a base64 string")
    return Payload(d["frames"], d["height"], d["width"], d["data"], bool(d.get("overlay", False)),
                   tuple(d.get("content_tags", ())))


def parse_manifest(path, strict=False, errors=None):
    """Read a JSON-lines manifest.

    In lenient mode a malformed line is logged, appended to ``errors`` (if a
    list is given) and skipped; in strict mode the first one is raised.
    """
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                try:
                    d = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from None
                samples.append(UnifiedSample.from_dict(d, line=lineno))
            except ManifestError as exc:
                if strict:
                    raise
                logger.warning("skipping manifest %s", exc)
                if errors is not None:
                    errors.append(exc)
    return samples


def serialize_manifest(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def manifest_hash(path):
    """Git-style blob hash of a file's bytes."""
    with open(path, "rb") as fh:
        content = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


@dataclass
class CleaningConfig:
    min_frames: int = 1
    max_frames: int = 64
    min_side: int = 8
    max_side: int = 256
    static_threshold: float = 1.0
    locality_threshold: float = 0.3


@dataclass
class StageReport:
    name: str
    n_in: int
    kept: int
    removed: int
    reasons: dict = field(default_factory=dict)
    removed_ids: list = field(default_factory=list)


@dataclass
class CleanReport:
    stages: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def ordering(self):
        return [s.name for s in self.stages]

    def telescopes(self):
        prev = self.stages[0].n_in if self.stages else 0
        for s in self.stages:
            if s.n_in != prev or s.kept + s.removed != s.n_in:
                return False
            prev = s.kept
        return True

    def to_dict(self):
        return {"ordering": self.ordering, "config": self.config,
                "stages": [asdict(s) for s in self.stages]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _filter(samples, predicate):
    kept, removed = [], []
    for s in samples:
        reason = predicate(s)
        if reason is None:
            kept.append(s)
        else:
            removed.append((s, reason))
    return kept, removed


def stage1_integrity(samples, config=None):
    """Decodability, frame-count and resolution/duration ranges, exact duplicates."""
    cfg = config or CleaningConfig()
    seen = set()

    def check(s):
        for _, p in s.payloads():
            if p.frames < cfg.min_frames:
                return "insufficient frames"
            try:
                p.decode()
            except PayloadDecodeError:
                return "undecodable payload"
            if not (cfg.min_side <= p.height <= cfg.max_side and cfg.min_side <= p.width <= cfg.max_side):
                return "resolution out of range"
            if p.frames > cfg.max_frames:
                return "duration out of range"
        digest = s.target.digest()
        if digest in seen:
            return "duplicate"
        seen.add(digest)
        return None

    return _filter(samples, check)


def mean_frame_difference(pixels):
    if pixels.shape[0] < 2:
        return float("inf")
    return float(np.mean(np.abs(np.diff(pixels.astype(np.int16), axis=0))))


def stage2_quality(samples, config=None):
    cfg = config or CleaningConfig()

    def check(s):
        for _, p in s.payloads():
            if p.overlay:
                return "heavy overlay"
            if p.frames > 1 and mean_frame_difference(p.decode()) < cfg.static_threshold:
                return "near static"
        return None

    return _filter(samples, check)


def stage3_consistency(samples, config=None, reasoner=None):
    reasoner = reasoner or default_reasoner()

    def check(s):
        if s.target_caption is None:
            return None
        cap = caption_tags(s.target_caption.text)
        if s.source is not None:
            try:
                expected = reasoner.rewrite_tags(s.source.content_tags, s.instruction)
            except RejectedInputError:
                return "unparseable instruction"
            if set(cap) != set(expected):
                return "instruction/caption contradiction"
        if not set(cap) <= set(s.target.content_tags):
            return "caption/visual mismatch"
        return None

    return _filter(samples, check)


def changed_fraction(source_pixels, target_pixels):
    return float(np.mean(source_pixels != target_pixels))


def stage4_edit_verify(samples, locality_threshold=0.3):
    def check(s):
        if s.source_payload is None:
            return None
        src, tgt = s.source_payload.decode(), s.target.decode()
        if src.shape != tgt.shape:
            return "source/target shape mismatch"
        frac = changed_fraction(src, tgt)
        if frac == 0.0:
            return "no visible edit"
        if s.instruction.category in LOCAL_CATEGORIES and frac > locality_threshold:
            return "edit not localized"
        return None

    return _filter(samples, check)


def run_cleaning(samples, config=None, reasoner=None):
    """Apply the four stages in order; returns ``(kept, CleanReport)``."""
    cfg = config or CleaningConfig()
    report = CleanReport(config=asdict(cfg))
    stages = (
        lambda xs: stage1_integrity(xs, cfg),
        lambda xs: stage2_quality(xs, cfg),
        lambda xs: stage3_consistency(xs, cfg, reasoner),
        lambda xs: stage4_edit_verify(xs, cfg.locality_threshold),
    )
    current = list(samples)
    for name, stage in zip(STAGE_NAMES, stages):
        kept, removed = stage(current)
        report.stages.append(StageReport(
            name, len(current), len(kept), len(removed),
            dict(sorted(Counter(r for _, r in removed).items())),
            [s.id for s, _ in removed],
        ))
        current = kept
    return current, report


def bucket_samples(samples):
    """Partition by target ``(height, width, frames)``; buckets span all tasks."""
    buckets = OrderedDict()
    for s in samples:
        buckets.setdefault(s.bucket_key(), []).append(s)
    return buckets


@dataclass
class Batch:
    key: BucketKey
    task: str
    samples: list


def mix_datasets(buckets, task_weights, rng, batch_size=4):
    """Endless iterator of shape-homogeneous batches.

    A task is drawn by weight, then a bucket uniformly among those holding that
    task, then ``batch_size`` samples of that task from the bucket (without
    replacement, cycling when the bucket is smaller than a batch).
    """
    weights = {t: float(w) for t, w in task_weights.items()}
    if any(w < 0 for w in weights.values()) or not any(w > 0 for w in weights.values()):
        raise RejectedInputError("task weights must be nonnegative and not all zero")
    by_task = {}
    for key, members in buckets.items():
        for t in TASKS:
            chosen = [s for s in members if s.task == t]
            if chosen:
                by_task.setdefault(t, []).append((key, chosen))
    tasks = [t for t in sorted(weights) if weights[t] > 0 and t in by_task]
    if not tasks:
        raise ExhaustedDataError("no bucket holds samples of any weighted task")
    missing = [t for t in weights if weights[t] > 0 and t not in by_task]
    if missing:
        logger.warning("weighted tasks without data are skipped: %s", missing)
    cum = np.cumsum([weights[t] for t in tasks])
    cum = cum / cum[-1]
    while True:
        task = tasks[min(int(np.searchsorted(cum, rng.uniform(), side="right")), len(tasks) - 1)]
        key, members = by_task[task][rng.integers(len(by_task[task]))]
        order = rng.permutation(len(members))
        picks = [members[order[i % len(members)]] for i in range(batch_size)]
        yield Batch(key, task, picks)


# --- synthetic corpus -----------------------------------------------------

OBJECTS = ("dog", "cat", "car", "tree", "ball", "bird", "boat", "house")
ATTRIBUTES = ("red", "blue", "green", "wooden", "shiny")
STYLES = ("watercolor", "sketch", "noir", "pixel")
RESOLUTIONS = ((8, 8), (16, 16))
VIDEO_FRAMES = (4, 8)


def render_scene(tags, frames, height, width, scene_seed, static=False, base_shift=0):
    """Deterministic uint8 frames: textured background plus one moving blob per object tag."""
    rng = Rng(mix_seed("scene-noise", scene_seed))
    shape = (1 if static else frames, height, width)
    noise = rng.integers(7, size=int(np.prod(shape))).reshape(shape)
    styles = [t for t in tags if t.startswith("style:")]
    base = 40 + (mix_seed("style", styles[-1]) % 120 if styles else 0) + base_shift
    img = np.broadcast_to(base + noise, (frames, height, width)).astype(np.int64).copy()
    for tag in tags:
        obj = tag_base(tag)
        if obj is None:
            continue
        pos = mix_seed("position", obj, scene_seed)
        y0, x0 = pos % height, (pos >> 16) % width
        value = 150 + mix_seed("colour", tag) % 100
        for f in range(frames):
            dy = 0 if static else f
            ys = [(y0 + dy + i) % height for i in range(2)]
            xs = [(x0 + j) % width for j in range(2)]
            img[f][np.ix_(ys, xs)] = value
    return np.clip(img, 0, 255).astype(np.uint8)


def _edit_instruction(category, tags, rng):
    objs = [t for t in tags if tag_base(t)]
    present = sorted({tag_base(t) for t in objs})
    absent = [o for o in OBJECTS if o not in present]
    pick = lambda xs: xs[rng.integers(len(xs))]  # noqa: E731
    if category == "local_add":
        return f"add a {pick(absent)}"
    if category == "local_remove":
        return f"remove the {pick(present)}"
    if category == "local_replace":
        return f"replace the {pick(present)} with a {pick(absent)}"
    if category == "global_edit":
        return f"turn the scene into {pick(STYLES)} style"
    if category == "change_attribute":
        return f"make the {pick(present)} {pick(ATTRIBUTES)}"
    return f"add a {pick(absent)} and then make the {pick(present)} {pick(ATTRIBUTES)}"


def _clean_sample(i, task, category, rng, reasoner):
    scene = mix_seed("corpus-scene", i, rng.seed)
    h, w = RESOLUTIONS[rng.integers(len(RESOLUTIONS))]
    frames = 1 if task in ("t2i", "image_edit") else VIDEO_FRAMES[rng.integers(len(VIDEO_FRAMES))]
    modality = "image" if frames == 1 else "video"
    n_obj = 1 + rng.integers(2)
    order = rng.permutation(len(OBJECTS))
    tags = [OBJECTS[k] for k in order[:n_obj]]
    sid = f"s{i:04d}"
    if task in GENERATION_TASKS:
        caption = render_caption(tags, modality)
        pixels = render_scene(tags, frames, h, w, scene)
        return UnifiedSample(sid, task, EditInstruction(caption, "generation"),
                             Payload.from_pixels(pixels, content_tags=tags),
                             target_caption=TargetCaption(caption))
    instr = EditInstruction(_edit_instruction(category, tags, rng), category)
    src = SourceDescriptor(f"src-{sid}", modality, frames, h, w, tuple(tags))
    new_tags = reasoner.rewrite_tags(tags, instr)
    src_payload = Payload.from_pixels(render_scene(tags, frames, h, w, scene), content_tags=tags)
    tgt_payload = Payload.from_pixels(render_scene(new_tags, frames, h, w, scene), content_tags=new_tags)
    caption = None if i % 10 == 9 else TargetCaption(render_caption(new_tags, modality))
    return UnifiedSample(sid, task, instr, tgt_payload, src, src_payload, caption)


PLANTED_STAGE = {
    "insufficient_frames": ("stage1_integrity", "insufficient frames"),
    "undecodable": ("stage1_integrity", "undecodable payload"),
    "resolution": ("stage1_integrity", "resolution out of range"),
    "duration": ("stage1_integrity", "duration out of range"),
    "duplicate": ("stage1_integrity", "duplicate"),
    "static": ("stage2_quality", "near static"),
    "overlay": ("stage2_quality", "heavy overlay"),
    "caption_mismatch": ("stage3_consistency", "caption/visual mismatch"),
    "contradiction": ("stage3_consistency", "instruction/caption contradiction"),
    "no_edit": ("stage4_edit_verify", "no visible edit"),
    "not_localized": ("stage4_edit_verify", "edit not localized"),
}

# Which clean samples each defect may be planted on.
_DEFECT_HOSTS = {
    "insufficient_frames": GENERATION_TASKS,
    "undecodable": TASKS,
    "resolution": GENERATION_TASKS,
    "duration": ("t2v",),
    "duplicate": TASKS,
    "static": ("t2v", "video_edit"),
    "overlay": TASKS,
    "caption_mismatch": GENERATION_TASKS,
    "contradiction": ("image_edit", "video_edit"),
    "no_edit": ("image_edit", "video_edit"),
    "not_localized": ("image_edit", "video_edit"),
}


def _plant(kind, s, rng, config):
    t = s.target
    if kind == "insufficient_frames":
        return replace(s, target=replace(t, frames=0, data=""))
    if kind == "undecodable":
        return replace(s, target=replace(t, data="@@corrupt@@" + t.data[:8]))
    if kind == "resolution":
        pixels = render_scene(t.content_tags, t.frames, config.min_side // 2, config.min_side // 2, s.id)
        return replace(s, target=Payload.from_pixels(pixels, content_tags=t.content_tags))
    if kind == "duration":
        pixels = render_scene(t.content_tags, config.max_frames + 8, t.height, t.width, s.id)
        return replace(s, target=Payload.from_pixels(pixels, content_tags=t.content_tags))
    if kind == "static":
        pixels = render_scene(t.content_tags, t.frames, t.height, t.width, s.id, static=True)
        return replace(s, target=Payload.from_pixels(pixels, content_tags=t.content_tags))
    if kind == "overlay":
        return replace(s, target=replace(t, overlay=True))
    if kind == "caption_mismatch":
        extra = [o for o in OBJECTS if o not in t.content_tags][0]
        modality = "image" if t.frames == 1 else "video"
        return replace(s, target_caption=TargetCaption(render_caption(list(t.content_tags) + [extra], modality)))
    if kind == "contradiction":
        return replace(s, target_caption=TargetCaption(render_caption(s.source.content_tags, s.source.modality)))
    if kind == "no_edit":
        sp = s.source_payload
        return replace(s, target=replace(sp, content_tags=t.content_tags))
    if kind == "not_localized":
        pixels = render_scene(t.content_tags, t.frames, t.height, t.width,
                              mix_seed("corpus-scene", int(s.id[1:]), rng.seed), base_shift=60)
        return replace(s, target=Payload.from_pixels(pixels, content_tags=t.content_tags))
    raise RejectedInputError(f"unknown defect kind {kind!r}")


def generate_corpus(n_samples, seed=0, defects=None, config=None, reasoner=None):
    """Synthetic corpus with planted defects.

    Returns ``(samples, expected)`` where ``expected`` maps each stage name to
    its planted removal count, ``"reasons"`` to per-reason counts and
    ``"planted_ids"`` to the sample ids carrying each defect kind.
    Duplicates are appended copies of earlier clean samples, so they count
    toward ``n_samples``. Edit categories cycle through all six.
    """
    defects = dict(defects or {})
    cfg = config or CleaningConfig()
    reasoner = reasoner or MockPromptReasoner()
    rng = Rng(mix_seed("corpus", seed))
    n_dup = defects.pop("duplicate", 0)
    n_base = n_samples - n_dup
    if n_base <= 0:
        raise RejectedInputError("corpus too small for the requested duplicates")
    samples = []
    n_edit = 0
    for i in range(n_base):
        task = TASKS[i % len(TASKS)]
        category = "generation"
        if task not in GENERATION_TASKS:
            category = EDIT_CATEGORIES[n_edit % len(EDIT_CATEGORIES)]
            n_edit += 1
        samples.append(_clean_sample(i, task, category, rng, reasoner))

    used = set()
    expected = {name: 0 for name in STAGE_NAMES}
    reasons = Counter()
    planted = {}
    for kind, count in sorted(defects.items()):
        hosts = [i for i, s in enumerate(samples)
                 if i not in used and s.task in _DEFECT_HOSTS[kind]
                 and not (kind in ("caption_mismatch", "contradiction") and s.target_caption is None)
                 and not (kind == "not_localized" and s.instruction.category not in LOCAL_CATEGORIES)]
        if len(hosts) < count:
            raise RejectedInputError(f"not enough host samples for {count} x {kind}")
        for k in rng.permutation(len(hosts))[:count]:
            i = hosts[k]
            used.add(i)
            samples[i] = _plant(kind, samples[i], rng, cfg)
            planted.setdefault(kind, []).append(samples[i].id)
        stage, reason = PLANTED_STAGE[kind]
        expected[stage] += count
        reasons[reason] += count
    if n_dup:
        clean = [i for i in range(n_base) if i not in used]
        for j, k in enumerate(rng.permutation(len(clean))[:n_dup]):
            samples.append(replace(samples[clean[k]], id=f"dup{j:04d}"))
            planted.setdefault("duplicate", []).append(f"dup{j:04d}")
        expected["stage1_integrity"] += n_dup
        reasons["duplicate"] += n_dup
    expected["reasons"] = dict(sorted(reasons.items()))
    expected["planted_ids"] = {k: sorted(v) for k, v in sorted(planted.items())}
    expected["kept"] = n_samples - sum(expected[s] for s in STAGE_NAMES)
    return samples, expected


PLANTED_200 = {
    "insufficient_frames": 3,
    "undecodable": 3,
    "resolution": 2,
    "duration": 2,
    "duplicate": 4,
    "static": 5,
    "overlay": 4,
    "caption_mismatch": 4,
    "contradiction": 5,
    "no_edit": 4,
    "not_localized": 4,
}
