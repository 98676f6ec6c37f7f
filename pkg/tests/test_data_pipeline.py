import json
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omniflow.data_pipeline import (
    STAGE_NAMES,
    BucketKey,
    CleaningConfig,
    Payload,
    PayloadDecodeError,
    UnifiedSample,
    bucket_samples,
    generate_corpus,
    manifest_hash,
    mix_datasets,
    parse_manifest,
    render_scene,
    run_cleaning,
    serialize_manifest,
    stage1_integrity,
    stage2_quality,
    stage3_consistency,
    stage4_edit_verify,
)
from omniflow.estimators import CleaningPipeline
from omniflow.exceptions import ExhaustedDataError, ManifestError, RejectedInputError
from omniflow.prompt_reasoner import EditInstruction, SourceDescriptor, TargetCaption
from omniflow.tensor_core import Rng

FIXTURES = Path(__file__).parent / "fixtures"


def gen_sample(sid="g1", tags=("dog",), frames=4, size=8, task="t2v", seed=1):
    pixels = render_scene(list(tags), frames, size, size, seed)
    cap = ("a video of " if frames > 1 else "an image of ") + " and ".join(tags)
    return UnifiedSample(sid, task, EditInstruction(cap, "generation"),
                         Payload.from_pixels(pixels, content_tags=tags), target_caption=TargetCaption(cap))


def edit_sample(category="local_add", text="add a cat", src_tags=("dog",), tgt_tags=("dog", "cat"),
                target_pixels=None, caption=None, frames=4):
    src_px = render_scene(list(src_tags), frames, 8, 8, 5)
    tgt_px = render_scene(list(tgt_tags), frames, 8, 8, 5) if target_pixels is None else target_pixels
    return UnifiedSample(
        "e1", "video_edit", EditInstruction(text, category),
        Payload.from_pixels(tgt_px, content_tags=tgt_tags),
        SourceDescriptor("src", "video", frames, 8, 8, src_tags),
        Payload.from_pixels(src_px, content_tags=src_tags),
        TargetCaption(caption) if caption else None,
    )


# --- schema / manifest ------------------------------------------------------

def test_empty_manifest(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert parse_manifest(path) == []


def test_t2v_with_source_is_schema_violation():
    d = edit_sample().to_dict()
    d["task"] = "t2v"
    d["instruction"]["category"] = "generation"
    with pytest.raises(ManifestError):
        UnifiedSample.from_dict(d)
    d = gen_sample().to_dict()
    d["task"] = "video_edit"
    with pytest.raises(ManifestError):
        UnifiedSample.from_dict(d)


def test_round_trip_fifty_samples(tmp_path):
    samples, _ = generate_corpus(50, seed=3)
    path = tmp_path / "m.jsonl"
    serialize_manifest(samples, path)
    again = parse_manifest(path)
    assert [s.to_dict() for s in again] == [s.to_dict() for s in samples]
    path2 = tmp_path / "m2.jsonl"
    serialize_manifest(again, path2)
    assert path.read_bytes() == path2.read_bytes()
    assert manifest_hash(path) == manifest_hash(path2)


def test_lenient_and_strict_parsing(tmp_path):
    good = json.dumps(gen_sample().to_dict())
    path = tmp_path / "m.jsonl"
    path.write_text(good + "\n{not json\n" + json.dumps({"task": "t9"}) + "\n" + good + "\n")
    errors = []
    assert len(parse_manifest(path, errors=errors)) == 2
    assert [e.line_number for e in errors] == [2, 3]
    with pytest.raises(ManifestError, match="line 2"):
        parse_manifest(path, strict=True)


def test_manifest_hash_is_git_blob_hash(tmp_path):
    path = tmp_path / "x"
    path.write_bytes(b"hello\n")
    assert manifest_hash(path) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_payload_decode_errors():
    p = Payload.from_pixels(np.zeros((2, 8, 8), dtype=np.uint8))
    assert p.decode().shape == (2, 8, 8)
    with pytest.raises(PayloadDecodeError):
        replace(p, data="@@@").decode()
    with pytest.raises(PayloadDecodeError):
        replace(p, frames=3).decode()


# --- stage 1 ----------------------------------------------------------------

def test_stage1_zero_frames_and_duplicate():
    s = gen_sample()
    zero = replace(s, id="z", target=replace(s.target, frames=0, data=""))
    kept, removed = stage1_integrity([s, zero, replace(s, id="dup")])
    assert [x.id for x in kept] == ["g1"]
    assert [(x.id, r) for x, r in removed] == [("z", "insufficient frames"), ("dup", "duplicate")]


def test_stage1_hundred_samples_seven_planted():
    defects = {"insufficient_frames": 2, "undecodable": 2, "resolution": 1, "duration": 1, "duplicate": 1}
    samples, expected = generate_corpus(100, seed=7, defects=defects)
    kept, removed = stage1_integrity(samples)
    assert len(removed) == 7 == expected["stage1_integrity"]
    planted = {i for ids in expected["planted_ids"].values() for i in ids}
    assert {s.id for s, _ in removed} == planted


def test_stage1_ranges_come_from_config():
    s = gen_sample(size=8)
    assert stage1_integrity([s], CleaningConfig(min_side=16))[1][0][1] == "resolution out of range"
    assert stage1_integrity([s], CleaningConfig(max_frames=2))[1][0][1] == "duration out of range"


# --- stage 2 ----------------------------------------------------------------

def test_stage2_static_and_threshold():
    static = replace(gen_sample(), target=Payload.from_pixels(np.full((4, 8, 8), 9, dtype=np.uint8)))
    kept, removed = stage2_quality([static])
    assert removed[0][1] == "near static"
    assert stage2_quality([static], CleaningConfig(static_threshold=0.0))[0] == [static]


def test_stage2_forty_samples_five_static():
    samples, expected = generate_corpus(40, seed=2, defects={"static": 5})
    kept, removed = stage2_quality(samples)
    assert len(removed) == 5
    assert {s.id for s, _ in removed} == set(expected["planted_ids"]["static"])


def test_stage2_overlay():
    s = gen_sample()
    flagged = replace(s, target=replace(s.target, overlay=True))
    assert stage2_quality([flagged])[1][0][1] == "heavy overlay"


# --- stage 3 ----------------------------------------------------------------

def test_stage3_rules():
    ok = gen_sample(tags=("dog", "tree"))
    assert stage3_consistency([ok])[0] == [ok]
    bad = edit_sample("local_remove", "remove dog", ("dog", "park"), ("park",),
                      caption="a video of dog and park")
    assert stage3_consistency([bad])[1][0][1] == "instruction/caption contradiction"
    no_caption = edit_sample(caption=None)
    assert stage3_consistency([no_caption])[0] == [no_caption]
    unparseable = edit_sample(text="do something", caption="a video of dog")
    assert stage3_consistency([unparseable])[1][0][1] == "unparseable instruction"
    mismatch = replace(ok, target_caption=TargetCaption("a video of dog and cat"))
    assert stage3_consistency([mismatch])[1][0][1] == "caption/visual mismatch"


# --- stage 4 ----------------------------------------------------------------

def test_stage4_rules():
    src_px = render_scene(["dog"], 4, 8, 8, 5)
    same = edit_sample(target_pixels=src_px)
    assert stage4_edit_verify([same])[1][0][1] == "no visible edit"
    changed = src_px.copy()
    changed.reshape(-1)[: int(0.9 * changed.size)] ^= 0xFF
    wide_local = edit_sample("local_remove", "remove the dog", target_pixels=changed)
    assert stage4_edit_verify([wide_local], 0.3)[1][0][1] == "edit not localized"
    wide_global = edit_sample("global_edit", "turn the scene into noir style", target_pixels=changed)
    assert stage4_edit_verify([wide_global], 0.3)[0] == [wide_global]
    generation = gen_sample()
    assert stage4_edit_verify([generation])[0] == [generation]
    shape = edit_sample(target_pixels=render_scene(["dog"], 2, 8, 8, 5))
    assert stage4_edit_verify([shape])[1][0][1] == "source/target shape mismatch"


# --- full pipeline ------------------------------------------------------------

def test_planted_fixture_counts_exact():
    samples = parse_manifest(FIXTURES / "planted_200.jsonl")
    truth = json.loads((FIXTURES / "planted_200_counts.json").read_text())
    kept, report = run_cleaning(samples)
    assert report.ordering == list(STAGE_NAMES)
    assert report.telescopes()
    for st_report in report.stages:
        assert st_report.removed == truth[st_report.name]
    merged = Counter()
    for st_report in report.stages:
        merged.update(st_report.reasons)
    assert dict(merged) == truth["reasons"]
    assert len(kept) == truth["kept"] == 160
    removed_ids = {i for s in report.stages for i in s.removed_ids}
    assert removed_ids == {i for ids in truth["planted_ids"].values() for i in ids}


def test_cleaning_estimator_matches_function():
    samples, _ = generate_corpus(60, seed=4, defects={"overlay": 2, "no_edit": 1})
    pipe = CleaningPipeline().fit()
    kept = pipe.transform(samples)
    assert len(kept) == 57
    assert pipe.report_.stages[1].removed == 2
    assert pipe.get_params()["config"] is None


def test_locality_threshold_changes_outcome():
    samples, _ = generate_corpus(40, seed=5, defects={"not_localized": 2})
    strict = run_cleaning(samples, CleaningConfig(locality_threshold=0.3))[1]
    loose = run_cleaning(samples, CleaningConfig(locality_threshold=1.0))[1]
    assert strict.stages[3].removed == 2 and loose.stages[3].removed == 0


# --- bucketing / mixing ---------------------------------------------------------

def test_buckets_single_and_split_by_frames():
    same = [gen_sample(sid=f"a{i}", seed=i) for i in range(3)]
    assert list(bucket_samples(same)) == [BucketKey(8, 8, 4)]
    mixed = same + [gen_sample(sid="img", frames=1, task="t2i")]
    keys = set(bucket_samples(mixed))
    assert keys == {BucketKey(8, 8, 4), BucketKey(8, 8, 1)}


@settings(max_examples=10, deadline=None)
@given(st.integers(10, 60), st.integers(0, 1000))
def test_buckets_partition_random_corpus(n, seed):
    samples, _ = generate_corpus(n, seed=seed)
    buckets = bucket_samples(samples)
    flat = [s.id for members in buckets.values() for s in members]
    assert sorted(flat) == sorted(s.id for s in samples)
    for key, members in buckets.items():
        assert all(s.bucket_key() == key for s in members)


def test_mixing_single_task_and_homogeneous_batches():
    samples, _ = generate_corpus(40, seed=1)
    buckets = bucket_samples(samples)
    mixer = mix_datasets(buckets, {"t2v": 1.0}, Rng(0), batch_size=3)
    for _ in range(50):
        batch = next(mixer)
        assert batch.task == "t2v"
        assert len({s.bucket_key() for s in batch.samples}) == 1
        assert all(s.task == "t2v" for s in batch.samples)


def test_mixing_frequencies():
    samples, _ = generate_corpus(40, seed=1)
    mixer = mix_datasets(bucket_samples(samples), {"t2v": 3.0, "video_edit": 1.0}, Rng(42), batch_size=1)
    counts = Counter(next(mixer).task for _ in range(20000))
    assert abs(counts["t2v"] / 20000 - 0.75) < 0.01
    assert abs(counts["video_edit"] / 20000 - 0.25) < 0.01


def test_mixing_errors():
    samples, _ = generate_corpus(8, seed=1)
    t2i_only = [s for s in samples if s.task == "t2i"]
    with pytest.raises(ExhaustedDataError):
        next(mix_datasets(bucket_samples(t2i_only), {"t2v": 1.0}, Rng(0)))
    with pytest.raises(RejectedInputError):
        next(mix_datasets(bucket_samples(samples), {"t2v": 0.0}, Rng(0)))
