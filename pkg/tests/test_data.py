"""Manifests, frame sampling, batching, and the synthetic corpus."""

import json

import numpy as np
import pytest

from emofuse.data import (
    EncodedDataset,
    Manifest,
    ManifestError,
    Sample,
    SyntheticSpec,
    batches,
    load_image,
    load_manifest,
    sample_frames,
    save_image,
    single_modality_ceilings,
    synth_generate,
    write_manifest,
)
from emofuse.text import build_vocab


def small_manifest():
    samples = [
        Sample("s0", "img0.png", (0,), description="calm", split="train"),
        Sample("s1", "img1.png", (1,), description="tense", split="train",
               box=(1.0, 2.0, 5.0, 6.0), image_id="shared"),
        Sample("s2", "clip0", (0,), description="drift", split="val", is_video=True),
    ]
    return Manifest("single_label", 2, ("neg", "pos"), samples)


class TestManifestRoundTrip:
    def test_everything_survives(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_manifest(path, small_manifest())
        back = load_manifest(path)
        assert back.task_kind == "single_label"
        assert back.num_classes == 2
        assert back.class_names == ("neg", "pos")
        assert len(back.samples) == 3
        assert back.samples[1].box == (1.0, 2.0, 5.0, 6.0)
        assert back.samples[1].image_id == "shared"
        assert back.samples[2].is_video
        assert back.split("train") == back.samples[:2]

    def test_multi_label_arity(self, tmp_path):
        manifest = Manifest(
            "multi_label", 4, ("a", "b", "c", "d"),
            [Sample("s0", "x.png", (0, 2, 3), split="train")],
        )
        path = tmp_path / "m.jsonl"
        write_manifest(path, manifest)
        assert load_manifest(path).samples[0].labels == (0, 2, 3)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


HEADER = json.dumps({"task_kind": "single_label", "num_classes": 2, "class_names": ["a", "b"]})


class TestManifestErrors:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ManifestError, match="empty"):
            load_manifest(path)

    def test_bad_json_names_the_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_lines(path, [HEADER, '{"sample_id": "s0", "media": "x", "labels": [0]}', "{oops"])
        with pytest.raises(ManifestError, match="line 3"):
            load_manifest(path)

    def test_missing_header_field(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_lines(path, ['{"task_kind": "single_label", "num_classes": 2}'])
        with pytest.raises(ManifestError, match="line 1.*class_names"):
            load_manifest(path)

    def test_missing_sample_field_names_the_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_lines(path, [HEADER, '{"sample_id": "s0", "media": "x.png"}'])
        with pytest.raises(ManifestError, match="line 2.*labels"):
            load_manifest(path)

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_lines(path, [HEADER, '{"sample_id": "s0", "media": "x", "labels": [5]}'])
        with pytest.raises(ManifestError, match="line 2"):
            load_manifest(path)

    def test_single_label_arity_enforced(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_lines(path, [HEADER, '{"sample_id": "s0", "media": "x", "labels": [0, 1]}'])
        with pytest.raises(ManifestError, match="exactly one label"):
            load_manifest(path)

    def test_unknown_task_kind(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_lines(path, ['{"task_kind": "ranking", "num_classes": 2, "class_names": ["a", "b"]}'])
        with pytest.raises(ManifestError, match="ranking"):
            load_manifest(path)


def make_frames(tmp_path, count):
    clip = tmp_path / "clip"
    clip.mkdir()
    for i in range(count):
        save_image(clip / f"{i:03d}.png", np.full((4, 4, 3), i / max(count, 1)))
    return clip


class TestSampleFrames:
    def test_uniform_stride(self, tmp_path):
        clip = make_frames(tmp_path, 16)
        picked = sample_frames(clip, 8)
        assert [p.name for p in picked] == [f"{i:03d}.png" for i in range(0, 16, 2)]

    def test_exact_count_is_identity(self, tmp_path):
        clip = make_frames(tmp_path, 8)
        assert [p.name for p in sample_frames(clip, 8)] == [f"{i:03d}.png" for i in range(8)]

    def test_short_clip_repeats_last_frame(self, tmp_path):
        clip = make_frames(tmp_path, 3)
        names = [p.name for p in sample_frames(clip, 8)]
        assert names == ["000.png", "001.png", "002.png"] + ["002.png"] * 5

    def test_empty_directory_rejected(self, tmp_path):
        empty = tmp_path / "nothing"
        empty.mkdir()
        with pytest.raises(ValueError):
            sample_frames(empty, 4)


class TestImageIo:
    def test_round_trip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        image = rng.random((6, 5, 3))
        path = tmp_path / "x.png"
        save_image(path, image)
        back = load_image(path)
        assert back.shape == (6, 5, 3)
        np.testing.assert_allclose(back, image, atol=1 / 255.0 + 1e-9)


class TestBatches:
    def test_final_short_batch_kept(self):
        sizes = [len(b) for b in batches(10, 4, np.random.default_rng(0))]
        assert sizes == [4, 4, 2]

    def test_each_index_appears_once(self):
        seen = np.concatenate(list(batches(23, 5, np.random.default_rng(1))))
        assert sorted(seen.tolist()) == list(range(23))

    def test_deterministic_given_seed(self):
        a = [b.tolist() for b in batches(12, 5, np.random.default_rng(7))]
        b = [b.tolist() for b in batches(12, 5, np.random.default_rng(7))]
        assert a == b

    def test_bad_batch_size_rejected(self):
        with pytest.raises(ValueError):
            list(batches(4, 0, np.random.default_rng(0)))


class TestSyntheticSpec:
    def test_defaults(self):
        spec = SyntheticSpec()
        assert spec.num_classes == 4
        assert spec.class_names == ("class_00", "class_01", "class_10", "class_11")

    def test_group_divisibility_enforced(self):
        with pytest.raises(ValueError):
            SyntheticSpec(num_shapes=7)
        with pytest.raises(ValueError):
            SyntheticSpec(num_keywords=5, text_groups=2)


class TestSingleModalityCeilings:
    def test_default_spec_is_half_half(self):
        assert single_modality_ceilings(SyntheticSpec()) == (0.5, 0.5)

    def test_asymmetric_groups(self):
        # vision pins its 2-way factor, leaving 4 text groups unresolved,
        # and vice versa
        spec = SyntheticSpec(vision_groups=2, text_groups=4)
        vision, text = single_modality_ceilings(spec)
        assert vision == pytest.approx(0.25)
        assert text == pytest.approx(0.5)


class TestSynthGenerate:
    def test_deterministic_and_byte_identical(self, tmp_path):
        spec = SyntheticSpec(num_train=24, num_val=8, seed=11)
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        synth_generate(spec, dir_a)
        synth_generate(spec, dir_b)
        assert (dir_a / "manifest.jsonl").read_bytes() == (dir_b / "manifest.jsonl").read_bytes()
        for png in sorted((dir_a / "images").iterdir()):
            assert png.read_bytes() == (dir_b / "images" / png.name).read_bytes()

    def test_splits_are_balanced(self, tmp_path):
        spec = SyntheticSpec(num_train=40, num_val=12, seed=2)
        manifest = synth_generate(spec, tmp_path / "corpus")
        for split, count in (("train", 40), ("val", 12)):
            labels = [s.labels[0] for s in manifest.split(split)]
            assert len(labels) == count
            assert np.bincount(labels, minlength=4).tolist() == [count // 4] * 4

    def test_every_keyword_used_enough(self, tmp_path):
        spec = SyntheticSpec(num_train=400, num_val=0, seed=5)
        manifest = synth_generate(spec, tmp_path / "corpus")
        from emofuse.data import _KEYWORDS

        text = " ".join(s.description for s in manifest.samples)
        counts = {kw: text.count(kw) for kw in _KEYWORDS}
        assert all(count >= 0.02 * 400 for count in counts.values()), counts

    def test_images_match_manifest_paths(self, tmp_path):
        spec = SyntheticSpec(num_train=8, num_val=4, seed=0)
        manifest = synth_generate(spec, tmp_path / "corpus")
        for sample in manifest.samples:
            image = load_image(tmp_path / "corpus" / sample.media)
            assert image.shape == (32, 32, 3)


class TestEncodedDataset:
    def build(self, tmp_path, modality="both"):
        spec = SyntheticSpec(num_train=12, num_val=4, image_size=8, seed=1)
        manifest = synth_generate(spec, tmp_path / "corpus")
        vocab = build_vocab([s.description for s in manifest.split("train")])
        return (
            EncodedDataset.from_manifest(
                manifest, "train", vocab, 10, root=tmp_path / "corpus", modality=modality
            ),
            manifest,
            vocab,
        )

    def test_shapes_and_alignment(self, tmp_path):
        data, manifest, _ = self.build(tmp_path)
        assert data.images.shape == (12, 8, 8, 3)
        assert data.text.ids.shape == (12, 10)
        assert data.labels.shape == (12,)
        images, batch, labels = data.batch(np.array([3, 1]))
        np.testing.assert_array_equal(images, data.images[[3, 1]])
        np.testing.assert_array_equal(labels, data.labels[[3, 1]])
        np.testing.assert_array_equal(batch.ids, data.text.ids[[3, 1]])

    def test_vision_only_blanks_text(self, tmp_path):
        data, _, _ = self.build(tmp_path, modality="vision")
        assert not data.text.mask.any()
        assert data.images.any()

    def test_text_only_zeroes_images(self, tmp_path):
        data, _, _ = self.build(tmp_path, modality="text")
        assert not data.images.any()
        assert data.text.mask.any()

    def test_unknown_modality_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="modality"):
            self.build(tmp_path, modality="audio")

    def test_multi_label_becomes_multi_hot(self, tmp_path):
        root = tmp_path / "ml"
        root.mkdir()
        save_image(root / "x.png", np.zeros((8, 8, 3)))
        manifest = Manifest(
            "multi_label", 3, ("a", "b", "c"),
            [Sample("s0", "x.png", (0, 2), description="w", split="train")],
        )
        vocab = build_vocab(["w"])
        data = EncodedDataset.from_manifest(manifest, "train", vocab, 4, root=root)
        np.testing.assert_array_equal(data.labels, [[1.0, 0.0, 1.0]])

    def test_video_samples_stack_frames(self, tmp_path):
        root = tmp_path / "vid"
        root.mkdir()
        make_frames(root, 6)
        manifest = Manifest(
            "single_label", 2, ("a", "b"),
            [Sample("s0", "clip", (1,), description="w", split="train", is_video=True)],
        )
        vocab = build_vocab(["w"])
        data = EncodedDataset.from_manifest(manifest, "train", vocab, 4, root=root, num_frames=4)
        assert data.images.shape == (1, 4, 4, 4, 3)
        with pytest.raises(ValueError, match="num_frames"):
            EncodedDataset.from_manifest(manifest, "train", vocab, 4, root=root)

    def test_missing_split_rejected(self, tmp_path):
        _, manifest, vocab = self.build(tmp_path)
        with pytest.raises(ValueError, match="test"):
            EncodedDataset.from_manifest(manifest, "test", vocab, 10, root=tmp_path / "corpus")
