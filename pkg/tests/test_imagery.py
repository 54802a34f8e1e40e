import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from genmark.errors import ConfigurationError, DimensionError, IngestionError
from genmark.imagery import (DatasetManifest, PromptSet, Source, SubjectDataset, Task, as_image,
                             default_prompts, generate_synthetic_subjects, load_image_folder, read_png,
                             resize_area, save_png, scan_folder, split_prompts, synthetic_corpus,
                             write_image_folder)


def test_synthetic_subjects_are_pure():
    a = generate_synthetic_subjects("human_face", 2, 3, 32, seed=7)
    b = generate_synthetic_subjects(Task.HUMAN_FACE, 2, 3, 32, seed=7)
    for x, y in zip(a, b):
        assert x.subject_id == y.subject_id
        assert x.images.tobytes() == y.images.tobytes()


def test_synthetic_subjects_range_shape_and_distinctness():
    for task in Task:
        subs = generate_synthetic_subjects(task, 2, 4, 32, seed=1)
        for s in subs:
            assert s.images.shape == (4, 32, 32, 3)
            assert s.images.min() >= 0 and s.images.max() <= 1
            assert s.source is Source.SYNTHETIC
        # different subjects differ more than images of one subject
        within = np.abs(subs[0].images[0] - subs[0].images[1]).mean()
        across = np.abs(subs[0].images.mean(0) - subs[1].images.mean(0)).mean()
        assert across > 0 and within > 0


def test_synthetic_seed_changes_output():
    a = generate_synthetic_subjects("artistic_style", 1, 2, 32, seed=1)[0]
    b = generate_synthetic_subjects("artistic_style", 1, 2, 32, seed=2)[0]
    assert not np.array_equal(a.images, b.images)


def test_synthetic_rejects_bad_resolution():
    with pytest.raises(ConfigurationError):
        generate_synthetic_subjects("human_face", 1, 1, 48)
    with pytest.raises(ConfigurationError):
        generate_synthetic_subjects("human_face", 0, 1, 32)


def test_corpus_size_and_determinism():
    a = synthetic_corpus(45, 32, seed=3)
    b = synthetic_corpus(45, 32, seed=3)
    assert a.shape == (45, 32, 32, 3)
    assert a.tobytes() == b.tobytes()


def test_subject_dataset_validation():
    with pytest.raises(ValueError):
        SubjectDataset("s", "human_face", np.full((1, 8, 8, 3), 1.5, np.float32))
    with pytest.raises(DimensionError):
        SubjectDataset("s", "human_face", np.zeros((8, 8, 3), np.float32))
    ds = SubjectDataset("s", "human_face", np.zeros((2, 8, 8, 3), np.float32))
    assert not ds.images.flags.writeable
    assert ds.resolution == 8 and len(ds) == 2


def test_as_image_checks():
    assert as_image(np.zeros((4, 4))).shape == (4, 4, 1)
    with pytest.raises(DimensionError):
        as_image(np.zeros((4, 5, 3)))
    with pytest.raises(DimensionError):
        as_image(np.zeros((4, 4, 2)))


def test_resize_area_integer_factor_is_block_mean():
    img = np.arange(16, dtype=np.float32).reshape(4, 4, 1) / 16
    out = resize_area(img, 2)
    assert out[0, 0, 0] == pytest.approx(img[:2, :2, 0].mean())
    assert resize_area(np.full((6, 6, 3), 0.5, np.float32), 4).max() == pytest.approx(0.5, abs=1e-6)


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 30))
def test_split_prompts_partition(seed, k):
    prompts = default_prompts("human_face")
    known, held = split_prompts(prompts, k, seed)
    assert set(known.ids).isdisjoint(held.ids)
    assert sorted(known.ids + held.ids) == prompts.ids
    assert len(known) == k and known.known_count == k


def test_split_prompts_bounds():
    with pytest.raises(ConfigurationError):
        split_prompts(default_prompts(), 31, 0)


def test_default_prompts_are_templated():
    for task in Task:
        p = default_prompts(task)
        assert p.ids == list(range(30))
        assert all("[V]" in text for _, text in p.prompts)
    assert PromptSet.from_dict(p.to_dict()) == p
    with pytest.raises(ConfigurationError):
        PromptSet(((1, "a"), (1, "b")))


def test_png_roundtrip_quantizes(tmp_path):
    img = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    save_png(img, tmp_path / "a.png")
    back = read_png(tmp_path / "a.png")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6


def test_folder_roundtrip_and_checksums(tmp_path):
    subs = generate_synthetic_subjects("human_face", 2, 3, 32, seed=0)
    write_image_folder(tmp_path, subs)
    back = {d.subject_id: d for d in load_image_folder(tmp_path, resolution=32)}
    for s in subs:
        assert np.abs(back[s.subject_id].images - s.images).max() <= 0.5 / 255 + 1e-6
        assert back[s.subject_id].source is Source.FOLDER
    manifest = DatasetManifest.load(tmp_path / "manifest.json")
    victim = tmp_path / manifest.entries[1].relative_path
    victim.write_bytes(victim.read_bytes()[:-4] + b"oops")
    with pytest.raises(IngestionError) as err:
        load_image_folder(tmp_path, resolution=32)
    assert err.value.entry == manifest.entries[1].relative_path


def test_missing_file_and_manifest(tmp_path):
    with pytest.raises(IngestionError):
        load_image_folder(tmp_path)
    subs = generate_synthetic_subjects("human_face", 1, 2, 32, seed=0)
    m = write_image_folder(tmp_path, subs)
    (tmp_path / m.entries[0].relative_path).unlink()
    with pytest.raises(IngestionError):
        load_image_folder(tmp_path, resolution=32)


def test_scan_folder_resizes_loose_images(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(3):
        Image.fromarray((rng.random((64, 64, 3)) * 255).astype(np.uint8)).save(tmp_path / f"{i}.jpg")
    manifest = scan_folder(tmp_path, "me", "artistic_style")
    (ds,) = load_image_folder(tmp_path, manifest, resolution=32)
    assert ds.images.shape == (3, 32, 32, 3) and ds.task is Task.ARTISTIC_STYLE
    assert DatasetManifest.from_json(manifest.to_json()) == manifest
