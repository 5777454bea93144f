import numpy as np
import pytest

from piba import synthdata as sd
from piba.synthdata import (BBox, MagicMismatch, TruncatedPayload,
                            VersionMismatch)


def test_patch_dataset_shapes_and_ranges():
    ds = sd.gen_patch_dataset(3, 30)
    for split in ("train", "val", "test"):
        s = ds[split]
        assert s.images.shape == (30, 1, 16, 16)
        assert s.images.min() >= 0.0 and s.images.max() <= 1.0
        assert set(s.labels.tolist()) == {0, 1, 2}
        assert len(s.bboxes) == 30


def test_patch_labels_balanced():
    s = sd.gen_patch_dataset(3, 30)["train"]
    counts = np.bincount(s.labels, minlength=3)
    assert np.all(counts == 10)


def test_patch_texture_lives_inside_its_bbox():
    s = sd.gen_patch_dataset(5, 20)["train"]
    for img, bbox in zip(s.images, s.bboxes):
        outside = img[0][~bbox.mask()]
        assert outside.max() < 0.3 + 1e-12  # background stays dim


def test_generation_is_deterministic():
    a = sd.gen_patch_dataset(9, 12)
    b = sd.gen_patch_dataset(9, 12)
    assert np.array_equal(a["test"].images, b["test"].images)
    c = sd.gen_patch_dataset(10, 12)
    assert not np.array_equal(a["test"].images, c["test"].images)


def test_splits_are_distinct():
    ds = sd.gen_patch_dataset(9, 12)
    assert not np.array_equal(ds["train"].images, ds["val"].images)


def test_token_dataset_majority_rule():
    ds = sd.gen_token_dataset(3, 40)
    for split in ("train", "val", "test"):
        s = ds[split]
        for seq, label, keys in zip(s.sequences, s.labels, s.key_positions):
            toks = seq[keys]
            pos = np.isin(toks, sd.POS_IDS).sum()
            neg = np.isin(toks, sd.NEG_IDS).sum()
            assert pos != neg
            assert label == (0 if pos > neg else 1)
            assert 1 <= keys.sum() <= 4
            # distractor tokens never collide with the key vocabularies
            assert np.all(seq[~keys] >= 11)


def test_bbox_validation():
    with pytest.raises(ValueError):
        BBox(14, 0, 4, 4)          # outside the image
    with pytest.raises(ValueError):
        BBox(0, 0, 10, 10)         # covers more than a third of the image
    assert BBox(2, 3, 4, 4).mask().sum() == 16


def test_dataset_round_trip(tmp_path):
    for gen in (sd.gen_patch_dataset, sd.gen_token_dataset):
        ds = gen(4, 10)
        path = tmp_path / "ds.piba"
        sd.save_dataset(ds, path)
        back = sd.load_dataset(path)
        assert back.kind == ds.kind
        for split in ("train", "val", "test"):
            a, b = ds[split], back[split]
            assert np.array_equal(a.labels, b.labels)
            if ds.kind == "image":
                assert np.allclose(a.images, b.images, atol=1e-7)
                assert a.bboxes == b.bboxes
            else:
                assert np.array_equal(a.sequences, b.sequences)
                assert np.array_equal(a.key_positions, b.key_positions)


def test_load_reports_distinct_corruption_errors(tmp_path):
    path = tmp_path / "ds.piba"
    sd.save_dataset(sd.gen_patch_dataset(4, 5), path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.piba"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(MagicMismatch):
        sd.load_dataset(bad)

    bad.write_bytes(blob[:4] + b"\x63\x00" + blob[6:])
    with pytest.raises(VersionMismatch):
        sd.load_dataset(bad)

    bad.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(TruncatedPayload):
        sd.load_dataset(bad)


def test_blur_preserves_mean_and_flattens():
    img = sd.gen_patch_dataset(2, 3)["train"].images[0]
    blurred = sd.blur_image(img)
    assert blurred.shape == img.shape
    assert abs(blurred.mean() - img.mean()) < 0.02
    assert blurred.std() < img.std()


def test_blur_constant_image_is_identity():
    img = np.full((16, 16), 0.7)
    assert np.allclose(sd.blur_image(img), img)


def test_blur_rejects_even_kernel():
    with pytest.raises(ValueError):
        sd.blur_image(np.zeros((16, 16)), kernel_size=4)
