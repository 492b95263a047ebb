import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mscg import data_io as D
from mscg.numerics import RngState, mten

MIX = "0:26,1:1,2:1,3:1,4:1,5:1,6:1"


def write_sample(root, labels, size=8):
    img = np.linspace(0, 1, 4 * size * size, dtype=np.float32).reshape(4, size, size)
    d = D.save_sample(root / "s0", img, labels)
    D.write_manifest(root / "manifest.txt", [d])
    return D.read_manifest(root / "manifest.txt")


def test_sample_round_trip(tmp_path):
    lab = np.zeros((7, 8, 8), np.uint8)
    lab[3, :4] = 1
    lab[6, 2:6] = 1                       # overlaps class 3 on rows 2-3
    b = D.load_sample(write_sample(tmp_path, lab), 0)
    assert b.images.shape == (1, 4, 8, 8) and b.images.dtype == np.float32
    assert b.images.min() >= 0 and b.images.max() <= 1
    assert (b.labels[0, 3, 2:4] == 1).all() and (b.labels[0, 6, 2:4] == 1).all()
    np.testing.assert_array_equal(b.labels[0, 0], lab[1:].max(axis=0) == 0)
    assert set(np.unique(b.labels)) <= {0, 1} and (b.valid == 1).all()


def test_all_zero_labels_become_background(tmp_path):
    b = D.load_sample(write_sample(tmp_path, np.zeros((7, 8, 8), np.uint8)), 0)
    assert (b.labels[0, 0] == 1).all() and not b.labels[0, 1:].any()


def test_per_class_label_files_and_masks(tmp_path):
    d = tmp_path / "s"
    d.mkdir()
    mten.save(d / "image.mten", np.full((4, 4, 4), 128, np.uint8))
    (d / "labels").mkdir()
    water = np.zeros((4, 4), np.uint8)
    water[0] = 255
    mten.save(d / "labels" / "waterway.mten", water)
    boundary = np.ones((1, 4, 4), np.uint8)
    boundary[0, :, 0] = 0
    mask = np.ones((1, 4, 4), np.uint8)
    mask[0, 3] = 0
    mten.save(d / "boundary.mten", boundary)
    mten.save(d / "mask.mten", mask)
    b = D.load_sample(D.DatasetManifest(tmp_path, [d]), 0)
    assert b.images[0, 0, 0, 0] == pytest.approx(128 / 255)
    assert (b.labels[0, 5, 0] == 1).all() and (b.labels[0, 0, 1:] == 1).all()
    np.testing.assert_array_equal(b.valid[0], boundary & mask)


def test_size_mismatch_names_the_path(tmp_path):
    d = tmp_path / "s"
    D.save_sample(d, np.zeros((4, 8, 8)), np.zeros((7, 8, 8)), boundary=np.ones((1, 4, 4)))
    with pytest.raises(D.DataError, match="boundary.mten"):
        D.load_sample(D.DatasetManifest(tmp_path, [d]), 0)


def test_missing_and_corrupt_files(tmp_path):
    with pytest.raises(D.DataError, match="image.mten"):
        D.load_sample(D.DatasetManifest(tmp_path, [tmp_path / "nope"]), 0)
    d = tmp_path / "bad"
    d.mkdir()
    (d / "image.mten").write_bytes(b"garbage")
    with pytest.raises(D.DataError, match="image.mten"):
        D.load_sample(D.DatasetManifest(tmp_path, [d]), 0)
    with pytest.raises(D.DataError):
        D.load_all(D.DatasetManifest(tmp_path, []))


def test_manifest_comments_and_data_root(tmp_path):
    (tmp_path / "m.txt").write_text("# header\na  # first\n\n/abs/b\n")
    m = D.read_manifest(tmp_path / "m.txt", data_root="/data")
    assert [str(p) for p in m.samples] == ["/data/a", "/abs/b"]
    with pytest.raises(D.DataError):
        D.read_manifest(tmp_path / "missing.txt")


# ----------------------------------------------------------------- synthetic

def test_synth_same_seed_same_bytes(tmp_path):
    D.synth_generate(tmp_path / "a", 7, 3, 32, MIX)
    D.synth_generate(tmp_path / "b", 7, 3, 32, MIX)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 3 * 4 + 1
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    other = D.synth_dataset(8, 3, 32, MIX)
    assert not np.array_equal(other.images, D.synth_dataset(7, 3, 32, MIX).images)


def test_synth_generate_matches_in_memory(tmp_path):
    m = D.synth_generate(tmp_path, 3, 2, 32, MIX)
    disk = D.load_all(D.read_manifest(tmp_path / "manifest.txt"))
    mem = D.synth_dataset(3, 2, 32, MIX)
    assert len(m) == 2
    for a, b in zip((disk.images, disk.labels, disk.valid), (mem.images, mem.labels, mem.valid)):
        np.testing.assert_array_equal(a, b)


def test_single_class_mix():
    b = D.synth_dataset(1, 2, 32, "3:1")
    assert (b.labels[:, 3] == 1).all() and not b.labels[:, [1, 2, 4, 5, 6]].any()


def test_class_mix_over_100_images():
    mix = D.parse_class_mix(MIX)
    b = D.synth_dataset(11, 100, 64, MIX, overlap_prob=0.0)
    share = b.labels.mean(axis=(0, 2, 3))
    assert np.abs(share - mix).max() <= 0.02
    np.testing.assert_array_equal(b.labels.sum(axis=1), 1)


def test_overlap_keeps_both_channels():
    b = D.synth_dataset(2, 6, 64, "0:1,2:1,6:1", overlap_prob=1.0)
    assert (b.labels[:, 1:].sum(axis=1) == 2).any()
    # background never coexists with a foreground label
    assert not (b.labels[:, 0].astype(bool) & b.labels[:, 1:].any(axis=1)).any()


def test_synth_rejects_bad_size_and_mix():
    with pytest.raises(ValueError):
        D.synth_dataset(0, 1, 40, MIX)
    with pytest.raises(ValueError):
        D.parse_class_mix("0:0")


# ------------------------------------------------------------------ sampling

def coord_data(size=8):
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float32)
    img = np.stack([rows, cols, rows * 0, cols * 0])[None]
    lab = np.zeros((1, 2, size, size), np.uint8)
    lab[0, 1, 0, 0] = 1                   # marker pixel
    lab[0, 0] = 1 - lab[0, 1]
    valid = np.ones((1, 1, size, size), np.uint8)
    valid[0, 0, 0, 0] = 0
    return D.SegmentationBatch(img, lab, valid)


def test_no_flip_equals_crop():
    data = coord_data()
    for seed in range(20):
        (b,) = D.sample_patches(data, 4, RngState(seed), flip_prob=0.0)
        t, l = int(b.images[0, 0, 0, 0]), int(b.images[0, 1, 0, 0])
        np.testing.assert_array_equal(b.images[0], data.images[0, :, t:t + 4, l:l + 4])
        np.testing.assert_array_equal(b.labels[0], data.labels[0, :, t:t + 4, l:l + 4])


@given(st.booleans(), st.booleans())
def test_flip_is_an_involution(h, v):
    a = np.arange(24.0).reshape(1, 2, 3, 4)
    once = D.flip([a], h, v)[0]
    assert np.array_equal(D.flip([once], h, v)[0], a)


@settings(max_examples=30)
@given(st.integers(0, 2**16))
def test_flip_keeps_image_label_mask_aligned(seed):
    data = coord_data()
    (b,) = D.sample_patches(data, 8, RngState(seed), flip_prob=0.5)
    # the marker pixel sits at the image location whose coordinates are (0, 0)
    at_origin = (b.images[0, 0] == 0) & (b.images[0, 1] == 0)
    np.testing.assert_array_equal(b.labels[0, 1].astype(bool), at_origin)
    np.testing.assert_array_equal(b.valid[0, 0] == 0, at_origin)


def test_crop_offsets_are_uniform():
    from scipy.stats import chisquare
    data = coord_data()
    base = RngState(99)
    counts = np.zeros((5, 5))
    for i in range(10_000):
        (b,) = D.sample_patches(data, 4, base.substream(i), flip_prob=0.0)
        counts[int(b.images[0, 0, 0, 0]), int(b.images[0, 1, 0, 0])] += 1
    assert chisquare(counts.ravel()).pvalue > 0.001


def test_patch_sampler_epochs():
    data = D.synth_dataset(0, 5, 32, MIX)
    s = D.PatchSampler(data, 16, 2, seed=3)
    assert s.iters_per_epoch == 3
    e0 = s.epoch(0)
    assert [len(b) for b in e0] == [2, 2, 1]
    again = D.PatchSampler(data, 16, 2, seed=3).epoch(0)
    assert all(np.array_equal(a.images, b.images) for a, b in zip(e0, again))
    assert not all(np.array_equal(a.images, b.images) for a, b in zip(e0, s.epoch(1)))
    for b in e0:
        assert b.images.min() >= 0 and b.images.max() <= 1
        assert set(np.unique(b.labels)) <= {0, 1} and set(np.unique(b.valid)) <= {0, 1}
    with pytest.raises(ValueError):
        D.PatchSampler(data, 64, 2, seed=3).epoch(0)
