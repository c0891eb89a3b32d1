import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nablanet import data as D
from nablanet.metrics import compute_metrics, confusion_counts


def seg(n, size=8, seed=0):
    return D.synth_lesions(n, size, seed=seed)


def fake_records(n):
    return [D.ClsRecord(np.zeros((2, 2, 3), np.uint8), i % 3, f"r{i:05d}") for i in range(n)]


# --- flips / augmentation ---------------------------------------------------


@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_double_flip_is_identity(img):
    np.testing.assert_array_equal(D.hflip(D.hflip(img)), img)
    np.testing.assert_array_equal(D.vflip(D.vflip(img)), img)


def test_left_half_mask_flips_right():
    m = np.zeros((4, 6), np.uint8)
    m[:, :3] = 1
    expected = np.zeros((4, 6), np.uint8)
    expected[:, 3:] = 1
    np.testing.assert_array_equal(D.hflip(m), expected)


@given(st.integers(0, 20))
def test_augment_triples(n):
    recs = seg(n, 8)
    out = D.augment_flips(recs)
    assert len(out) == 3 * n
    assert len({r.id for r in out}) == 3 * n


def test_augment_full_dataset_count():
    assert len(D.augment_flips(fake_records(2100))) == 6300


def test_augment_keeps_image_mask_alignment():
    for r in D.augment_flips(seg(4, 16)):
        # the synthetic lesion is darker than the skin, so the mask picks out the dark pixels
        lum = r.image.mean(axis=2)
        assert lum[r.mask == 1].mean() < lum[r.mask == 0].mean()
        c = confusion_counts(r.mask, r.mask)
        assert compute_metrics(c).dice == 1.0
    base = seg(1, 16)[0]
    h, v = D.augment_flips([base])[1:]
    np.testing.assert_array_equal(h.mask, base.mask[:, ::-1])
    np.testing.assert_array_equal(v.image, base.image[::-1])


# --- split ------------------------------------------------------------------


def test_split_counts_and_override():
    recs = fake_records(2594)
    plan = D.split(recs, 0.8, seed=0)
    assert len(plan.train_ids) == 2075 and len(plan.test_ids) == 519
    plan = D.split(recs, 0.8, seed=0, train_count=2100)
    assert len(plan.train_ids) == 2100 and len(plan.test_ids) == 494


@given(n=st.integers(1, 60), frac=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_split_partitions_deterministically(n, frac, seed):
    recs = fake_records(n)
    a, b = D.split(recs, frac, seed), D.split(recs, frac, seed)
    assert a == b
    assert not set(a.train_ids) & set(a.test_ids)
    assert sorted(a.train_ids + a.test_ids) == sorted(r.id for r in recs)
    assert len(a.train_ids) == round(frac * n)


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        D.split(fake_records(5), 1.0)


# --- batching ---------------------------------------------------------------


def test_batches_sizes_and_determinism():
    recs = seg(20, 8)
    sizes = [x.shape[0] for x, _ in D.make_batches(recs, 8, seed=1)]
    assert sizes == [8, 8, 4]
    a = [x.data.tobytes() for x, _ in D.make_batches(recs, 8, seed=1, epoch=3)]
    b = [x.data.tobytes() for x, _ in D.make_batches(recs, 8, seed=1, epoch=3)]
    c = [x.data.tobytes() for x, _ in D.make_batches(recs, 8, seed=1, epoch=4)]
    assert a == b and a != c


def test_batches_cover_each_record_once():
    recs = seg(13, 8)
    seen = np.concatenate([y.reshape(y.shape[0], -1) for _, y in D.make_batches(recs, 4, seed=2)])
    expected = np.stack([r.mask.ravel() for r in recs])
    assert sorted(map(bytes, seen.astype(np.uint8))) == sorted(map(bytes, expected))


def test_batch_scaling_and_binary_targets():
    rec = D.SegRecord(np.full((4, 4, 3), 255, np.uint8), np.eye(4, dtype=np.uint8), "a")
    x, y = next(D.make_batches([rec], 1))
    assert x.data.max() == 1.0 and x.shape == (1, 3, 4, 4)
    assert set(np.unique(y)) <= {0.0, 1.0}
    g, _ = next(D.make_batches([rec], 1, channels=1))
    assert g.shape == (1, 1, 4, 4)
    with pytest.raises(ValueError, match="empty"):
        next(D.make_batches([], 2))


# --- resize -----------------------------------------------------------------


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    np.testing.assert_array_equal(D.resize(img, (5, 7), "nearest"), img)
    const = np.full((2, 2, 3), 77, np.uint8)
    np.testing.assert_array_equal(D.resize(const, (9, 13)), 77)


@given(arrays(np.uint8, st.tuples(st.integers(2, 20), st.integers(2, 20)), elements=st.integers(0, 1)), st.integers(1, 40))
def test_nearest_resize_keeps_masks_binary(mask, size):
    out = D.resize(mask, (size, size), "nearest")
    assert out.shape == (size, size)
    assert set(np.unique(out)) <= {0, 1}


# --- synthetic data ---------------------------------------------------------


def test_synth_masks_are_exact_ellipses():
    rng = np.random.default_rng(5)
    recs = D.synth_lesions(8, 32, seed=5)
    for r in recs:
        _, mask, p = D._synth_seg_one(rng, (32, 32))
        np.testing.assert_array_equal(r.mask, mask)
        # analytic membership for the pixel centres
        yy, xx = np.mgrid[0:32, 0:32] + 0.5
        u = (xx - p.cx) * np.cos(p.angle) + (yy - p.cy) * np.sin(p.angle)
        v = -(xx - p.cx) * np.sin(p.angle) + (yy - p.cy) * np.cos(p.angle)
        np.testing.assert_array_equal(mask, ((u / p.rx) ** 2 + (v / p.ry) ** 2 <= 1).astype(np.uint8))


def test_synth_deterministic_and_classes_covered():
    a, b = D.synth_lesions(8, 16, seed=3), D.synth_lesions(8, 16, seed=3)
    assert all(x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes() for x, y in zip(a, b))
    cls = D.synth_lesions(14, 16, classes=7, seed=0, task="classify")
    assert {r.label for r in cls} == set(range(7))


# --- disk round trips -------------------------------------------------------


def test_segmentation_dir_round_trip(tmp_path):
    recs = seg(8, 16)
    D.write_segmentation_dataset(recs, tmp_path)
    loaded = D.load_dataset_dir(tmp_path)
    assert [r.id for r in loaded] == [r.id for r in recs]
    for a, b in zip(loaded, recs):
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.image, b.image)


def test_mask_threshold_and_isic_suffix(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    D.write_png(tmp_path / "images" / "ISIC_1.png", np.zeros((2, 2, 3), np.uint8))
    D.write_png(tmp_path / "masks" / "ISIC_1_segmentation.png", np.array([[127, 128], [0, 255]], np.uint8))
    (rec,) = D.load_segmentation_dataset(tmp_path / "images", tmp_path / "masks")
    np.testing.assert_array_equal(rec.mask, [[0, 1], [0, 1]])


def test_missing_mask_and_empty_dir(tmp_path):
    (tmp_path / "images").mkdir()
    assert D.load_segmentation_dataset(tmp_path / "images", tmp_path / "masks") == []
    D.write_png(tmp_path / "images" / "lonely.png", np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(FileNotFoundError, match="lonely"):
        D.load_segmentation_dataset(tmp_path / "images", tmp_path / "masks")


def test_undecodable_image_rejected(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"not a png")
    with pytest.raises(ValueError, match="decode"):
        D.read_image(p)


def test_classification_csv_names_and_indices(tmp_path):
    (tmp_path / "images").mkdir()
    for name in ("a.png", "b.png"):
        D.write_png(tmp_path / "images" / name, np.zeros((2, 2, 3), np.uint8))
    (tmp_path / "labels.csv").write_text("filename,label\na.png,Melanoma\nb.png,5\n")
    recs = D.load_dataset_dir(tmp_path)
    assert [(r.id, r.label) for r in recs] == [("a", 2), ("b", 5)]
