import hashlib
import random

import numpy as np
import pytest
from PIL import Image
from scipy.ndimage import map_coordinates

from xraynet import data as D
from xraynet.synth import MAX_CLASSES, generate_synthetic_corpus, synthetic_arrays


def records_with_counts(counts: dict[str, int]) -> list[D.Record]:
    return [D.Record(f"{code}/{i:04d}.png", code) for code, n in counts.items() for i in range(n)]


def strip(records):
    return [D.Record(r.path, r.label_code) for r in records]


# ---------------------------------------------------------------- labels

def test_flatten_full_code_is_atomic():
    recs = [D.Record("a", "1121-120-200-700"), D.Record("b", "1121-120-310-700"), D.Record("c", "1121-120-200-700")]
    mapping = D.flatten_labels(recs)
    assert len(mapping) == 2
    out = D.assign_classes(recs, mapping)
    assert out[0].class_id == out[2].class_id != out[1].class_id


def test_flatten_order_independent():
    recs = records_with_counts({"z-1": 2, "a-9": 3, "m-5": 1})
    shuffled = recs[:]
    random.Random(0).shuffle(shuffled)
    assert D.flatten_labels(recs) == D.flatten_labels(shuffled) == {"a-9": 0, "m-5": 1, "z-1": 2}


def test_empty_label_rejected():
    with pytest.raises(D.DataError):
        D.Record("x.png", "")


# ---------------------------------------------------------------- filtering

def test_min_count_boundary():
    out = D.filter_min_count(records_with_counts({"a": 49, "b": 50}), 50)
    assert {r.label_code for r in out} == {"b"}
    assert len(out) == 50 and {r.class_id for r in out} == {0}


def test_min_count_all_survive():
    recs = records_with_counts({"a": 60, "b": 55})
    out = D.filter_min_count(recs, 50)
    assert [(r.path, r.label_code) for r in out] == [(r.path, r.label_code) for r in recs]


def test_min_count_recompacts():
    out = D.filter_min_count(records_with_counts({"a": 30, "b": 50, "c": 200}), 50)
    assert sorted({r.class_id for r in out}) == [0, 1]
    assert {r.label_code: r.class_id for r in out} == {"b": 0, "c": 1}


def test_min_count_empty_result():
    with pytest.raises(D.EmptyDatasetError, match="no classes survive"):
        D.filter_min_count(records_with_counts({"a": 3}), 50)


# ---------------------------------------------------------------- splitting

def test_split_divisible_case():
    recs = D.filter_min_count(records_with_counts({f"c{k}": 100 for k in range(10)}), 50)
    m = D.stratified_split(recs, 0.9, seed=1)
    assert len(m.subset("train")) == 900 and len(m.subset("test")) == 100
    assert m.counts("train") == [90] * 10 and m.counts("test") == [10] * 10


def test_split_rounding():
    assert D.train_count(55, 0.9) == 50  # 49.5 rounds half up
    assert D.train_count(2, 0.9) == 1
    assert D.train_count(10, 0.99) == 9
    m = D.stratified_split(D.filter_min_count(records_with_counts({"a": 55}), 1), 0.9, 0)
    assert m.counts("train") == [50] and m.counts("test") == [5]


@pytest.mark.parametrize("seed", range(5))
def test_split_within_one_of_fraction(seed):
    rng = np.random.default_rng(seed)
    counts = {f"k{i}": int(n) for i, n in enumerate(rng.integers(2, 300, 12))}
    m = D.stratified_split(D.filter_min_count(records_with_counts(counts), 1), 0.9, seed)
    for k, code in enumerate(m.classes):
        n = counts[code]
        assert abs(m.counts("train")[k] - 0.9 * n) <= 1
        assert m.counts("test")[k] >= 1
        assert m.counts("train")[k] + m.counts("test")[k] == n


def test_split_deterministic_and_exact_partition():
    recs = D.filter_min_count(records_with_counts({"a": 70, "b": 80}), 50)
    a = D.stratified_split(recs, 0.9, seed=3)
    b = D.stratified_split(list(reversed(recs)), 0.9, seed=3)
    assert a.records == b.records
    c = D.stratified_split(recs, 0.9, seed=4)
    assert a.records != c.records
    train = {r.path for r in a.subset("train")}
    test = {r.path for r in a.subset("test")}
    assert not train & test and len(train | test) == len(recs)


def test_split_needs_two_per_class():
    with pytest.raises(D.DataError, match="cannot stratify"):
        D.stratified_split(D.filter_min_count(records_with_counts({"a": 1, "b": 5}), 1))


def test_prepare_reconciles_and_is_idempotent(tmp_path):
    counts = {"x-1": 49, "x-2": 50, "x-3": 120, "x-4": 10, "x-5": 77}
    recs = records_with_counts(counts)
    m, removed = D.prepare(recs, 50, 0.9, seed=7)
    assert removed == [("x-1", 49), ("x-4", 10)]
    assert len(recs) == len(m.records) + sum(n for _, n in removed)
    again, removed2 = D.prepare(strip(m.records), 50, 0.9, seed=7)
    assert again.records == m.records and again.classes == m.classes and removed2 == []
    D.write_manifest(tmp_path / "a.csv", m)
    back = D.read_manifest(tmp_path / "a.csv")
    assert back.records == m.records and back.classes == m.classes
    D.write_manifest(tmp_path / "b.csv", back)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_manifest_csv_roundtrip_and_header(tmp_path):
    recs = records_with_counts({"a": 3})
    D.write_records(tmp_path / "m.csv", recs)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "path,label_code"
    assert D.read_records(tmp_path / "m.csv") == recs
    (tmp_path / "bad.csv").write_text("file,label\nx,y\n")
    with pytest.raises(D.DataError, match="header"):
        D.read_records(tmp_path / "bad.csv")
    with pytest.raises(D.DataError):
        D.read_records(tmp_path / "missing.csv")


def test_manifest_rejects_inconsistent_ids():
    with pytest.raises(D.DataError):
        D.DatasetManifest([D.Record("a", "x", 1, "train")], ["x"])


# ---------------------------------------------------------------- images

def test_load_white_image(tmp_path):
    Image.fromarray(np.full((128, 128), 255, np.uint8)).save(tmp_path / "w.png")
    img = D.load_image(tmp_path / "w.png")
    assert img.shape == (1, 128, 128) and img.dtype == np.float32 and np.all(img == 1)


def test_load_constant_256(tmp_path):
    Image.fromarray(np.full((256, 256), 51, np.uint8)).save(tmp_path / "c.png")
    img = D.load_image(tmp_path / "c.png")
    assert img.shape == (1, 128, 128)
    np.testing.assert_allclose(img, 0.2, atol=1e-6)


def test_load_pgm_and_16_bit(tmp_path):
    a = np.random.default_rng(0).integers(0, 256, (128, 128), dtype=np.uint8)
    Image.fromarray(a).save(tmp_path / "a.pgm")
    np.testing.assert_allclose(D.load_image(tmp_path / "a.pgm")[0], a / 255, atol=1e-7)
    b = np.random.default_rng(1).integers(0, 65536, (128, 128)).astype(np.uint16)
    Image.fromarray(b).save(tmp_path / "b.png")
    img = D.load_image(tmp_path / "b.png")
    assert img.min() >= 0 and img.max() <= 1
    np.testing.assert_allclose(img[0], b / 65535, atol=1e-6)


def test_load_non_square_matches_resize_oracle(tmp_path):
    h, w = 100, 200
    ii, jj = np.mgrid[0:h, 0:w]
    grad = np.round(255 * (0.6 * jj / (w - 1) + 0.4 * (ii / (h - 1)) ** 2)).astype(np.uint8)
    Image.fromarray(grad).save(tmp_path / "g.png")
    img = D.load_image(tmp_path / "g.png")
    # short side 100 -> 128, so the long side becomes 256; then a centered 128-wide crop
    scale = 128 / 100
    ys = np.clip((np.arange(128) + 0.5) / scale - 0.5, 0, h - 1)
    xs = np.clip((np.arange(256) + 0.5) / scale - 0.5, 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    full = map_coordinates(grad / 255.0, [yy, xx], order=1, mode="nearest")
    np.testing.assert_allclose(img[0], full[:, 64:192], atol=1e-3)


def test_load_corrupt_image_names_path(tmp_path):
    p = tmp_path / "broken.png"
    p.write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    with pytest.raises(D.DataError, match="broken.png"):
        D.load_image(p)
    with pytest.raises(D.DataError, match="nope.png"):
        D.load_image(tmp_path / "nope.png")


# ---------------------------------------------------------------- feature files

def test_feature_binary_three_rows(tmp_path):
    rng = np.random.default_rng(2)
    fs = D.FeatureSet(rng.standard_normal((3, 4096)).astype(np.float32), [0, 2, 1])
    D.write_feature_set(tmp_path / "f.bin", fs)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:4] == b"FVS1" and len(raw) == 12 + 3 * 4096 * 4 + 12
    back = D.load_feature_set(tmp_path / "f.bin")
    assert len(back) == 3 and back.dim == 4096
    np.testing.assert_array_equal(back.vectors, fs.vectors)
    np.testing.assert_array_equal(back.class_ids, fs.class_ids)


def test_feature_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(3)
    vec = rng.standard_normal((7, 33)).astype(np.float32)
    vec[0, 0] = np.float32(1e-38)
    fs = D.FeatureSet(vec, rng.integers(0, 5, 7))
    D.write_feature_set(tmp_path / "f.bin", fs)
    back = D.load_feature_set(tmp_path / "f.bin")
    assert back.vectors.tobytes() == vec.tobytes()
    D.write_feature_csv(tmp_path / "f.csv", fs)
    back = D.load_feature_set(tmp_path / "f.csv", expected_dim=33)
    assert back.vectors.tobytes() == vec.tobytes()
    np.testing.assert_array_equal(back.class_ids, fs.class_ids)


def test_feature_csv_short_row_named(tmp_path):
    rows = [[0] + [0.5] * 4096, [1] + [0.5] * 4095, [2] + [0.5] * 4096]
    (tmp_path / "f.csv").write_text("\n".join(",".join(map(str, r)) for r in rows) + "\n")
    with pytest.raises(D.FeatureDimensionError, match="row 1 has 4095"):
        D.load_feature_set(tmp_path / "f.csv")


def test_feature_distinct_diagnostics(tmp_path):
    (tmp_path / "h.bin").write_bytes(b"FVS1\x01\x00")
    with pytest.raises(D.FeatureHeaderError):
        D.load_feature_set(tmp_path / "h.bin")
    fs = D.FeatureSet(np.zeros((2, 4), np.float32), [0, 1])
    D.write_feature_set(tmp_path / "c.bin", fs)
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c2.bin").write_bytes(raw[:-4])
    with pytest.raises(D.FeatureCountError):
        D.load_feature_set(tmp_path / "c2.bin")
    with pytest.raises(D.FeatureCountError):
        D.FeatureSet(np.zeros((2, 4)), [0])
    (tmp_path / "z.bin").write_bytes(b"\xff\xfe\x00garbage")
    with pytest.raises(D.FeatureHeaderError):
        D.load_feature_set(tmp_path / "z.bin")


# ---------------------------------------------------------------- synthetic corpus

def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_corpus_deterministic(tmp_path):
    a = generate_synthetic_corpus(3, 4, 11, tmp_path / "a")
    generate_synthetic_corpus(3, 4, 11, tmp_path / "b")
    generate_synthetic_corpus(3, 4, 12, tmp_path / "c")
    assert len(a) == 12 and len({r.label_code for r in a}) == 3
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b") != _digest(tmp_path / "c")
    img = D.load_image(tmp_path / "a" / a[0].path)
    arrays, labels = synthetic_arrays(3, 4, 11)
    np.testing.assert_array_equal(img, arrays[0])
    assert labels.tolist() == sorted(labels.tolist())


def test_synthetic_full_size_counts():
    recs = [D.Record(f"{k}_{i}", f"code{k}") for k in range(MAX_CLASSES) for i in range(60)]
    assert MAX_CLASSES == 24
    m, removed = D.prepare(recs, 50)
    assert m.num_classes == 24 and not removed and len(m.records) == 1440


def test_synthetic_class_bound():
    with pytest.raises(ValueError):
        synthetic_arrays(25, 1, 0)
