import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isnet.data import (
    HEADER,
    DatasetSpec,
    Sample,
    augment_train,
    batch,
    decode_sample,
    encode_sample,
    flip,
    generate,
    load_split,
    resize_label_nearest,
    unbatch,
    write_dataset,
)
from isnet.errors import ConfigError, DataError, DimensionError, FormatError


def test_noise_free_colors_are_exact():
    spec = DatasetSpec(count=6, noise=0.0)
    pal = spec.palette().astype(np.float32)
    for i in range(6):
        s = generate(spec, i)
        np.testing.assert_array_equal(s.image, pal[s.label].transpose(2, 0, 1))


def test_generation_is_deterministic():
    spec = DatasetSpec(count=10, seed=3)
    for i in range(10):
        a, b = generate(spec, i), generate(spec, i)
        assert a == b
        assert encode_sample(a) == encode_sample(b)
    assert generate(spec, 0) != generate(DatasetSpec(count=10, seed=4), 0)


def test_background_and_chosen_classes_visible():
    spec = DatasetSpec(count=40)
    for i in range(40):
        s = generate(spec, i)
        present = set(np.unique(s.label).tolist())
        assert 0 in present
        assert set(s.meta["classes"]) <= present


def test_cooccurrence_exact_table():
    table = DatasetSpec().cooccurrence()
    assert table[0, 0] == 1.0
    np.testing.assert_allclose(table[1, 3], 0.4 * 0.8)
    np.testing.assert_allclose(table[2, 4], 0.4 * 0.8)
    np.testing.assert_allclose(table[3, 4], 0.0)
    np.testing.assert_allclose(np.diag(table), [1.0, 0.6, 0.6, 0.32, 0.32])
    np.testing.assert_allclose(table, table.T)


@pytest.mark.slow
def test_cooccurrence_monte_carlo():
    spec = DatasetSpec(count=10_000, size=32, min_shape=4, max_shape=16)
    K = spec.num_classes
    counts = np.zeros((K, K))
    for i in range(spec.count):
        q = np.zeros(K)
        q[np.unique(generate(spec, i).label)] = 1
        counts += np.outer(q, q)
    assert np.max(np.abs(counts / spec.count - spec.cooccurrence())) <= 0.03


def test_identity_augmentation(rng):
    s = generate(DatasetSpec(count=2), 0)
    out = augment_train(s, rng, (64, 64), (1.0, 1.0), 0.0)
    assert out == s


def test_flip_involution():
    s = generate(DatasetSpec(count=2), 1)
    assert flip(flip(s)) == s
    np.testing.assert_array_equal(flip(s).label[:, 0], s.label[:, -1])


def test_augment_pads_with_ignore(rng):
    s = generate(DatasetSpec(count=2), 0)
    out = augment_train(s, np.random.default_rng(0), (64, 64), (0.5, 0.5), 0.0)
    assert out.image.shape == (3, 64, 64)
    assert (out.label == 255).sum() == 64 * 64 - 32 * 32
    assert not out.image[:, out.label == 255].any()


def test_nearest_resize_scale_two():
    label = np.arange(6, dtype=np.uint8).reshape(2, 3)
    out = resize_label_nearest(label, 4, 6)
    for i in range(4):
        for j in range(6):
            assert out[i, j] == label[i // 2, j // 2]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_augment_labels_stay_in_range(seed):
    rng = np.random.default_rng(seed)
    s = generate(DatasetSpec(count=4, seed=seed % 7), int(rng.integers(0, 4)))
    out = augment_train(s, rng, (32, 32))
    assert set(np.unique(out.label).tolist()) <= {0, 1, 2, 3, 4, 255}
    assert out.image.dtype == np.float32


def test_batch_round_trip():
    spec = DatasetSpec(count=3)
    samples = [generate(spec, i) for i in range(3)]
    x, y = batch(samples)
    assert x.shape == (3, 3, 64, 64) and y.shape == (3, 64, 64)
    assert unbatch(x, y) == samples


def test_batch_rejects_mixed_extents():
    a = generate(DatasetSpec(count=1), 0)
    b = generate(DatasetSpec(count=1, size=32, max_shape=16), 0)
    with pytest.raises(DimensionError):
        batch([a, b])


def test_iseg_round_trip_and_size():
    s = generate(DatasetSpec(count=1, size=32, max_shape=16), 0)
    buf = encode_sample(s)
    assert HEADER.size == 15
    assert len(buf) == 15 + 13 * 32 * 32
    assert decode_sample(buf) == s
    assert encode_sample(decode_sample(buf)) == buf


def test_iseg_rejects_bad_files():
    buf = encode_sample(generate(DatasetSpec(count=1, size=16, min_shape=2, max_shape=8), 0))
    for cut in (0, 10, 15, 100, len(buf) - 1):
        with pytest.raises(FormatError):
            decode_sample(buf[:cut])
    with pytest.raises(FormatError) as err:
        decode_sample(b"XXXX" + buf[4:])
    assert err.value.offset == 0
    with pytest.raises(FormatError):
        decode_sample(buf + b"\0")
    assert issubclass(FormatError, DataError)


def test_split_disjoint_and_exhaustive():
    for spec in (DatasetSpec(count=640), DatasetSpec(count=640, val_every=5), DatasetSpec(count=7)):
        tr, va = set(spec.split_indices("train")), set(spec.split_indices("val"))
        assert not tr & va and tr | va == set(range(spec.count))
    spec = DatasetSpec(count=640, val_every=5)
    assert len(spec.split_indices("train")) == 512 and len(spec.split_indices("val")) == 128


def test_write_and_load_dataset(tmp_path):
    spec = DatasetSpec(count=6, size=16, min_shape=2, max_shape=8)
    assert write_dataset(spec, tmp_path) == {"train": 3, "val": 3}
    val = load_split(tmp_path, "val")
    assert val == [generate(spec, i) for i in spec.split_indices("val")]
    with pytest.raises(DataError):
        load_split(tmp_path / "missing", "train")


def test_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(size=60)
    with pytest.raises(ConfigError):
        DatasetSpec(scenes="0.5: 1 | 0.4: 2")
    with pytest.raises(ConfigError):
        DatasetSpec(scenes="1.0: 7")


def test_sample_shape_check():
    with pytest.raises(DimensionError):
        Sample(np.zeros((3, 4, 4), np.float32), np.zeros((4, 5), np.uint8))
