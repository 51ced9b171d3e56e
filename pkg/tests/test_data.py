import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from uepurify import data
from uepurify.data import LabeledImageSet, NormBound, PerturbationSet, SynthConfig


def tiny_set(n=6, k=3, shape=(3, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    return LabeledImageSet(rng.uniform(0, 1, (n, *shape)).astype(np.float32), np.arange(n) % k, k)


@st.composite
def image_sets(draw):
    n = draw(st.integers(1, 5))
    c = draw(st.sampled_from([1, 3]))
    h = draw(st.integers(1, 6))
    w = draw(st.integers(1, 6))
    k = draw(st.integers(2, 7))
    unit = st.floats(0, 1, width=32)
    images = draw(hnp.arrays(np.float32, (n, c, h, w), elements=unit))
    labels = draw(hnp.arrays(np.int64, (n,), elements=st.integers(0, k - 1)))
    return LabeledImageSet(images, labels, k)


@settings(max_examples=50, deadline=None)
@given(image_sets(), st.booleans(), st.sampled_from(["linf", "l2", "l0"]))
def test_container_round_trip_is_bit_exact(tmp_path_factory, ds, with_p, kind):
    path = tmp_path_factory.mktemp("c") / "x.uepd"
    perturb = None
    if with_p:
        deltas = np.linspace(-0.1, 0.1, ds.images.size, dtype=np.float32).reshape(ds.images.shape)
        perturb = PerturbationSet(deltas, NormBound(kind, 0.5))
    data.write_container(ds, path, perturb)
    back, p_back = data.read_container(path)
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels) and back.class_count == ds.class_count
    if with_p:
        assert p_back.deltas.tobytes() == perturb.deltas.tobytes()
        assert p_back.bound.kind == kind and p_back.bound.epsilon == pytest.approx(0.5)
    else:
        assert p_back is None


def test_bad_magic(tmp_path):
    path = tmp_path / "x.uepd"
    data.write_container(tiny_set(), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(data.BadMagicError):
        data.read_container(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "x.uepd"
    data.write_container(tiny_set(), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(data.VersionMismatchError):
        data.read_container(path)


@pytest.mark.parametrize("cut", [10, 1, -1])
def test_truncated_file(tmp_path, cut):
    path = tmp_path / "x.uepd"
    data.write_container(tiny_set(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut] if cut > 0 else raw + b"\0")
    with pytest.raises(data.TruncatedFileError):
        data.read_container(path)


def test_label_out_of_range_in_file(tmp_path):
    path = tmp_path / "x.uepd"
    ds = tiny_set(k=3)
    data.write_container(ds, path)
    raw = bytearray(path.read_bytes())
    off = data._HEADER.size + 4 * ds.images.size
    raw[off : off + 2] = struct.pack("<H", 7)
    path.write_bytes(bytes(raw))
    with pytest.raises(data.InvariantViolationError):
        data.read_container(path)


def test_writer_refuses_invalid_pixels(tmp_path):
    ds = tiny_set()
    ds.images[0, 0, 0, 0] = 1.5
    with pytest.raises(data.InvariantViolationError):
        data.write_container(ds, tmp_path / "x.uepd")


# --------------------------------------------------------------------------- PSNR


def test_psnr_known_value():
    a = np.zeros((2, 3, 4, 4))
    assert data.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert data.psnr(a, a + 0.01) == pytest.approx(40.0)


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).uniform(size=(2, 3, 4, 4))
    assert data.psnr(a, a) == data.PSNR_CAP


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        data.psnr(np.zeros((2, 3)), np.zeros((3, 2)))


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(0, 1)), hnp.arrays(np.float64, (3, 5), elements=st.floats(0, 1)))
def test_psnr_symmetric_and_bounded(a, b):
    v = data.psnr(a, b)
    assert v == data.psnr(b, a)
    assert 0.0 <= v <= data.PSNR_CAP  # peak 1 and |a - b| <= 1 keep it nonnegative


# --------------------------------------------------------------------------- splits and bounds


@given(st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_stratified_and_disjoint(fraction, seed):
    ds = LabeledImageSet(np.zeros((60, 1, 2, 2), np.float32), np.repeat(np.arange(3), 20), 3)
    ds.images[:, 0, 0, 0] = np.arange(60) / 60  # tag samples to check disjointness
    a, b = data.split_dataset(ds, fraction, seed)
    assert len(a) + len(b) == 60
    assert set(a.images[:, 0, 0, 0]).isdisjoint(b.images[:, 0, 0, 0])
    for k in range(3):
        assert np.sum(a.labels == k) == int(round(fraction * 20))


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        data.split_dataset(tiny_set(), 1.0, 0)


def test_norm_bound_validation():
    with pytest.raises(ValueError):
        NormBound("l3", 1.0)
    with pytest.raises(ValueError):
        NormBound("l2", 0.0)


def test_l0_bound_counts_pixel_positions():
    deltas = np.zeros((1, 3, 4, 4), np.float32)
    deltas[0, :, 1, 1] = 0.5  # one position, three channels
    assert PerturbationSet(deltas, NormBound("l0", 1)).satisfies_bound()
    deltas[0, 0, 2, 2] = 0.1
    assert not PerturbationSet(deltas, NormBound("l0", 1)).satisfies_bound()


# --------------------------------------------------------------------------- generator


def test_generator_contract():
    cfg = SynthConfig(train_per_class=4, test_per_class=2, seed=3)
    train, test = data.generate_synthetic_dataset(cfg)
    assert train.images.shape == (40, 3, 16, 16) and len(test) == 20
    assert train.images.dtype == np.float32
    assert np.bincount(train.labels).tolist() == [4] * 10
    train.validate()
    test.validate()


def test_generator_is_deterministic_per_seed():
    cfg = SynthConfig(train_per_class=3, test_per_class=1, seed=5)
    a, _ = data.generate_synthetic_dataset(cfg)
    b, _ = data.generate_synthetic_dataset(cfg)
    c, _ = data.generate_synthetic_dataset(SynthConfig(train_per_class=3, test_per_class=1, seed=6))
    assert a.images.tobytes() == b.images.tobytes()
    assert not np.array_equal(a.images, c.images)


def test_generator_grayscale_and_validation():
    train, _ = data.generate_synthetic_dataset(SynthConfig(train_per_class=2, test_per_class=1, channels=1))
    assert train.shape == (1, 16, 16)
    with pytest.raises(ValueError):
        SynthConfig(contrast=(0.5, 0.1)).validate()
    with pytest.raises(ValueError):
        SynthConfig(class_count=1).validate()


def test_glyphs_differ_between_classes():
    yy, xx = np.mgrid[0:16, 0:16].astype(float)
    masks = [data._glyph(k, yy, xx, 8, 8, 4) for k in range(10)]
    for i in range(10):
        assert masks[i].any()
        for j in range(i):
            assert not np.array_equal(masks[i], masks[j])
