import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from med2d.data import (
    DEFAULT_SHIFT,
    BadMagicError,
    ContainerError,
    DatasetError,
    DecodeError,
    DuplicateNameError,
    SplitDescriptor,
    TruncatedError,
    VersionMismatchError,
    generate_corpus,
    load_dataset,
    read_container,
    resize_bilinear,
    resize_nearest,
    split,
    synth_corpus,
    write_container,
    write_dataset,
    write_pnm,
)
from med2d.data.container import decode_container, encode_container
from med2d.data.dataset import Dataset, SegmentationSample
from med2d.data.pnm import decode_pnm, encode_pnm
from med2d.data.synth import BASE_LEVEL, FG_FRACTION, KINDS
from oracles import container_bytes

# --- PNM ------------------------------------------------------------------------


@given(st.integers(1, 12), st.integers(1, 12), st.booleans(), st.integers(0, 2 ** 16))
def test_pnm_round_trip(h, w, color, seed):
    shape = (h, w, 3) if color else (h, w)
    arr = np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8)
    np.testing.assert_array_equal(decode_pnm(encode_pnm(arr)), arr)


def test_pnm_header_comments_and_16_bit():
    raw = b"P5\n# made by hand\n2 1\n# second\n65535\n" + struct.pack(">HH", 1, 65535)
    np.testing.assert_array_equal(decode_pnm(raw), np.array([[1, 65535]], dtype=np.uint16))


@pytest.mark.parametrize("buf", [b"P3\n1 1\n255\n\x00", b"P5\n2 2\n255\n\x00", b"P5\n0 2\n255\n", b"P5\n2"])
def test_pnm_decode_errors(buf):
    with pytest.raises(DecodeError):
        decode_pnm(buf)


def test_pnm_encoder_rejects_other_dtypes():
    with pytest.raises(ValueError):
        encode_pnm(np.zeros((2, 2), np.float32))


# --- container ------------------------------------------------------------------


def test_container_empty_is_header_only():
    assert len(encode_container({})) == 12
    assert decode_container(encode_container({})) == {}


def test_container_single_tensor_byte_count_and_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = encode_container({"w": arr})
    # 12 header + 4 name_len + 1 name + 1 rank + 2 * 8 dims + 6 * 4 payload
    assert len(blob) == 58
    assert blob == container_bytes([("w", arr)])


def test_container_thousand_random_tensors_bitwise(tmp_path):
    rng = np.random.default_rng(7)
    tensors = {}
    for i in range(1000):
        rank = int(rng.integers(0, 5))
        shape = tuple(int(d) for d in rng.integers(1, 5, rank))
        bits = rng.integers(0, 2 ** 32, shape, dtype=np.uint64).astype(np.uint32)
        tensors[f"t{i}/ü"] = bits.view(np.float32).reshape(shape)  # includes NaN payloads
    write_container(tmp_path / "x.m2sn", tensors)
    back = read_container(tmp_path / "x.m2sn")
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_container_payload_flip_changes_one_element():
    arr = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
    blob = bytearray(encode_container({"a": arr}))
    blob[-5] ^= 0x40
    back = decode_container(bytes(blob))["a"]
    assert np.count_nonzero(back != arr) == 1


def test_container_errors_are_distinct():
    good = encode_container({"a": np.ones(3, np.float32)})
    with pytest.raises(BadMagicError):
        decode_container(b"XXXX" + good[4:])
    with pytest.raises(VersionMismatchError):
        decode_container(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(TruncatedError):
        decode_container(good[:-1])
    with pytest.raises(TruncatedError):
        decode_container(good[:6])
    with pytest.raises(DuplicateNameError):
        encode_container([("a", np.ones(1)), ("a", np.ones(1))])
    dup = good[:8] + struct.pack("<I", 2) + good[12:] + good[12:]
    with pytest.raises(DuplicateNameError):
        decode_container(dup)
    with pytest.raises(ContainerError):
        decode_container(good + b"\x00")
    classes = {BadMagicError, VersionMismatchError, TruncatedError, DuplicateNameError}
    assert len(classes) == 4 and all(issubclass(c, ContainerError) for c in classes)


# --- datasets -------------------------------------------------------------------


def _write_pair(root, sid, img, mask):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    write_pnm(root / "images" / f"{sid}.ppm", img)
    write_pnm(root / "masks" / f"{sid}.pgm", mask)


def test_empty_or_missing_directory_is_empty_dataset(tmp_path):
    assert len(load_dataset(tmp_path / "nothing")) == 0
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    assert len(load_dataset(tmp_path)) == 0


def test_binary_mask_collapse_and_normalization(tmp_path):
    img = np.full((4, 4, 3), 255, np.uint8)
    mask = np.zeros((4, 4), np.uint8)
    mask[:2] = 255
    _write_pair(tmp_path, "a", img, mask)
    ds = load_dataset(tmp_path, 1)
    assert set(np.unique(ds[0].mask)) == {0, 1}
    assert ds[0].image.max() == 1.0 and ds[0].image.dtype == np.float32


def test_gray_images_expand_to_three_channels(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    write_pnm(tmp_path / "images" / "g.pgm", np.full((4, 4), 128, np.uint8))
    write_pnm(tmp_path / "masks" / "g.pgm", np.zeros((4, 4), np.uint8))
    assert load_dataset(tmp_path)[0].image.shape == (4, 4, 3)


def test_dataset_errors(tmp_path):
    img = np.zeros((4, 4, 3), np.uint8)
    _write_pair(tmp_path / "orphan", "a", img, np.zeros((4, 4), np.uint8))
    write_pnm(tmp_path / "orphan" / "images" / "b.ppm", img)
    with pytest.raises(DatasetError, match="b"):
        load_dataset(tmp_path / "orphan")

    _write_pair(tmp_path / "labels", "a", img, np.full((4, 4), 3, np.uint8))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "labels", num_classes=3)
    assert load_dataset(tmp_path / "labels", num_classes=4)[0].mask.max() == 3

    _write_pair(tmp_path / "bad", "a", img, np.zeros((4, 4), np.uint8))
    (tmp_path / "bad" / "images" / "a.ppm").write_bytes(b"garbage")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "bad")

    _write_pair(tmp_path / "size", "a", img, np.zeros((5, 4), np.uint8))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "size")


def test_downsized_masks_keep_only_source_labels(tmp_path):
    rng = np.random.default_rng(3)
    mask = np.zeros((512, 512), np.uint8)
    mask[100:300, 50:200] = 2
    mask[400:, 400:] = 5
    _write_pair(tmp_path, "m", rng.integers(0, 256, (512, 512, 3), dtype=np.uint8), mask)
    ds = load_dataset(tmp_path, num_classes=6, size=256)
    assert ds[0].mask.shape == (256, 256) and ds[0].image.shape == (256, 256, 3)
    assert set(np.unique(ds[0].mask)) <= set(np.unique(mask))


@given(st.integers(0, 3), st.sampled_from([(6, 6), (8, 4), (3, 9)]))
def test_nearest_resize_label_subset(seed, size):
    m = np.random.default_rng(seed).choice([0, 3, 7], (10, 10))
    assert set(np.unique(resize_nearest(m, size))) <= {0, 3, 7}


def test_resize_idempotent_at_target():
    x = np.random.default_rng(1).uniform(size=(9, 7, 3))
    once = resize_bilinear(x, (5, 5))
    np.testing.assert_array_equal(resize_bilinear(once, (5, 5)), once)
    m = resize_nearest(np.arange(49).reshape(7, 7), (4, 4))
    np.testing.assert_array_equal(resize_nearest(m, (4, 4)), m)


def test_sample_spatial_mismatch():
    with pytest.raises(DatasetError):
        SegmentationSample(np.zeros((4, 4, 3)), np.zeros((4, 5), np.uint8), "x")


# --- splitting ------------------------------------------------------------------


def _fake(ids):
    return Dataset(tuple(SegmentationSample(np.zeros((1, 1, 3)), np.zeros((1, 1), np.uint8), i) for i in ids))


def test_ten_samples_split_eight_one_one():
    tr, va, te = split(_fake([f"s{i}" for i in range(10)]))
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_split_set_algebra_and_stability():
    rng = np.random.default_rng(0)
    ids = [f"id{int(v):05d}" for v in rng.choice(100000, 100, replace=False)]
    parts = [set(p.ids) for p in split(_fake(ids), SplitDescriptor(seed=5))]
    assert set().union(*parts) == set(ids)
    assert sum(len(p) for p in parts) == len(ids)
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    assert [set(p.ids) for p in split(_fake(shuffled), SplitDescriptor(seed=5))] == parts
    assert [set(p.ids) for p in split(_fake(ids), SplitDescriptor(seed=6))] != parts


@given(st.integers(0, 60))
def test_split_sizes_are_floor_based(n):
    tr, va, te = split(_fake([f"s{i:03d}" for i in range(n)]))
    assert len(va) == int(0.1 * n + 1e-9) and len(te) == int(0.1 * n + 1e-9)
    assert len(tr) == n - len(va) - len(te)


def test_split_descriptor_validation():
    with pytest.raises(ValueError):
        SplitDescriptor(fractions=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        SplitDescriptor(fractions=(0.9, 0.1))


# --- synthetic corpora ----------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_synth_masks_nonempty_within_bounds(kind):
    for _, img, mask in generate_corpus(kind, 12, 64, seed=1):
        frac = (mask > 0).mean()
        assert FG_FRACTION[0] <= frac <= FG_FRACTION[1]
        assert img.shape == (64, 64, 3) and img.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 255}


def test_synth_is_byte_identical(tmp_path):
    a = synth_corpus("vessels", 4, 32, 9, tmp_path / "a")
    b = synth_corpus("vessels", 4, 32, 9, tmp_path / "b")
    for sub in ("images", "masks"):
        for p in sorted((a / sub).iterdir()):
            assert p.read_bytes() == (b / sub / p.name).read_bytes()


def test_shift_moves_mean_intensity_by_configured_delta():
    base = np.mean([img.mean() for _, img, _ in generate_corpus("ellipses", 16, 64, 2)]) / 255
    moved = np.mean([img.mean() for _, img, _ in generate_corpus("ellipses", 16, 64, 2, DEFAULT_SHIFT)]) / 255
    assert abs(base - BASE_LEVEL) < 0.01
    delta = DEFAULT_SHIFT.intensity
    assert abs((moved - base) - delta) <= 0.1 * delta


def test_synth_argument_errors():
    with pytest.raises(ValueError):
        generate_corpus("ellipses", 1, 40, 0)
    with pytest.raises(ValueError):
        generate_corpus("stars", 1, 32, 0)
    with pytest.raises(ValueError):
        generate_corpus("blobs", 0, 32, 0)


def test_write_then_load_dataset(tmp_path):
    samples = generate_corpus("blobs", 3, 32, 0)
    root = write_dataset(tmp_path / "c", samples)
    ds = load_dataset(root)
    assert ds.ids == [s[0] for s in samples]
    np.testing.assert_array_equal(ds[1].mask, samples[1][2] // 255)
