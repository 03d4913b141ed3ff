import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lesionaug.control import Vocabulary
from lesionaug.datacore import (ManifestEntry, load_image, load_mask, load_pairs, quantize,
                                read_manifest, save_image, save_mask, split_dataset,
                                split_sizes, write_manifest)
from lesionaug.errors import ConfigError, DecodeError, VocabularyError


def _png(path, arr, mode=None):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode=mode).save(path)
    return path


@pytest.mark.parametrize("byte,value", [(255, 1.0), (0, 0.0)])
def test_load_image_scaling_extremes(tmp_path, byte, value):
    img = load_image(_png(tmp_path / "p.png", [[byte]]))
    assert img.shape == (1, 1, 1)
    assert img[0, 0, 0] == value


def test_load_image_divides_by_255(tmp_path):
    img = load_image(_png(tmp_path / "p.png", [[0, 51], [102, 255]]))
    assert img[:, :, 0].tolist() == [[0.0, 0.2], [0.4, 1.0]]


def test_load_rgb_keeps_channels(tmp_path):
    arr = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    img = load_image(_png(tmp_path / "rgb.png", arr))
    assert img.shape == (2, 3, 3)
    np.testing.assert_array_equal(img, arr / 255.0)


def test_load_image_errors_name_the_path(tmp_path):
    with pytest.raises(DecodeError, match="missing.png"):
        load_image(tmp_path / "missing.png")
    rgba = _png(tmp_path / "rgba.png", np.zeros((2, 2, 4)))
    with pytest.raises(DecodeError, match="rgba.png"):
        load_image(rgba)
    deep = tmp_path / "deep.png"
    Image.fromarray(np.full((2, 2), 40000, dtype=np.uint16)).save(deep)
    with pytest.raises(DecodeError, match="deep.png"):
        load_image(deep)
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not a png")
    with pytest.raises(DecodeError):
        load_image(junk)


def test_save_image_rounding(tmp_path):
    path = tmp_path / "s.png"
    save_image(np.array([[1.0, 0.5, 0.0]]), path)
    assert np.asarray(Image.open(path)).tolist() == [[255, 128, 0]]


def test_save_rejects_out_of_range(tmp_path):
    with pytest.raises(ConfigError):
        save_image(np.array([[1.5]]), tmp_path / "bad.png")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3]), st.integers(0, 2**31))
def test_png_round_trip_is_exact(tmp_path_factory, h, w, c, seed):
    grid = np.random.default_rng(seed).integers(0, 256, size=(h, w, c)) / 255.0
    path = tmp_path_factory.mktemp("rt") / "x.png"
    save_image(grid, path)
    back = load_image(path)
    np.testing.assert_array_equal(back, grid)
    np.testing.assert_array_equal(quantize(back), quantize(grid))


@pytest.mark.parametrize("byte,bit", [(255, 1), (0, 0), (127, 0), (128, 1)])
def test_load_mask_threshold(tmp_path, byte, bit):
    assert load_mask(_png(tmp_path / "m.png", [[byte]]))[0, 0] == bit


def test_load_mask_rejects_multichannel(tmp_path):
    with pytest.raises(DecodeError):
        load_mask(_png(tmp_path / "m.png", np.zeros((2, 2, 3))))


def test_mask_round_trip(tmp_path):
    m = np.array([[0, 1], [1, 1]], dtype=np.uint8)
    save_mask(m, tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)


def _entries(n):
    return [ManifestEntry(f"img/{i}.png", f"mask/{i}.png", "nevus", ()) for i in range(n)]


def test_split_seven_one_two():
    split = split_dataset(_entries(1000), (7, 1, 2), seed=3)
    assert (len(split.train), len(split.val), len(split.test)) == (700, 100, 200)


def test_split_rejects_zero_ratio_and_empty():
    with pytest.raises(ConfigError):
        split_dataset(_entries(10), (1, 0, 1), seed=0)
    with pytest.raises(ConfigError):
        split_dataset([], (7, 1, 2), seed=0)


def test_split_is_deterministic():
    a = split_dataset(_entries(50), (7, 1, 2), seed=11)
    b = split_dataset(_entries(50), (7, 1, 2), seed=11)
    c = split_dataset(_entries(50), (7, 1, 2), seed=12)
    assert a == b
    assert a.train != c.train


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)),
       st.integers(0, 2**32))
def test_split_partitions(n, ratio, seed):
    split = split_dataset(list(range(n)), ratio, seed)
    parts = [split.train, split.val, split.test]
    assert sorted(split.train + split.val + split.test) == list(range(n))
    total = sum(ratio)
    assert len(split.val) == n * ratio[1] // total
    assert len(split.test) == n * ratio[2] // total
    assert sum(map(len, parts)) == n


def test_split_sizes_remainder_to_train():
    assert split_sizes(10, (1, 1, 1)) == (4, 3, 3)


def test_manifest_round_trip_and_vocabulary(tmp_path):
    entries = [ManifestEntry("a.png", "am.png", "melanoma", ("globules", "streaks")),
               ManifestEntry("b.png", "bm.png", "", ())]
    write_manifest(entries, tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert set(json.loads(lines[0])) == {"image_path", "mask_path", "lesion_type", "attributes"}
    assert read_manifest(tmp_path / "m.jsonl", Vocabulary()) == entries
    write_manifest([ManifestEntry("a.png", "am.png", "wart", ())], tmp_path / "bad.jsonl")
    with pytest.raises(VocabularyError, match="wart"):
        read_manifest(tmp_path / "bad.jsonl", Vocabulary())
    with pytest.raises(ConfigError):
        ManifestEntry("", "m.png")


def test_load_pairs_resolves_relative_paths(tmp_path):
    save_image(np.full((3, 3, 1), 0.2), tmp_path / "d" / "i.png")
    save_mask(np.eye(3, dtype=np.uint8), tmp_path / "d" / "m.png")
    write_manifest([ManifestEntry("i.png", "m.png")], tmp_path / "d" / "manifest.jsonl")
    [(img, mask, entry)] = load_pairs(tmp_path / "d" / "manifest.jsonl")
    assert img.shape == (3, 3, 1) and mask.sum() == 3 and entry.image_path == "i.png"
