import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mesostitch import fileio


def test_header_layout():
    hm = fileio.HeightMap(np.arange(6, dtype=np.float32).reshape(2, 3), 0.25, (-1.5, 2.0))
    blob = fileio.encode_height_map(hm)
    head, payload = blob.split(b"\n", 1)
    assert head.split() == [b"MESOH1", b"2", b"3", b"0.25", b"-1.5", b"2.0"]
    assert len(payload) == 2 * 3 * 4
    assert np.frombuffer(payload, "<f4")[4] == 4.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 7), st.integers(1, 7)),
              elements=st.floats(-1e3, 1e3, width=32) | st.just(np.nan)),
       st.floats(1e-3, 10), st.floats(-100, 100), st.floats(-100, 100))
def test_height_map_round_trip(data, pitch, ox, oy):
    hm = fileio.HeightMap(data, pitch, (ox, oy))
    back = fileio.decode_height_map(fileio.encode_height_map(hm))
    assert np.array_equal(back.data, data, equal_nan=True)
    assert back.pitch == pitch and back.origin == (ox, oy)


@pytest.mark.parametrize("blob", [b"", b"no newline", b"MESOH2 1 1 1 0 0\n\0\0\0\0",
                                  b"MESOH1 2 2 1 0 0\n\0\0\0\0"])
def test_bad_height_blobs(blob):
    with pytest.raises(fileio.FormatError):
        fileio.decode_height_map(blob)


def test_rgb_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
    for name in ("a.png", "a.ppm"):
        fileio.write_rgb(tmp_path / name, img)
        assert np.allclose(fileio.read_rgb(tmp_path / name), img, atol=1e-6)
    assert [p.rsplit("/", 1)[-1] for p in fileio.list_frames(tmp_path)] == ["a.png", "a.ppm"]


def test_downsample_block_mean():
    img = np.arange(2 * 4 * 6, dtype=float).reshape(2, 4, 6)
    out = fileio.downsample_image(img, 2)
    assert out.shape == (2, 2, 3)
    assert out[0, 0, 0] == np.mean([0, 1, 6, 7])
    assert fileio.downsample_image(img, 1) is img


def test_keyvalue():
    kv = fileio.parse_keyvalue("a = 1\n# comment\n\nb= x y  # trailing\n")
    assert kv == {"a": "1", "b": "x y"}
    assert fileio.parse_keyvalue(fileio.format_keyvalue(kv)) == kv
    with pytest.raises(fileio.FormatError):
        fileio.parse_keyvalue("no equals sign")
