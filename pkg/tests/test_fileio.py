import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from v2s import fileio
from v2s.fileio import FormatError


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=6), elements=st.floats(width=32, allow_nan=False)))
def test_tensor_round_trip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "x.v2st"
    fileio.write_tensor(path, arr)
    back = fileio.read_tensor(path)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.astype("<f4").tobytes()


def test_tensor_layout():
    buf = fileio.tensor_bytes(np.zeros((2, 3)))
    assert buf[:4] == b"V2ST"
    assert struct.unpack_from("<3I", buf, 4) == (2, 2, 3)
    assert len(buf) == 4 + 4 + 8 + 24


def test_tensor_bad_magic(tmp_path):
    p = tmp_path / "bad.v2st"
    p.write_bytes(b"XXXX" + fileio.tensor_bytes(np.ones(3))[4:])
    with pytest.raises(FormatError, match="byte 0") as exc:
        fileio.read_tensor(p)
    assert str(p) in str(exc.value)


@pytest.mark.parametrize("cut, where", [(6, "rank"), (10, "dims"), (30, "payload")])
def test_tensor_truncation_reports_offset(tmp_path, cut, where):
    p = tmp_path / "t.v2st"
    p.write_bytes(fileio.tensor_bytes(np.ones((2, 4)))[:cut])
    with pytest.raises(FormatError, match=where) as exc:
        fileio.read_tensor(p)
    assert exc.value.offset <= cut


def test_tensor_trailing_bytes(tmp_path):
    p = tmp_path / "t.v2st"
    p.write_bytes(fileio.tensor_bytes(np.ones(2)) + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        fileio.read_tensor(p)


def test_wav_size(tmp_path):
    p = tmp_path / "a.wav"
    fileio.write_wav(p, np.zeros(16000), 16000)
    assert p.stat().st_size == 44 + 32000


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-32767, 32767), min_size=1, max_size=200), st.sampled_from([8000, 16000, 44100]))
def test_wav_round_trip_pcm_exact(tmp_path_factory, ints, rate):
    x = np.array(ints) / 32767.0
    p = tmp_path_factory.mktemp("w") / "a.wav"
    fileio.write_wav(p, x, rate)
    y, r = fileio.read_wav(p)
    assert r == rate
    np.testing.assert_array_equal(y, x)


def test_wav_clips_out_of_range(tmp_path):
    p = tmp_path / "a.wav"
    fileio.write_wav(p, np.array([2.0, -3.0]), 16000)
    np.testing.assert_array_equal(fileio.read_wav(p)[0], [1.0, -1.0])


def test_wav_rejects_stereo(tmp_path):
    p = tmp_path / "s.wav"
    fileio.write_wav(p, np.zeros(4), 16000)
    buf = bytearray(p.read_bytes())
    struct.pack_into("<H", buf, 22, 2)
    p.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="unsupported"):
        fileio.read_wav(p)


def test_wav_not_riff(tmp_path):
    p = tmp_path / "n.wav"
    p.write_bytes(b"hello world, not audio")
    with pytest.raises(FormatError, match="RIFF"):
        fileio.read_wav(p)


def test_wav_skips_unknown_chunks(tmp_path):
    p = tmp_path / "a.wav"
    fileio.write_wav(p, np.array([0.5, -0.5]), 16000)
    buf = p.read_bytes()
    extra = b"LIST" + struct.pack("<I", 3) + b"abc\0"
    p.write_bytes(buf[:36] + extra + buf[36:])
    y, _ = fileio.read_wav(p)
    np.testing.assert_allclose(y, [0.5, -0.5], atol=1 / 32767)


def test_pgm_size_and_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(160, 128), dtype=np.uint8)
    p = tmp_path / "f.pgm"
    fileio.write_pgm(p, img)
    header = b"P5\n128 160\n255\n"
    assert p.read_bytes()[: len(header)] == header
    assert p.stat().st_size == len(header) + 20480
    np.testing.assert_array_equal(fileio.read_pgm(p), img)


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x07\x09")
    np.testing.assert_array_equal(fileio.read_pgm(p), [[7, 9]])


@pytest.mark.parametrize(
    "content, match",
    [(b"P6\n2 1\n255\n\0\0", "magic"), (b"P5\n2 1\n65535\n\0\0", "8-bit"), (b"P5\n2 2\n255\n\0", "truncated")],
)
def test_pgm_errors(tmp_path, content, match):
    p = tmp_path / "e.pgm"
    p.write_bytes(content)
    with pytest.raises(FormatError, match=match):
        fileio.read_pgm(p)
