import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meshnet.errors import BadMagic, OutOfBounds, TruncatedFile, UnsupportedVersion
from meshnet.volume import (LabelVolume, SubvolumeRef, Volume, extract_subvolume, read_volume,
                            write_volume)


def coord_volume():
    z = np.arange(8, dtype=np.float32).reshape(8, 1, 1)
    return Volume(np.broadcast_to(z, (8, 8, 8))[None])


def test_extract_identity():
    vol = Volume(np.random.default_rng(0).random((1, 8, 8, 8)))
    assert extract_subvolume(vol, SubvolumeRef((0, 0, 0), 8)) == vol


def test_extract_offset():
    sub = extract_subvolume(coord_volume(), SubvolumeRef((2, 0, 0), 4))
    assert sub.data.shape == (1, 4, 4, 4)
    assert sub.data[0, 0, 0, 0] == 2


def test_extract_out_of_bounds():
    with pytest.raises(OutOfBounds):
        extract_subvolume(coord_volume(), SubvolumeRef((5, 0, 0), 4))
    with pytest.raises(OutOfBounds):
        extract_subvolume(coord_volume(), SubvolumeRef((0, -1, 0), 4))


def test_extract_copies():
    vol = coord_volume()
    sub = extract_subvolume(vol, SubvolumeRef((0, 0, 0), 2))
    assert not np.shares_memory(sub.data, vol.data)


def test_volume_rejects_nonfinite():
    with pytest.raises(ValueError):
        Volume(np.array([[[[np.nan]]]]))


def test_labels_in_range():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 3), 3)


@st.composite
def volume_and_ref(draw):
    m = draw(st.integers(1, 3))
    dims = draw(st.tuples(*[st.integers(1, 7)] * 3))
    side = draw(st.integers(1, min(dims)))
    origin = tuple(draw(st.integers(0, d - side)) for d in dims)
    data = draw(arrays(np.float32, (m,) + dims, elements=st.floats(-1e3, 1e3, width=32)))
    return Volume(data), SubvolumeRef(origin, side)


@given(volume_and_ref())
def test_extract_matches_index_formula(case):
    vol, ref = case
    sub = extract_subvolume(vol, ref).data
    oz, oy, ox = ref.origin
    for c in range(vol.channels):
        for z in range(ref.side):
            for y in range(ref.side):
                for x in range(ref.side):
                    assert sub[c, z, y, x] == vol.data[c, oz + z, oy + y, ox + x]


@settings(max_examples=50)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_float_roundtrip_bitwise(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("v") / "a.vvol"
    write_volume(Volume(data), path)
    back = read_volume(path)
    assert back.data.tobytes() == np.ascontiguousarray(data).tobytes()


@settings(max_examples=50)
@given(st.integers(1, 256).flatmap(lambda n: st.tuples(
    st.just(n), arrays(np.uint8, st.tuples(*[st.integers(1, 5)] * 3), elements=st.integers(0, n - 1)))))
def test_label_roundtrip_bitwise(tmp_path_factory, case):
    n, labels = case
    path = tmp_path_factory.mktemp("l") / "a.vvol"
    write_volume(LabelVolume(labels, n), path)
    back = read_volume(path)
    assert isinstance(back, LabelVolume)
    assert back.num_classes == n
    assert back.labels.tobytes() == labels.tobytes()


def test_header_layout(tmp_path):
    path = tmp_path / "h.vvol"
    write_volume(Volume(np.ones((2, 3, 4, 5), np.float32)), path)
    raw = path.read_bytes()
    assert raw[:4] == b"VVOL"
    assert struct.unpack_from("<6I", raw, 4) == (1, 1, 2, 3, 4, 5)
    assert len(raw) == 28 + 4 * 120
    assert struct.unpack_from("<f", raw, 28)[0] == 1.0

    write_volume(LabelVolume(np.zeros((2, 2, 2), np.uint8), 3), path)
    raw = path.read_bytes()
    assert struct.unpack_from("<6I", raw, 4) == (1, 2, 1, 2, 2, 2)
    assert struct.unpack_from("<I", raw, 28 + 8)[0] == 3


def test_bad_magic(tmp_path):
    path = tmp_path / "x.vvol"
    write_volume(Volume(np.ones((1, 2, 2, 2))), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(BadMagic):
        read_volume(path)


def test_truncated(tmp_path):
    path = tmp_path / "t.vvol"
    write_volume(Volume(np.ones((1, 4, 4, 4))), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(TruncatedFile):
        read_volume(path)
    path.write_bytes(b"VVOL\x01\x00")
    with pytest.raises(TruncatedFile):
        read_volume(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "v.vvol"
    write_volume(Volume(np.ones((1, 2, 2, 2))), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersion):
        read_volume(path)
