import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qdmtools.errors import FormatError
from qdmtools.io import (
    map_from_bytes,
    map_to_bytes,
    read_map,
    read_stack,
    stack_from_bytes,
    stack_to_bytes,
    write_map,
    write_stack,
)
from qdmtools.mapping import FieldMap, OdmrStack
from qdmtools.spectra import PolarizationDrive

dims = st.tuples(st.integers(2, 6), st.integers(1, 5), st.integers(1, 5))


@st.composite
def stacks(draw):
    q, m, n = draw(dims)
    data = draw(hnp.arrays(np.float32, (q, m, n), elements=st.floats(0, 1e6, width=32)))
    mode = draw(st.sampled_from(["VMM", "PMM", "CPMM"]))
    freqs = np.cumsum(draw(hnp.arrays(float, q, elements=st.floats(1e-4, 0.1)))) + 2.7
    bias = draw(hnp.arrays(float, 3, elements=st.floats(-1e-2, 1e-2)))
    pol = PolarizationDrive(draw(st.sampled_from(["sigma_plus", "sigma_minus"]))) if mode == "CPMM" else None
    return OdmrStack(freqs, data, draw(st.floats(1e-7, 1e-4)), mode, bias, pol,
                     draw(st.integers(1, 100)), draw(st.integers(1, 4)), {"seed": draw(st.integers(0, 2**31))})


@st.composite
def field_maps(draw):
    c = draw(st.sampled_from([1, 3]))
    m, n = draw(st.integers(1, 6)), draw(st.integers(1, 6))
    f = draw(hnp.arrays(float, (c, m, n), elements=st.floats(-1e-2, 1e-2)))
    mask = draw(hnp.arrays(bool, (m, n)))
    res = draw(hnp.arrays(float, (m, n), elements=st.floats(0, 1)))
    zfs = draw(st.none() | hnp.arrays(float, (4, m, n), elements=st.floats(2.8, 2.9)))
    return FieldMap(f, draw(st.floats(1e-7, 1e-4)), mask, res, zfs if c == 3 else None)


def _same_stack(a, b):
    assert np.array_equal(a.data, b.data) and a.data.dtype == np.float32
    assert np.array_equal(a.freqs, b.freqs) and np.array_equal(a.bias_field, b.bias_field)
    assert (a.mode, a.pixel_pitch, a.averages, a.orientation) == (b.mode, b.pixel_pitch, b.averages, b.orientation)
    assert a.polarization == b.polarization
    assert a.metadata == b.metadata


def _same_map(a, b):
    assert np.array_equal(a.field, b.field, equal_nan=True)
    assert np.array_equal(a.mask, b.mask) and np.array_equal(a.residuals, b.residuals)
    assert a.pixel_pitch == b.pixel_pitch
    if a.zfs_maps is None:
        assert b.zfs_maps is None
    else:
        assert np.array_equal(a.zfs_maps, b.zfs_maps, equal_nan=True)


@given(stacks())
def test_stack_round_trip_is_exact(s):
    blob = stack_to_bytes(s)
    _same_stack(s, stack_from_bytes(blob))
    assert stack_to_bytes(stack_from_bytes(blob)) == blob


@given(field_maps())
def test_map_round_trip_is_exact(fm):
    blob = map_to_bytes(fm)
    _same_map(fm, map_from_bytes(blob))
    assert map_to_bytes(map_from_bytes(blob)) == blob


def _small_stack():
    return OdmrStack([2.8, 2.85, 2.9], np.arange(12, dtype=np.float32).reshape(3, 2, 2), 1e-6, "VMM")


def test_stack_layout_is_little_endian_q_outermost():
    blob = stack_to_bytes(_small_stack())
    assert blob[:8] == b"QDMSTACK"
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen])
    assert header["schema_version"] == 1 and (header["q"], header["m"], header["n"]) == (3, 2, 2)
    payload = blob[16 + hlen :]
    assert len(payload) == 4 * 12
    assert struct.unpack("<12f", payload) == tuple(float(v) for v in range(12))


def test_map_layout():
    fm = FieldMap(np.arange(4.0).reshape(1, 2, 2), 1e-6, np.array([[True, False], [True, True]]))
    blob = map_to_bytes(fm)
    (hlen,) = struct.unpack("<Q", blob[8:16])
    payload = blob[16 + hlen :]
    assert struct.unpack("<d", payload[:8])[0] == 0.0
    assert payload[-4:] == bytes([1, 0, 1, 1])


@pytest.mark.parametrize(
    "mangle, invariant",
    [
        (lambda b: b"XXXXXXXX" + b[8:], "magic"),
        (lambda b: b[:10], "preamble"),
        (lambda b: b[:-1], "payload_length"),
        (lambda b: b + b"\0", "payload_length"),
        (lambda b: b[:8] + struct.pack("<Q", 10**9) + b[16:], "header_len"),
    ],
)
def test_corrupt_stacks_name_invariant(mangle, invariant):
    with pytest.raises(FormatError) as info:
        stack_from_bytes(mangle(stack_to_bytes(_small_stack())))
    assert info.value.invariant == invariant


def _rewrite_header(blob, magic, edit):
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen])
    edit(header)
    head = json.dumps(header).encode()
    return magic + struct.pack("<Q", len(head)) + head + blob[16 + hlen :]


def test_bad_schema_version_and_header():
    blob = stack_to_bytes(_small_stack())
    with pytest.raises(FormatError, match="schema_version"):
        stack_from_bytes(_rewrite_header(blob, b"QDMSTACK", lambda h: h.update(schema_version=2)))
    with pytest.raises(FormatError) as info:
        stack_from_bytes(_rewrite_header(blob, b"QDMSTACK", lambda h: h.pop("freqs_ghz")))
    assert info.value.invariant == "header_keys"
    with pytest.raises(FormatError) as info:
        stack_from_bytes(_rewrite_header(blob, b"QDMSTACK", lambda h: h.update(m=-2)))
    assert info.value.invariant == "dimensions"


def test_bad_mask_byte():
    blob = bytearray(map_to_bytes(FieldMap(np.zeros((1, 2, 2)), 1e-6)))
    blob[-1] = 7
    with pytest.raises(FormatError) as info:
        map_from_bytes(bytes(blob))
    assert info.value.invariant == "mask"


def test_wrong_container_kind():
    with pytest.raises(FormatError):
        map_from_bytes(stack_to_bytes(_small_stack()))


def test_file_helpers(tmp_path):
    s = _small_stack()
    write_stack(tmp_path / "a.qdms", s)
    _same_stack(s, read_stack(tmp_path / "a.qdms"))
    fm = FieldMap(np.ones((3, 2, 2)), 2e-6)
    write_map(tmp_path / "a.qdmf", fm)
    _same_map(fm, read_map(tmp_path / "a.qdmf"))
