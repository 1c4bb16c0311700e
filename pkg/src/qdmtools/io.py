"""Binary containers: QDMS (ODMR stacks) and QDMF (field maps).

Both are an 8-byte magic, an 8-byte little-endian header length, a UTF-8
JSON header and a raw little-endian payload.

QDMS payload: q*m*n float32, q outermost then rows then columns.
QDMF payload: components*m*n float64 fields, then 4*m*n float64 ZFS values
(if ``zfs_maps``), then m*n float64 fit residuals (if ``residuals``), then
m*n mask bytes (1 = valid, 0 = masked).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from qdmtools.errors import FormatError
from qdmtools.mapping import FieldMap, OdmrStack
from qdmtools.spectra import PolarizationDrive

STACK_MAGIC = b"QDMSTACK"
FIELD_MAGIC = b"QDMFIELD"
SCHEMA_VERSION = 1


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<Q", len(head)) + head + payload


def _unpack(blob: bytes, magic: bytes) -> tuple[dict, memoryview]:
    if len(blob) < 16:
        raise FormatError("file shorter than the 16-byte preamble", invariant="preamble")
    if blob[:8] != magic:
        raise FormatError(f"bad magic {bytes(blob[:8])!r}, expected {magic!r}", invariant="magic")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise FormatError("header length exceeds file size", invariant="header_len")
    try:
        header = json.loads(bytes(blob[16 : 16 + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}", invariant="header_json") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", invariant="header_json")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {header.get('schema_version')!r}", invariant="schema_version")
    return header, memoryview(blob)[16 + hlen :]


def _require(header: dict, keys) -> None:
    missing = [k for k in keys if k not in header]
    if missing:
        raise FormatError(f"header is missing {missing}", invariant="header_keys")


def _dims(header: dict, keys) -> list[int]:
    out = []
    for k in keys:
        v = header[k]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise FormatError(f"header field {k} must be a positive integer", invariant="dimensions")
        out.append(v)
    return out


# ---------------------------------------------------------------------------
# stacks


def stack_to_bytes(stack: OdmrStack, seed=None) -> bytes:
    """Serialize a stack. Fluorescence is stored as float32."""
    header = {
        "m": stack.m,
        "n": stack.n,
        "q": stack.q,
        "freqs_ghz": stack.freqs.tolist(),
        "pixel_pitch_m": stack.pixel_pitch,
        "mode": stack.mode.value,
        "bias_field_t": stack.bias_field.tolist(),
        "polarization": None if stack.polarization is None else stack.polarization.to_dict(),
        "averages": int(stack.averages),
        "seed": stack.metadata.get("seed", seed),
        "nv_orientation": int(stack.orientation),
        "metadata": stack.metadata,
        "schema_version": SCHEMA_VERSION,
    }
    payload = np.ascontiguousarray(stack.data, dtype="<f4").tobytes()
    return _pack(STACK_MAGIC, header, payload)


def stack_from_bytes(blob: bytes) -> OdmrStack:
    header, payload = _unpack(blob, STACK_MAGIC)
    _require(header, ("m", "n", "q", "freqs_ghz", "pixel_pitch_m", "mode", "bias_field_t", "averages"))
    m, n, q = _dims(header, ("m", "n", "q"))
    if len(payload) != 4 * q * m * n:
        raise FormatError(f"payload is {len(payload)} bytes, expected 4*q*m*n = {4 * q * m * n}",
                          invariant="payload_length")
    freqs = header["freqs_ghz"]
    if not isinstance(freqs, list) or len(freqs) != q:
        raise FormatError("freqs_ghz must list q frequencies", invariant="freqs")
    data = np.frombuffer(payload, dtype="<f4").reshape(q, m, n).astype(np.float32)
    try:
        pol = header.get("polarization")
        return OdmrStack(
            freqs=np.array(freqs, dtype=float),
            data=data,
            pixel_pitch=header["pixel_pitch_m"],
            mode=header["mode"],
            bias_field=header["bias_field_t"],
            polarization=None if pol is None else PolarizationDrive.from_dict(pol),
            averages=header["averages"],
            orientation=header.get("nv_orientation", 1),
            metadata=header.get("metadata") or {},
        )
    except (ValueError, TypeError) as exc:
        raise FormatError(f"stack header/payload inconsistent: {exc}", invariant="stack") from None


def write_stack(path, stack: OdmrStack, seed=None) -> None:
    Path(path).write_bytes(stack_to_bytes(stack, seed))


def read_stack(path) -> OdmrStack:
    return stack_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# field maps


def map_to_bytes(fmap: FieldMap) -> bytes:
    header = {
        "m": fmap.m,
        "n": fmap.n,
        "components": fmap.components,
        "zfs_maps": fmap.zfs_maps is not None,
        "residuals": True,
        "pixel_pitch_m": fmap.pixel_pitch,
        "mask_encoding": "uint8 per pixel after field payload, 1 = valid",
        "schema_version": SCHEMA_VERSION,
    }
    parts = [np.ascontiguousarray(fmap.field, dtype="<f8").tobytes()]
    if fmap.zfs_maps is not None:
        parts.append(np.ascontiguousarray(fmap.zfs_maps, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(fmap.residuals, dtype="<f8").tobytes())
    parts.append(fmap.mask.astype(np.uint8).tobytes())
    return _pack(FIELD_MAGIC, header, b"".join(parts))


def map_from_bytes(blob: bytes) -> FieldMap:
    header, payload = _unpack(blob, FIELD_MAGIC)
    _require(header, ("m", "n", "components", "zfs_maps", "pixel_pitch_m"))
    m, n, c = _dims(header, ("m", "n", "components"))
    if c not in (1, 3):
        raise FormatError("components must be 1 or 3", invariant="components")
    has_zfs = bool(header["zfs_maps"])
    has_res = bool(header.get("residuals", False))
    mn = m * n
    sizes = [8 * c * mn, 8 * 4 * mn if has_zfs else 0, 8 * mn if has_res else 0, mn]
    if len(payload) != sum(sizes):
        raise FormatError(f"payload is {len(payload)} bytes, expected {sum(sizes)}", invariant="payload_length")
    offs = np.cumsum([0] + sizes)
    field = np.frombuffer(payload[offs[0] : offs[1]], dtype="<f8").reshape(c, m, n).astype(float)
    zfs = np.frombuffer(payload[offs[1] : offs[2]], dtype="<f8").reshape(4, m, n).astype(float) if has_zfs else None
    res = np.frombuffer(payload[offs[2] : offs[3]], dtype="<f8").reshape(m, n).astype(float) if has_res else None
    mask_raw = np.frombuffer(payload[offs[3] : offs[4]], dtype=np.uint8).reshape(m, n)
    if np.any(mask_raw > 1):
        raise FormatError("mask bytes must be 0 or 1", invariant="mask")
    try:
        return FieldMap(field, header["pixel_pitch_m"], mask_raw.astype(bool), res, zfs)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"field map inconsistent: {exc}", invariant="field_map") from None


def write_map(path, fmap: FieldMap) -> None:
    Path(path).write_bytes(map_to_bytes(fmap))


def read_map(path) -> FieldMap:
    return map_from_bytes(Path(path).read_bytes())
