"""Shared `magic + JSON line + little-endian f32 payload` file layout."""
import json

from .exceptions import DatasetFormatError


def encode_header(magic: bytes, header: dict) -> bytes:
    return magic + json.dumps(header, sort_keys=True).encode('utf-8') + b'\n'


def read_header(raw: bytes, magic: bytes):
    """Parse `magic + JSON + newline`; returns the header and the payload offset."""
    if raw[:len(magic)] != magic:
        raise DatasetFormatError(f"Bad magic: expected {magic!r}, got {raw[:len(magic)]!r}")
    end = raw.find(b'\n', len(magic))
    if end < 0:
        raise DatasetFormatError("Header is not newline-terminated")
    try:
        header = json.loads(raw[len(magic):end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"Header is not valid UTF-8 JSON: {e}")
    if not isinstance(header, dict):
        raise DatasetFormatError("Header must be a JSON object")
    return header, end + 1
