"""Compressed-image file container.

Fixed little-endian layout:

    magic "NCNB" (4B) | version u16 | H u32 | W u32 | N u16 | N_h u16 |
    lambda_id u8 | len_b2 u32 | len_b1 u32 | b2 | b1

H and W are the original (pre-padding) image dimensions. b2 carries the
hyper latent, b1 the main latent residuals.
"""

import struct
from dataclasses import dataclass

from .errors import BitstreamError

MAGIC = b"NCNB"
VERSION = 1

_HEADER = struct.Struct("<4sHIIHHBII")
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class BitstreamParts:
    version: int
    height: int
    width: int
    latent_channels: int
    hyper_channels: int
    lambda_id: int
    b2: bytes
    b1: bytes


def pack_bitstream(height, width, latent_channels, hyper_channels, lambda_id, b1, b2):
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        height,
        width,
        latent_channels,
        hyper_channels,
        lambda_id,
        len(b2),
        len(b1),
    )
    return header + bytes(b2) + bytes(b1)


def unpack_bitstream(data):
    if len(data) < HEADER_SIZE:
        raise BitstreamError(f"stream too short for header ({len(data)} bytes)")
    magic, version, h, w, n, n_h, lambda_id, len_b2, len_b1 = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}")
    if len(data) != HEADER_SIZE + len_b2 + len_b1:
        raise BitstreamError(
            f"payload length mismatch: header says {len_b2}+{len_b1}, "
            f"got {len(data) - HEADER_SIZE}"
        )
    b2 = data[HEADER_SIZE : HEADER_SIZE + len_b2]
    b1 = data[HEADER_SIZE + len_b2 :]
    return BitstreamParts(
        version=version,
        height=h,
        width=w,
        latent_channels=n,
        hyper_channels=n_h,
        lambda_id=lambda_id,
        b2=bytes(b2),
        b1=bytes(b1),
    )
