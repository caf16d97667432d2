from __future__ import annotations

"""Format binaire des packfiles (arithmétique pure, sans E/S).

En-tête : b"QSVW" | u8 version | u32 nombre de tenseurs
Enregistrement :
    u32 longueur du nom | nom UTF-8
    u32 rang | u32 dims...
    u8 schéma (0=uniform, 1=pot, 255=fp32) | u8 bitwidth
    f32 alpha | f32 mu | f32 sigma
    charge utile (codes sur b bits, LSB d'abord ; ou float32 bruts)
    u32 CRC-32 de la charge utile
Tout est little-endian.
"""

import math
import struct
from typing import Optional, Sequence, Tuple

MAGIC = b"QSVW"
VERSION = 1
SCHEME_FP32 = 255
FP32_BITS = 32

HEADER = struct.Struct("<4sBI")
U32 = struct.Struct("<I")
META = struct.Struct("<BBfff")  # schéma, bits, alpha, mu, sigma : 14 octets

HEADER_BYTES = HEADER.size


def payload_nbytes(num_elements: int, bits: Optional[int]) -> int:
    """``bits`` None → float32 brut."""
    if bits is None or bits == FP32_BITS:
        return 4 * int(num_elements)
    return int(math.ceil(int(num_elements) * int(bits) / 8))


def record_nbytes(name: str, shape: Sequence[int], bits: Optional[int]) -> int:
    n = 1
    for d in shape:
        n *= int(d)
    name_b = name.encode("utf-8")
    return (
        U32.size + len(name_b)
        + U32.size * (1 + len(shape))
        + META.size
        + payload_nbytes(n, bits)
        + U32.size
    )


def file_nbytes(records: Sequence[Tuple[str, Sequence[int], Optional[int]]]) -> int:
    return HEADER_BYTES + sum(record_nbytes(name, shape, bits) for name, shape, bits in records)
