"""Bit-level primitives over IEEE-754 single-precision words.

Bit 0 is the mantissa LSB, bits 23-30 the exponent, bit 31 the sign.  All
arithmetic happens on the raw 32-bit word, never through float negation, so
NaN payloads and signed zeros survive unchanged.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np

SIGN_BIT = 31
SIGN_MASK = 0x8000_0000
EXPONENT_MASK = 0x7F80_0000
MANTISSA_MASK = 0x007F_FFFF
WORD_MASK = 0xFFFF_FFFF


class Fields(NamedTuple):
    sign: int
    exponent: int
    mantissa: int


def _check_word(w: int) -> int:
    if not 0 <= w <= WORD_MASK:
        raise ValueError(f"not a 32-bit word: {w!r}")
    return w


def float_to_bits(value: float) -> int:
    """Raw word of ``value`` rounded to FP32 (payload-preserving for FP32 NaNs)."""
    if isinstance(value, np.float32):
        return int(np.asarray(value).view(np.uint32))
    return struct.unpack("<I", struct.pack("<f", value))[0]


def bits_to_float(w: int) -> np.float32:
    # struct would route through a C double and may quiet signalling NaNs
    return np.array([_check_word(w)], dtype=np.uint32).view(np.float32)[0]


def decompose(w: int) -> Fields:
    _check_word(w)
    return Fields(w >> 31, (w & EXPONENT_MASK) >> 23, w & MANTISSA_MASK)


def reassemble(sign: int, exponent: int, mantissa: int) -> int:
    if sign not in (0, 1):
        raise ValueError(f"sign must be 0 or 1, got {sign}")
    if not 0 <= exponent <= 0xFF:
        raise ValueError(f"exponent out of range: {exponent}")
    if not 0 <= mantissa <= MANTISSA_MASK:
        raise ValueError(f"mantissa out of range: {mantissa}")
    return (sign << 31) | (exponent << 23) | mantissa


def flip_bit(w: int, pos: int) -> int:
    _check_word(w)
    if not 0 <= pos <= 31:
        raise ValueError(f"bit position must be in [0, 31], got {pos}")
    return w ^ (1 << pos)


def flip_sign(value: float) -> np.float32:
    """Negate an FP32 value by toggling bit 31 only."""
    return bits_to_float(flip_bit(float_to_bits(value), SIGN_BIT))


def sign_of(value: float) -> int:
    return float_to_bits(value) >> 31


# Vectorised forms over FP32 arrays.  They return new arrays.

def flip_bits_array(values: np.ndarray, flat_indices, positions) -> np.ndarray:
    """Toggle bit ``positions[j]`` of element ``flat_indices[j]``.

    Indices may repeat with different positions; the same (index, position)
    pair appearing twice cancels out.
    """
    words = np.ascontiguousarray(values, dtype=np.float32).copy().view(np.uint32).reshape(-1)
    idx = np.asarray(flat_indices, dtype=np.int64)
    pos = np.asarray(positions, dtype=np.int64)
    if idx.shape != pos.shape:
        raise ValueError("flat_indices and positions must have equal length")
    if pos.size and (pos.min() < 0 or pos.max() > 31):
        raise ValueError("bit positions must be in [0, 31]")
    masks = np.left_shift(np.uint32(1), pos.astype(np.uint32))
    np.bitwise_xor.at(words, idx, masks)
    return words.view(np.float32).reshape(np.shape(values))


def sign_bits_array(values: np.ndarray) -> np.ndarray:
    return (np.ascontiguousarray(values, dtype=np.float32).view(np.uint32) >> 31).astype(np.uint8)
