"""Bit-vector codes for sign-bit sidecars.

Hamming SEC-DED (64, 57): codeword position 0 is the overall parity bit,
positions 1, 2, 4, 8, 16, 32 are Hamming check bits, and the remaining 57
positions carry data bits in increasing position order.  A block is stored
as 64 bits with bit ``p`` of the block at codeword position ``p``.
"""

from __future__ import annotations

import numpy as np

BLOCK_BITS = 64
DATA_BITS = 57
CHECK_POSITIONS = np.array([1, 2, 4, 8, 16, 32])
PARITY_POSITIONS = np.concatenate([[0], CHECK_POSITIONS])
DATA_POSITIONS = np.array([p for p in range(1, BLOCK_BITS) if p & (p - 1)])
assert DATA_POSITIONS.size == DATA_BITS

# position p contributes to syndrome bit j when bit j of p is set
_SYNDROME = ((np.arange(BLOCK_BITS)[:, None] >> np.arange(6)[None, :]) & 1).astype(np.int64)


def replicate3_encode(bits: np.ndarray) -> np.ndarray:
    """Each bit stored three times in a row: [a, b] -> [a, a, a, b, b, b]."""
    return np.repeat(np.asarray(bits, dtype=np.uint8), 3)


def replicate3_decode(payload: np.ndarray) -> np.ndarray:
    """Bitwise majority of each triple."""
    triples = np.asarray(payload, dtype=np.uint8).reshape(-1, 3)
    return (triples.sum(axis=1) >= 2).astype(np.uint8)


def hamming_blocks(n_data: int) -> int:
    return -(-n_data // DATA_BITS)


def _syndrome(code: np.ndarray) -> np.ndarray:
    s = (code.astype(np.int64) @ _SYNDROME) & 1
    return (s << np.arange(6)).sum(axis=1)


def hamming_encode(bits: np.ndarray) -> np.ndarray:
    """Data bits (zero-padded to whole blocks) -> flat codeword bits, 64 per block."""
    bits = np.asarray(bits, dtype=np.uint8)
    nb = hamming_blocks(bits.size)
    data = np.zeros(nb * DATA_BITS, dtype=np.uint8)
    data[:bits.size] = bits
    code = np.zeros((nb, BLOCK_BITS), dtype=np.uint8)
    code[:, DATA_POSITIONS] = data.reshape(nb, DATA_BITS)
    syn = _syndrome(code)
    for j, p in enumerate(CHECK_POSITIONS):
        code[:, p] = (syn >> j) & 1
    code[:, 0] = code[:, 1:].sum(axis=1) & 1
    return code.reshape(-1)


def hamming_decode(code: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode flat codeword bits.

    Returns ``(data_bits, corrected_position, uncorrectable)`` per block:
    ``corrected_position`` is the flipped codeword position that was fixed
    (-1 if none) and ``uncorrectable`` flags blocks with a detected double
    error, whose data bits are returned as received.
    """
    code = np.asarray(code, dtype=np.uint8).reshape(-1, BLOCK_BITS).copy()
    syn = _syndrome(code)
    odd = (code.sum(axis=1) & 1).astype(bool)
    corrected = np.full(code.shape[0], -1, dtype=np.int64)
    single = odd  # odd overall parity: one error at position syn (0 means the parity bit itself)
    rows = np.nonzero(single)[0]
    code[rows, syn[rows]] ^= 1
    corrected[rows] = syn[rows]
    double = (~odd) & (syn != 0)
    return code[:, DATA_POSITIONS].reshape(-1), corrected, double


def pack_bits(bits: np.ndarray) -> bytes:
    """Little-endian bit packing: bit i goes to byte i // 8, bit i % 8."""
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def unpack_bits(buf: bytes, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[:n]
