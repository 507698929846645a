"""CRC-32C (Castagnoli) computed with numpy.

A plain per-byte loop is far too slow in Python for multi-megabyte payloads,
so this uses the linearity of CRC over GF(2): every byte's contribution is a
table lookup, and contributions of adjacent blocks combine as
``crc(A||B) = advance_len(B)(crc(A)) XOR crc(B)`` where ``advance`` (feeding
zero bytes) is a linear map represented by four 256-entry tables. Doubling the
tables gives advance-by-2^k; a message is reduced pairwise in log2(n) fully
vectorized passes. Data is processed in bounded chunks so peak memory stays a
few times the chunk size.
"""

from __future__ import annotations

import numpy as np

_POLY = 0x82F63B78  # reflected Castagnoli polynomial
_CHUNK = 1 << 20

_BYTE_TABLE: np.ndarray | None = None
_ADVANCE_TABLES: list[np.ndarray] = []  # [level][4, 256] uint32; level k advances 2^k bytes


def _byte_table() -> np.ndarray:
    global _BYTE_TABLE
    if _BYTE_TABLE is None:
        table = np.zeros(256, dtype=np.uint32)
        for b in range(256):
            crc = b
            for _ in range(8):
                crc = (crc >> 1) ^ (_POLY if crc & 1 else 0)
            table[b] = crc
        _BYTE_TABLE = table
    return _BYTE_TABLE


def _apply_tables(tables: np.ndarray, regs: np.ndarray) -> np.ndarray:
    """Advance a vector of registers using one [4, 256] table set."""
    return (
        tables[0][regs & 0xFF]
        ^ tables[1][(regs >> 8) & 0xFF]
        ^ tables[2][(regs >> 16) & 0xFF]
        ^ tables[3][(regs >> 24) & 0xFF]
    )


def _advance_tables(level: int) -> np.ndarray:
    """Tables advancing a register by 2**level zero bytes."""
    while len(_ADVANCE_TABLES) <= level:
        if not _ADVANCE_TABLES:
            t = _byte_table()
            b = np.arange(256, dtype=np.uint32)
            one = np.empty((4, 256), dtype=np.uint32)
            # One zero byte: reg -> (reg >> 8) ^ T[reg & 0xFF].
            one[0] = t[b]
            one[1] = b
            one[2] = b << np.uint32(8)
            one[3] = b << np.uint32(16)
            _ADVANCE_TABLES.append(one)
        else:
            prev = _ADVANCE_TABLES[-1]
            _ADVANCE_TABLES.append(
                np.stack([_apply_tables(prev, prev[j]) for j in range(4)])
            )
    return _ADVANCE_TABLES[level]


def _advance(reg: int, nbytes: int) -> int:
    """Advance a single register by ``nbytes`` zero bytes."""
    regs = np.array([reg], dtype=np.uint32)
    level = 0
    while nbytes:
        if nbytes & 1:
            regs = _apply_tables(_advance_tables(level), regs)
        nbytes >>= 1
        level += 1
    return int(regs[0])


def _zero_init_register(block: np.ndarray) -> int:
    """Register after processing ``block`` (uint8 array) from a zero register."""
    n = block.size
    if n == 0:
        return 0
    npow = 1 << (n - 1).bit_length()
    padded = np.zeros(npow, dtype=np.uint8)
    padded[npow - n :] = block  # leading zero bytes are no-ops on a zero register
    regs = _byte_table()[padded]
    level = 0
    while regs.size > 1:
        tables = _advance_tables(level)
        regs = _apply_tables(tables, regs[0::2]) ^ regs[1::2]
        level += 1
    return int(regs[0])


def crc32c(data: bytes | bytearray | memoryview | np.ndarray, crc: int = 0) -> int:
    """CRC-32C of ``data``; ``crc`` chains a previous call's result."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    else:
        buf = np.frombuffer(bytes(data) if isinstance(data, memoryview) else data, dtype=np.uint8)
    register = (crc ^ 0xFFFFFFFF) & 0xFFFFFFFF
    table = _byte_table()
    for start in range(0, buf.size, _CHUNK):
        chunk = buf[start : start + _CHUNK]
        if chunk.size >= 4:
            # Folding the register into the first four bytes is equivalent to
            # starting the chunk with that register and a zero init.
            head = chunk[:4].copy()
            head ^= np.array(
                [register & 0xFF, (register >> 8) & 0xFF, (register >> 16) & 0xFF, register >> 24],
                dtype=np.uint8,
            )
            body = np.concatenate([head, chunk[4:]])
            register = _zero_init_register(body)
        else:
            for byte in chunk:
                register = (register >> 8) ^ int(table[(register ^ int(byte)) & 0xFF])
    return register ^ 0xFFFFFFFF


def crc32c_hex(data, crc: int = 0) -> str:
    return f"{crc32c(data, crc):08x}"
