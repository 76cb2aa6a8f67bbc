"""Pure numpy implementations of the hot kernels.

These are the reference fallback for :mod:`simflash._ckernels`; both modules
expose the same functions with the same results.
"""
import numpy as np

SLOTS = 512
CHUNKS = 64
CHUNK_BYTES = 64
PAGE_BYTES = 4096

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
PAGE_MULT = 0xD1B54A32D192ED03
MASK64 = (1 << 64) - 1

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected


def _crc64_table():
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table[i] = crc
    return [int(x) for x in table]


_CRC64_TABLE = _crc64_table()


def crc64(data, crc=0):
    """CRC-64/XZ (ECMA-182 reflected, init and xorout all-ones).

    ``crc`` continues a previous result, so ``crc64(b, crc64(a)) == crc64(a + b)``.
    """
    table = _CRC64_TABLE
    crc ^= MASK64
    for b in bytes(data):
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ MASK64


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def keystream_words(page_address, first_chunk=0, n_chunks=CHUNKS):
    """Keystream as uint64 words, 8 per chunk, chunk-major."""
    seed = (page_address * PAGE_MULT) & MASK64
    chunks = np.arange(first_chunk, first_chunk + n_chunks, dtype=np.uint64)
    counters = np.arange(1, 9, dtype=np.uint64) * np.uint64(GOLDEN)
    with np.errstate(over="ignore"):
        base = np.uint64(seed) + chunks
        z = base[:, None] + counters[None, :]
        return _mix64(z).reshape(-1)


def keystream(page_address, first_chunk=0, n_chunks=CHUNKS):
    """Keystream bytes for ``n_chunks`` chunks starting at ``first_chunk``.

    Each chunk is seeded from ``page_address * PAGE_MULT + chunk`` and expanded
    counter-mode with a splitmix64 finalizer; words are laid out big-endian.
    """
    return keystream_words(page_address, first_chunk, n_chunks).astype(">u8").tobytes()


def xor_bytes(a, b):
    return np.bitwise_xor(np.frombuffer(a, np.uint8), np.frombuffer(b, np.uint8)).tobytes()


def match_slots(payload, keys, mask):
    """Bitmap (int, bit i = slot i) of slots where ``(slot ^ keys[i]) & mask == 0``.

    ``payload`` holds big-endian 64-bit slots; ``keys`` is either one int or a
    per-slot uint64 array (the randomized key copies).
    """
    slots = np.frombuffer(payload, dtype=">u8").astype(np.uint64)
    if isinstance(keys, np.ndarray):
        diff = slots ^ keys.astype(np.uint64, copy=False)
    else:
        diff = slots ^ np.uint64(keys & MASK64)
    hits = (diff & np.uint64(mask & MASK64)) == 0
    return int.from_bytes(np.packbits(hits, bitorder="little").tobytes(), "little")


def fold_chunks(bitmap):
    """OR-reduce a slot bitmap into a chunk bitmap (8 slots per chunk)."""
    nbytes = np.frombuffer(bitmap.to_bytes(SLOTS // 8, "little"), np.uint8)
    return int.from_bytes(np.packbits(nbytes != 0, bitorder="little").tobytes(), "little")
