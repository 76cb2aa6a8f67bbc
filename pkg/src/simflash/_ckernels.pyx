# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same contract as simflash._pykernels."""
import numpy as np
cimport numpy as cnp
from cpython.bytes cimport PyBytes_FromStringAndSize, PyBytes_AS_STRING
from libc.stdint cimport uint64_t, uint8_t
from libc.string cimport memcpy

cnp.import_array()

cdef enum:
    SLOTS = 512
    SLOT_BYTES = 64
cdef int CHUNKS = 64

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL
cdef uint64_t PAGE_MULT = 0xD1B54A32D192ED03ULL
cdef uint64_t CRC64_POLY = 0xC96C5795D7870F42ULL

cdef uint64_t _table[256]


cdef void _init_table() noexcept:
    cdef int i, j
    cdef uint64_t crc
    for i in range(256):
        crc = i
        for j in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ CRC64_POLY
            else:
                crc = crc >> 1
        _table[i] = crc


_init_table()


cdef inline uint64_t _mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


cdef inline uint64_t _load_be(const uint8_t* p) noexcept nogil:
    return ((<uint64_t>p[0] << 56) | (<uint64_t>p[1] << 48) | (<uint64_t>p[2] << 40)
            | (<uint64_t>p[3] << 32) | (<uint64_t>p[4] << 24) | (<uint64_t>p[5] << 16)
            | (<uint64_t>p[6] << 8) | <uint64_t>p[7])


cdef inline void _store_be(uint8_t* p, uint64_t v) noexcept nogil:
    cdef int k
    for k in range(8):
        p[k] = <uint8_t>(v >> (56 - 8 * k))


def crc64(data, crc=0):
    cdef const uint8_t[:] buf = memoryview(bytes(data)).cast("B")
    cdef uint64_t c = (<uint64_t>crc) ^ 0xFFFFFFFFFFFFFFFFULL
    cdef Py_ssize_t i, n = buf.shape[0]
    with nogil:
        for i in range(n):
            c = _table[(c ^ buf[i]) & 0xFF] ^ (c >> 8)
    return c ^ 0xFFFFFFFFFFFFFFFFULL


def keystream_words(page_address, first_chunk=0, n_chunks=64):
    cdef uint64_t seed = (<uint64_t>(page_address & 0xFFFFFFFFFFFFFFFF)) * PAGE_MULT
    cdef Py_ssize_t c, j, n = n_chunks
    cdef uint64_t first = first_chunk
    out = np.empty(n * 8, dtype=np.uint64)
    cdef uint64_t[:] o = out
    with nogil:
        for c in range(n):
            for j in range(8):
                o[c * 8 + j] = _mix64(seed + first + <uint64_t>c + <uint64_t>(j + 1) * GOLDEN)
    return out


def keystream(page_address, first_chunk=0, n_chunks=64):
    cdef uint64_t seed = (<uint64_t>(page_address & 0xFFFFFFFFFFFFFFFF)) * PAGE_MULT
    cdef Py_ssize_t c, j, n = n_chunks
    cdef uint64_t first = first_chunk
    out = PyBytes_FromStringAndSize(NULL, n * 64)
    cdef uint8_t* o = <uint8_t*>PyBytes_AS_STRING(out)
    with nogil:
        for c in range(n):
            for j in range(8):
                _store_be(o + c * 64 + j * 8,
                          _mix64(seed + first + <uint64_t>c + <uint64_t>(j + 1) * GOLDEN))
    return out


def xor_bytes(a, b):
    cdef const uint8_t[:] x = a
    cdef const uint8_t[:] y = b
    cdef Py_ssize_t i, n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError("length mismatch")
    out = PyBytes_FromStringAndSize(NULL, n)
    cdef uint8_t* o = <uint8_t*>PyBytes_AS_STRING(out)
    cdef uint64_t u, v
    with nogil:
        i = 0
        while i + 8 <= n:
            memcpy(&u, &x[i], 8)
            memcpy(&v, &y[i], 8)
            u ^= v
            memcpy(o + i, &u, 8)
            i += 8
        while i < n:
            o[i] = x[i] ^ y[i]
            i += 1
    return out


def match_slots(payload, keys, mask):
    cdef const uint8_t[:] p = memoryview(payload).cast("B")
    cdef uint64_t m = <uint64_t>(mask & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t k0
    cdef const uint64_t[:] kv
    cdef uint8_t bits[SLOT_BYTES]
    cdef int i
    cdef bint per_slot = isinstance(keys, np.ndarray)
    if p.shape[0] != SLOTS * 8:
        raise ValueError("payload must be 4096 bytes")
    for i in range(SLOT_BYTES):
        bits[i] = 0
    if per_slot:
        kv = np.ascontiguousarray(keys, dtype=np.uint64)
        with nogil:
            for i in range(SLOTS):
                if ((_load_be(&p[i * 8]) ^ kv[i]) & m) == 0:
                    bits[i >> 3] |= <uint8_t>(1 << (i & 7))
    else:
        k0 = <uint64_t>(keys & 0xFFFFFFFFFFFFFFFF)
        with nogil:
            for i in range(SLOTS):
                if ((_load_be(&p[i * 8]) ^ k0) & m) == 0:
                    bits[i >> 3] |= <uint8_t>(1 << (i & 7))
    return int.from_bytes((<char*>bits)[:SLOT_BYTES], "little")


def fold_chunks(bitmap):
    raw = bitmap.to_bytes(SLOT_BYTES, "little")
    cdef const uint8_t[:] b = raw
    cdef uint64_t out = 0
    cdef int j
    for j in range(CHUNKS):
        if b[j]:
            out |= (<uint64_t>1) << j
    return out
