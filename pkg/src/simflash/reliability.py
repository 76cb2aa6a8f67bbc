"""Data-path integrity: randomization, optimistic header check, chunk and page ECC.

The ECC is functional: codes are not decoded, instead each stored page keeps a
ledger of injected bit flips and correction succeeds or fails by comparing the
flip count against the configured capability.  CRC-32 per chunk stands in for
the 4-byte chunk parity so that corruption is still *detected* from the data.
"""
import enum
import json
import zlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from simflash import kernels
from simflash.layout import (CHUNK_BYTES, CHUNKS, HEADER_BYTES, MAGIC, PAGE_BYTES,
                             PAYLOAD_BITS, RAW_BITS, SLOTS, FlashPage,
                             VerificationHeader, flip_bits)

NS_PER_S = 10**9


@dataclass(frozen=True)
class ReliabilityConfig:
    randomize: bool = True
    chunk_t: int = 3
    page_t: int = 72
    retry_budget: int = 5
    p_retry: float = 0.5
    age_margin_ns: int = 10**6 * NS_PER_S

    def __post_init__(self):
        if self.chunk_t < 0 or self.page_t < 0 or self.retry_budget < 0:
            raise ValueError("ECC capabilities and retry budget must be >= 0")
        if not 0.0 <= self.p_retry <= 1.0:
            raise ValueError("p_retry must be in [0, 1]")


DEFAULT_CONFIG = ReliabilityConfig()


class ReadFailure(Exception):
    """Page-level ECC failed after exhausting read-retries."""

    def __init__(self, page_address, errors, retries):
        super().__init__(f"page {page_address}: {errors} bit errors uncorrectable "
                         f"after {retries} retries")
        self.page_address = page_address
        self.errors = errors
        self.retries = retries


class OpenStatus(enum.Enum):
    CLEAN = "clean"
    CRC_MISMATCH = "crc_mismatch"
    STALE = "stale"


class ChunkStatus(enum.Enum):
    OK = "ok"
    CORRECTED = "corrected"
    UNCORRECTABLE = "uncorrectable"


@dataclass(frozen=True)
class ChunkCheck:
    status: ChunkStatus
    data: bytes = None
    corrected: int = 0


@dataclass(frozen=True)
class PageCorrection:
    payload: bytes
    errors: int
    retries: int


# -- randomization ---------------------------------------------------------

def chunk_stream(page_address, chunk):
    """64-byte keystream for one chunk; seeded by page address and chunk index."""
    return kernels.keystream(page_address, chunk, 1)


def page_stream(page_address):
    return kernels.keystream(page_address)


def randomize_key(key, page_address, enabled=True):
    """Per-slot copies of ``key`` XORed with the slot's keystream word."""
    if not enabled:
        return np.full(SLOTS, key, dtype=np.uint64)
    return kernels.keystream_words(page_address) ^ np.uint64(key)


def derandomize_chunk(raw, page_address, chunk, enabled=True):
    if not enabled:
        return bytes(raw)
    return kernels.xor_bytes(raw, chunk_stream(page_address, chunk))


def derandomize_page(raw, page_address, enabled=True):
    if not enabled:
        return bytes(raw)
    return kernels.xor_bytes(raw, page_stream(page_address))


# -- header and parity -------------------------------------------------------

def header_crc(first_chunk, timestamp, magic=MAGIC):
    return kernels.crc64(bytes(first_chunk) + timestamp.to_bytes(8, "big")
                         + magic.to_bytes(8, "big"))


def chunk_parity(chunk):
    return zlib.crc32(chunk)


def build_page_image(logical_chunks, page_address, now, config=DEFAULT_CONFIG):
    """Randomize 64 logical chunks for ``page_address`` and attach header and parities."""
    if len(logical_chunks) != CHUNKS or any(len(c) != CHUNK_BYTES for c in logical_chunks):
        raise ValueError("expected 64 chunks of 64 bytes")
    return page_image(b"".join(logical_chunks), page_address, now, config)


def page_image(logical, page_address, now, config=DEFAULT_CONFIG):
    """Same as :func:`build_page_image` for a contiguous 4096-byte payload."""
    if len(logical) != PAGE_BYTES:
        raise ValueError("payload must be 4096 bytes")
    logical = bytes(logical)
    stored = kernels.xor_bytes(logical, page_stream(page_address)) if config.randomize else logical
    mv = memoryview(logical)
    header = VerificationHeader(write_timestamp=now, magic=MAGIC,
                                crc=header_crc(mv[:CHUNK_BYTES], now))
    crc32 = zlib.crc32
    parities = tuple([crc32(mv[i:i + CHUNK_BYTES]) for i in range(0, PAGE_BYTES, CHUNK_BYTES)])
    return FlashPage(payload=stored, header=header, parities=parities, write_time=now)


def logical_payload(page, page_address, config=DEFAULT_CONFIG):
    """Clean logical payload of a stored page (ignores injected errors)."""
    return derandomize_page(page.payload, page_address, config.randomize)


def verify_on_open(header_raw, first_chunk_raw, page_address, now, config=DEFAULT_CONFIG):
    header = VerificationHeader.from_bytes(header_raw)
    chunk0 = derandomize_chunk(first_chunk_raw, page_address, 0, config.randomize)
    if header.magic != MAGIC or header_crc(chunk0, header.write_timestamp, header.magic) != header.crc:
        return OpenStatus.CRC_MISMATCH
    if now - header.write_timestamp > config.age_margin_ns:
        return OpenStatus.STALE
    return OpenStatus.CLEAN


def verify_chunk(chunk_raw, parity, error_bits_in_chunk, t=DEFAULT_CONFIG.chunk_t):
    """Check a derandomized chunk against its parity.

    ``error_bits_in_chunk`` are the injected flips relative to the chunk; up
    to ``t`` of them are removed.
    """
    if len(chunk_raw) != CHUNK_BYTES:
        raise ValueError("chunk must be 64 bytes")
    n = len(error_bits_in_chunk)
    if n == 0:
        if chunk_parity(chunk_raw) == parity:
            return ChunkCheck(ChunkStatus.OK, bytes(chunk_raw), 0)
        return ChunkCheck(ChunkStatus.UNCORRECTABLE)
    if n > t:
        return ChunkCheck(ChunkStatus.UNCORRECTABLE)
    fixed = flip_bits(chunk_raw, error_bits_in_chunk)
    if chunk_parity(fixed) != parity:
        return ChunkCheck(ChunkStatus.UNCORRECTABLE)
    return ChunkCheck(ChunkStatus.CORRECTED, fixed, n)


def correct_full_page(raw_payload, error_bits, page_address, rng, config=DEFAULT_CONFIG):
    """Page-level ECC with read-retry.

    Up to ``page_t`` flips are corrected directly.  Each retry is an
    independent re-read in which every flip is sensed correctly with
    probability ``p_retry``; the read succeeds once the residual flips fit the
    ECC.  Raises :class:`ReadFailure` after ``retry_budget`` retries.
    """
    errs = [p for p in error_bits if p < PAYLOAD_BITS]
    n = len(errs)
    retries = 0
    if n > config.page_t:
        while True:
            if retries >= config.retry_budget:
                raise ReadFailure(page_address, n, retries)
            retries += 1
            residual = int(np.count_nonzero(rng.random(n) >= config.p_retry))
            if residual <= config.page_t:
                break
    clean = flip_bits(raw_payload, errs) if errs else bytes(raw_payload)
    return PageCorrection(derandomize_page(clean, page_address, config.randomize), n, retries)


def expected_retries(n_errors, config=DEFAULT_CONFIG):
    """Closed-form mean retry count (truncated geometric) for ``correct_full_page``.

    Counts the retries actually issued, including those of failed reads.
    """
    if n_errors <= config.page_t:
        return 0.0
    from math import comb
    q_fail = 1.0 - config.p_retry
    q = sum(comb(n_errors, k) * q_fail**k * config.p_retry**(n_errors - k)
            for k in range(config.page_t + 1))
    if q == 0.0:
        return float(config.retry_budget)
    return (1.0 - (1.0 - q) ** config.retry_budget) / q


# -- fault injection -----------------------------------------------------------

def inject_errors(page, positions=None, count=None, rng=None, limit=PAYLOAD_BITS):
    """Add bit flips to ``page``; either explicit raw positions or ``count`` random payload bits."""
    if positions is None:
        if count is None or rng is None:
            raise ValueError("give positions, or count with an rng")
        free = limit - len(page.error_bits)
        if count > free:
            raise ValueError("not enough bits left to flip")
        positions = set()
        while len(positions) < count:
            p = int(rng.integers(0, limit))
            if p not in page.error_bits:
                positions.add(p)
    for p in positions:
        if not 0 <= p < RAW_BITS:
            raise ValueError(f"bit position {p} outside the raw page")
    page.error_bits ^= set(positions)
    return sorted(positions)


def load_fault_scenarios(path):
    """Read a JSON list of ``{"page": int, "bit_positions": [int, ...]}``."""
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise ValueError("fault scenario file must hold a JSON list")
    out = []
    for i, entry in enumerate(data):
        try:
            out.append((int(entry["page"]), [int(b) for b in entry["bit_positions"]]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"fault scenario {i}: {exc}") from None
    return out


# -- refresh -------------------------------------------------------------------

class RefreshQueue:
    """Pages whose age exceeded the margin, waiting to be rewritten."""

    def __init__(self, age_margin_ns=DEFAULT_CONFIG.age_margin_ns):
        self.age_margin_ns = age_margin_ns
        self.entries = OrderedDict()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, page):
        return page in self.entries

    def add(self, page, now):
        if page in self.entries:
            return False
        self.entries[page] = now
        return True

    def drain(self):
        pages = list(self.entries)
        self.entries.clear()
        return pages


def refresh_tick(queue, read_page, rewrite_page, now):
    """Rewrite every queued page.

    ``read_page(page)`` returns the corrected logical payload (full read path);
    ``rewrite_page(page, payload, now)`` programs a fresh copy and returns the
    issued command.  ReadFailure propagates and leaves the page queued.
    """
    issued = []
    for page in list(queue.entries):
        payload = read_page(page)
        issued.append(rewrite_page(page, payload, now))
        del queue.entries[page]
    return issued
