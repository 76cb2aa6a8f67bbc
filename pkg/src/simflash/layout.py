"""Page layout: slots, chunks, verification header and the stored page record."""
import struct
from dataclasses import dataclass, field

PAGE_BYTES = 4096
SLOT_BYTES = 8
CHUNK_BYTES = 64
SLOTS = PAGE_BYTES // SLOT_BYTES  # 512
CHUNKS = PAGE_BYTES // CHUNK_BYTES  # 64
SLOTS_PER_CHUNK = CHUNK_BYTES // SLOT_BYTES  # 8
HEADER_BYTES = 24
PARITY_BYTES = 4

FULL_MASK = (1 << 64) - 1
ALL_SLOTS = (1 << SLOTS) - 1
ALL_CHUNKS = (1 << CHUNKS) - 1

# Raw bit address space for error injection: payload, then header, then parities.
PAYLOAD_BITS = PAGE_BYTES * 8
HEADER_BITS = HEADER_BYTES * 8
PARITY_BITS = CHUNKS * PARITY_BYTES * 8
HEADER_BIT_BASE = PAYLOAD_BITS
PARITY_BIT_BASE = PAYLOAD_BITS + HEADER_BITS
RAW_BITS = PARITY_BIT_BASE + PARITY_BITS

MAGIC = 0x53694D2D4D414743  # b"SiM-MAGC"

ERASED_PAYLOAD = b"\xff" * PAGE_BYTES
ERASED_HEADER = b"\xff" * HEADER_BYTES


def chunk_of_slot(slot):
    return slot // SLOTS_PER_CHUNK


def slot_value(payload, slot):
    off = slot * SLOT_BYTES
    return int.from_bytes(payload[off:off + SLOT_BYTES], "big")


def chunk_bytes(payload, chunk):
    off = chunk * CHUNK_BYTES
    return bytes(payload[off:off + CHUNK_BYTES])


def split_chunks(payload):
    return [chunk_bytes(payload, j) for j in range(CHUNKS)]


def bit_indices(bitmap):
    """Set bit positions of an int bitmap, ascending."""
    out = []
    while bitmap:
        low = bitmap & -bitmap
        out.append(low.bit_length() - 1)
        bitmap ^= low
    return out


def flip_bits(data, positions, base=0):
    """Return ``data`` with the given bit positions (MSB-first, offset by ``base``) flipped."""
    buf = bytearray(data)
    for p in positions:
        p -= base
        buf[p >> 3] ^= 0x80 >> (p & 7)
    return bytes(buf)


@dataclass(frozen=True)
class VerificationHeader:
    """24-byte header stored with every page: crc, write timestamp (ns), magic."""

    write_timestamp: int
    magic: int
    crc: int

    def to_bytes(self):
        return (self.crc.to_bytes(8, "big") + self.write_timestamp.to_bytes(8, "big")
                + self.magic.to_bytes(8, "big"))

    @classmethod
    def from_bytes(cls, raw):
        raw = bytes(raw)
        if len(raw) != HEADER_BYTES:
            raise ValueError(f"header must be {HEADER_BYTES} bytes")
        return cls(write_timestamp=int.from_bytes(raw[8:16], "big"),
                   magic=int.from_bytes(raw[16:24], "big"),
                   crc=int.from_bytes(raw[0:8], "big"))


@dataclass
class FlashPage:
    """A programmed page as stored in the array.

    ``payload`` is the randomized image. ``error_bits`` holds injected bit
    flips in the raw address space (payload, header, parities); the clean
    fields are never modified, raw reads apply the flips.
    """

    payload: bytes
    header: VerificationHeader
    parities: tuple
    write_time: int
    error_bits: set = field(default_factory=set)

    def __post_init__(self):
        if len(self.payload) != PAGE_BYTES:
            raise ValueError("payload must be 4096 bytes")
        if len(self.parities) != CHUNKS:
            raise ValueError("need one parity per chunk")

    def payload_errors(self):
        return sorted(p for p in self.error_bits if p < PAYLOAD_BITS)

    def chunk_errors(self, chunk):
        lo = chunk * CHUNK_BYTES * 8
        hi = lo + CHUNK_BYTES * 8
        return sorted(p - lo for p in self.error_bits if lo <= p < hi)

    def raw_payload(self):
        if not self.error_bits:
            return self.payload
        return flip_bits(self.payload, [p for p in self.error_bits if p < PAYLOAD_BITS])

    def raw_header(self):
        raw = self.header.to_bytes()
        errs = [p for p in self.error_bits if HEADER_BIT_BASE <= p < PARITY_BIT_BASE]
        return flip_bits(raw, errs, HEADER_BIT_BASE) if errs else raw

    def parity_bytes(self):
        return struct.pack(">64I", *self.parities)

    def raw_parities(self):
        raw = self.parity_bytes()
        errs = [p for p in self.error_bits if p >= PARITY_BIT_BASE]
        return flip_bits(raw, errs, PARITY_BIT_BASE) if errs else raw

    def to_bytes(self):
        """Snapshot record: payload || header || parities (clean image)."""
        return self.payload + self.header.to_bytes() + self.parity_bytes()

    @classmethod
    def from_bytes(cls, raw, write_time=None):
        payload = bytes(raw[:PAGE_BYTES])
        header = VerificationHeader.from_bytes(raw[PAGE_BYTES:PAGE_BYTES + HEADER_BYTES])
        pb = raw[PAGE_BYTES + HEADER_BYTES:]
        parities = tuple(int.from_bytes(pb[i:i + PARITY_BYTES], "big")
                         for i in range(0, CHUNKS * PARITY_BYTES, PARITY_BYTES))
        return cls(payload, header, parities,
                   header.write_timestamp if write_time is None else write_time)


RECORD_BYTES = PAGE_BYTES + HEADER_BYTES + CHUNKS * PARITY_BYTES
