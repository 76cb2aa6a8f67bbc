"""Functional and timing model of one SiM flash package.

A package holds ``dies x planes`` planes sharing one channel.  Each plane has
two page registers: ``active`` (the operand of search/gather) and ``pending``
(filled by an open issued while another page is still active).  Every command
returns its phase list; ``busy_until`` is ``now`` plus the sum of the phase
durations.  All times are integer nanoseconds.
"""
import enum
import math
from collections import namedtuple
from dataclasses import dataclass

from simflash import kernels, reliability
from simflash.layout import (ALL_SLOTS, CHUNK_BYTES, CHUNKS, ERASED_HEADER, ERASED_PAYLOAD,
                             PAGE_BYTES, RECORD_BYTES, SLOTS, FlashPage,
                             bit_indices, chunk_bytes)


class ChipError(Exception):
    pass


class InvalidAddress(ChipError):
    pass


class PlaneBusy(ChipError):
    pass


class RegistersFull(ChipError):
    pass


class NoActivePage(ChipError):
    pass


class ProgramToUnerasedPage(ChipError):
    pass


class ChunkUncorrectable(ChipError):
    def __init__(self, chunk):
        super().__init__(f"chunk {chunk} uncorrectable")
        self.chunk = chunk


@dataclass(frozen=True)
class ChipGeometry:
    channels: int = 8
    packages_per_channel: int = 1
    dies: int = 2
    planes: int = 1
    blocks: int = 32
    pages_per_block: int = 128
    page_size: int = PAGE_BYTES

    def __post_init__(self):
        if self.page_size != PAGE_BYTES:
            raise ValueError("page_size must be 4096")
        for name in ("channels", "packages_per_channel", "dies", "planes", "blocks",
                     "pages_per_block"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def planes_per_package(self):
        return self.dies * self.planes

    @property
    def pages_per_plane(self):
        return self.blocks * self.pages_per_block

    @property
    def packages(self):
        return self.channels * self.packages_per_channel

    @property
    def total_planes(self):
        return self.packages * self.planes_per_package

    @property
    def total_pages(self):
        return self.total_planes * self.pages_per_plane


class BusMode(enum.Enum):
    MATCH = "match"
    STORAGE = "storage"


@dataclass(frozen=True)
class ChipTiming:
    read_ns: int = 16_000
    program_ns: int = 80_000
    erase_ns: int = 1_000_000
    match_cycles: int = 10
    sim_clock_hz: float = 33e6
    match_rate_mts: float = 80.0
    storage_rate_mts: float = 800.0
    bus_width_bits: int = 8
    open_transfer_bytes: int = 256
    bitmap_bytes: int = SLOTS // 8

    @property
    def match_ns(self):
        return round(self.match_cycles * 1e9 / self.sim_clock_hz)

    def rate(self, mode):
        return self.match_rate_mts if mode is BusMode.MATCH else self.storage_rate_mts

    def transfer_ns(self, nbytes, mode):
        if nbytes <= 0:
            return 0
        per_transfer = self.bus_width_bits // 8
        return math.ceil(nbytes / per_transfer * 1e3 / self.rate(mode) - 1e-9)


# category is one of: nand_read, nand_program, nand_erase, bus, sim_match
Phase = namedtuple("Phase", "label duration_ns category nbytes mode")

PageAddress = namedtuple("PageAddress", "die plane block page")


def match_page(payload, key, mask):
    """Slot bitmap: bit i set iff ``(slot_i ^ key) & mask == 0``."""
    if len(payload) != PAGE_BYTES:
        raise ValueError("payload must be 4096 bytes")
    return kernels.match_slots(payload, key, mask)


def slot_to_chunk_bitmap(match_bitmap):
    return kernels.fold_chunks(match_bitmap & ALL_SLOTS)


@dataclass
class Loaded:
    address: PageAddress
    ppn: int
    page: FlashPage  # None when erased


class PlaneRegisters:
    __slots__ = ("active", "pending")

    def __init__(self):
        self.active = None
        self.pending = None


@dataclass(frozen=True)
class OpenResponse:
    header: bytes
    first_chunk: bytes
    busy_until: int
    phases: tuple
    register: str


@dataclass(frozen=True)
class SearchResponse:
    bitmap: int
    busy_until: int
    phases: tuple


@dataclass(frozen=True)
class GatherResponse:
    data: bytes
    chunks: tuple
    busy_until: int
    phases: tuple
    corrected: dict


@dataclass(frozen=True)
class FullReadResponse:
    payload: bytes
    header: bytes
    parities: bytes
    error_bits: frozenset
    busy_until: int
    phases: tuple


@dataclass(frozen=True)
class ArrayResponse:
    busy_until: int
    phases: tuple


def _finish(now, phases):
    return now + sum(p.duration_ns for p in phases)


class SimChip:
    """One package: its planes, registers and stored pages."""

    def __init__(self, geometry=ChipGeometry(), timing=ChipTiming(), package=0,
                 reliability_config=reliability.DEFAULT_CONFIG):
        self.geometry = geometry
        self.timing = timing
        self.package = package
        self.rconfig = reliability_config
        self.mode = BusMode.MATCH
        self.pages = {}
        n = geometry.planes_per_package
        self.registers = [PlaneRegisters() for _ in range(n)]
        self.array_busy_until = [0] * n

    # -- addressing ---------------------------------------------------------
    def plane_index(self, die, plane):
        return die * self.geometry.planes + plane

    def check_address(self, addr):
        g = self.geometry
        if not (0 <= addr.die < g.dies and 0 <= addr.plane < g.planes
                and 0 <= addr.block < g.blocks and 0 <= addr.page < g.pages_per_block):
            raise InvalidAddress(f"{addr} outside geometry")

    def ppn(self, addr):
        """Global physical page number, the randomization seed of the page."""
        g = self.geometry
        plane_global = self.package * g.planes_per_package + self.plane_index(addr.die, addr.plane)
        return (plane_global * g.blocks + addr.block) * g.pages_per_block + addr.page

    def _require_plane(self, plane):
        if not 0 <= plane < len(self.registers):
            raise InvalidAddress(f"plane {plane} outside geometry")
        return self.registers[plane]

    def _array_free(self, plane, now):
        if now < self.array_busy_until[plane]:
            raise PlaneBusy(f"plane {plane} busy until {self.array_busy_until[plane]}")

    def set_mode(self, mode):
        self.mode = BusMode(mode)

    # -- match-path commands ------------------------------------------------
    def page_open(self, addr, now, verify=True):
        self.check_address(addr)
        plane = self.plane_index(addr.die, addr.plane)
        regs = self.registers[plane]
        self._array_free(plane, now)
        if regs.active is not None and regs.pending is not None:
            raise RegistersFull(f"plane {plane}: both registers occupied")
        loaded = Loaded(addr, self.ppn(addr), self.pages.get(addr))
        if regs.active is None:
            regs.active = loaded
            slot = "active"
        else:
            regs.pending = loaded
            slot = "pending"
        phases = [Phase("array_read", self.timing.read_ns, "nand_read", 0, None)]
        header, chunk0 = b"", b""
        if verify:
            nbytes = self.timing.open_transfer_bytes
            phases.append(Phase("verify_out", self.timing.transfer_ns(nbytes, BusMode.MATCH),
                                "bus", nbytes, BusMode.MATCH))
            if loaded.page is None:
                header, chunk0 = ERASED_HEADER, ERASED_PAYLOAD[:CHUNK_BYTES]
            else:
                header = loaded.page.raw_header()
                chunk0 = chunk_bytes(loaded.page.raw_payload(), 0)
        self.array_busy_until[plane] = now + self.timing.read_ns
        phases = tuple(phases)
        return OpenResponse(header, chunk0, _finish(now, phases), phases, slot)

    def page_close(self, plane):
        regs = self._require_plane(plane)
        if regs.active is None:
            raise NoActivePage(f"plane {plane}: nothing to close")
        regs.active, regs.pending = regs.pending, None

    def active_page(self, plane):
        regs = self._require_plane(plane)
        if regs.active is None:
            raise NoActivePage(f"plane {plane}: no active page")
        return regs.active

    def search(self, plane, key, mask, now):
        loaded = self.active_page(plane)
        payload = ERASED_PAYLOAD if loaded.page is None else loaded.page.raw_payload()
        copies = reliability.randomize_key(key, loaded.ppn, self.rconfig.randomize)
        bitmap = kernels.match_slots(payload, copies, mask)
        nbytes = self.timing.bitmap_bytes
        phases = (Phase("match", self.timing.match_ns, "sim_match", 0, None),
                  Phase("bitmap_out", self.timing.transfer_ns(nbytes, BusMode.MATCH),
                        "bus", nbytes, BusMode.MATCH))
        return SearchResponse(bitmap, _finish(now, phases), phases)

    def gather(self, plane, chunk_bitmap, now, check=True):
        """Transfer the selected chunks in ascending order, derandomized and checked."""
        loaded = self.active_page(plane)
        chunks = tuple(bit_indices(chunk_bitmap & ((1 << CHUNKS) - 1)))
        out = []
        corrected = {}
        page = loaded.page
        raw = ERASED_PAYLOAD if page is None else page.raw_payload()
        for j in chunks:
            data = reliability.derandomize_chunk(chunk_bytes(raw, j), loaded.ppn, j,
                                                 self.rconfig.randomize)
            if check:
                if page is None:
                    raise ChunkUncorrectable(j)
                res = reliability.verify_chunk(data, page.parities[j], page.chunk_errors(j),
                                               self.rconfig.chunk_t)
                if res.status is reliability.ChunkStatus.UNCORRECTABLE:
                    raise ChunkUncorrectable(j)
                if res.corrected:
                    corrected[j] = res.corrected
                data = res.data
            out.append(data)
        nbytes = len(chunks) * CHUNK_BYTES
        phases = (Phase("gather_out", self.timing.transfer_ns(nbytes, BusMode.MATCH),
                        "bus", nbytes, BusMode.MATCH),)
        return GatherResponse(b"".join(out), chunks, _finish(now, phases), phases, corrected)

    def full_page_read(self, plane, now):
        """Stream the active page's raw payload at the current bus mode's rate."""
        loaded = self.active_page(plane)
        page = loaded.page
        if page is None:
            payload, header, parities, errs = ERASED_PAYLOAD, ERASED_HEADER, b"\xff" * (CHUNKS * 4), frozenset()
        else:
            payload, header = page.raw_payload(), page.raw_header()
            parities, errs = page.raw_parities(), frozenset(page.error_bits)
        phases = (Phase("page_out", self.timing.transfer_ns(PAGE_BYTES, self.mode),
                        "bus", PAGE_BYTES, self.mode),)
        return FullReadResponse(payload, header, parities, errs, _finish(now, phases), phases)

    # -- storage-path commands ----------------------------------------------
    def program_page(self, addr, page, now):
        self.check_address(addr)
        plane = self.plane_index(addr.die, addr.plane)
        self._array_free(plane, now)
        if addr in self.pages:
            raise ProgramToUnerasedPage(f"{addr} already programmed")
        self.pages[addr] = page
        data_in = self.timing.transfer_ns(PAGE_BYTES, BusMode.STORAGE)
        phases = (Phase("data_in", data_in, "bus", PAGE_BYTES, BusMode.STORAGE),
                  Phase("program", self.timing.program_ns, "nand_program", 0, None))
        self.array_busy_until[plane] = _finish(now, phases)
        return ArrayResponse(self.array_busy_until[plane], phases)

    def erase_block(self, die, plane, block, now):
        self.check_address(PageAddress(die, plane, block, 0))
        p = self.plane_index(die, plane)
        self._array_free(p, now)
        for page in range(self.geometry.pages_per_block):
            self.pages.pop(PageAddress(die, plane, block, page), None)
        phases = (Phase("erase", self.timing.erase_ns, "nand_erase", 0, None),)
        self.array_busy_until[p] = _finish(now, phases)
        return ArrayResponse(self.array_busy_until[p], phases)

    def is_erased(self, addr):
        return addr not in self.pages

    # -- snapshots ----------------------------------------------------------
    def addresses(self):
        g = self.geometry
        for die in range(g.dies):
            for plane in range(g.planes):
                for block in range(g.blocks):
                    for page in range(g.pages_per_block):
                        yield PageAddress(die, plane, block, page)

    def snapshot(self):
        """Flat page-major image; erased pages are all-ones records."""
        erased = b"\xff" * RECORD_BYTES
        return b"".join(self.pages[a].to_bytes() if a in self.pages else erased
                        for a in self.addresses())

    def load_snapshot(self, blob):
        if len(blob) != self.geometry.planes_per_package * self.geometry.pages_per_plane * RECORD_BYTES:
            raise ValueError("snapshot size does not match geometry")
        erased = b"\xff" * RECORD_BYTES
        self.pages = {}
        for i, addr in enumerate(self.addresses()):
            rec = blob[i * RECORD_BYTES:(i + 1) * RECORD_BYTES]
            if rec != erased:
                self.pages[addr] = FlashPage.from_bytes(rec)

