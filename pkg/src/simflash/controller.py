"""SSD controller: address map, per-plane command queues, scheduling, power and energy.

The controller owns a :mod:`simpy` environment.  Every chip command runs as
a sequence of phases; array phases hold the plane's array, transfer phases
hold the channel bus, and the command holds its peak current against the
package's power budget from dispatch to completion.  Queues are FIFO, so
dispatch is first-come-first-serve per plane and per channel.

Match-path work is grouped in *sessions*: one page open followed by the
searches or gathers of every request that joined the session, then a close.
Under FCFS each request gets its own session.  Under the deadline scheduler a
session waits ``deadline_ns`` after its first request and absorbs every
request for the same page that arrives in the meantime.
"""
import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import simpy

from simflash import reliability
from simflash.chip import (BusMode, ChipGeometry, ChipTiming, ChunkUncorrectable,
                           InvalidAddress, PageAddress, Phase, SimChip, match_page,
                           slot_to_chunk_bitmap)
from simflash.layout import (CHUNK_BYTES, CHUNKS, ERASED_PAYLOAD, FULL_MASK, PAGE_BYTES,
                             bit_indices, chunk_bytes)

ENERGY_CATEGORIES = ("nand_read", "nand_program", "nand_erase", "bus_active", "bus_idle",
                     "sim_match")
EVENT_COLUMNS = ("time_ns", "channel", "die", "command", "phase", "current_mA", "bytes",
                 "duration_ns", "voltage_mV")
AJ_PER_J = 10**18  # mV * uA * ns = 1e-18 J


class KeyNotFound(Exception):
    pass


class OutOfRange(InvalidAddress):
    pass


@dataclass(frozen=True)
class PowerConfig:
    """Voltages (mV) and currents (uA); ``budget_ua`` is per package, None = unlimited."""

    bus_mv: int = 1200
    nand_mv: int = 3300
    bus_match_ua: int = 5000
    bus_storage_ua: int = 5000
    bus_idle_ua: int = 10
    nand_read_ua: int = 25000
    nand_program_ua: int = 25000
    nand_erase_ua: int = 25000
    sim_match_ua: int = 2500
    budget_ua: int = None

    def phase_power(self, phase):
        """(ledger category, mV, uA) drawn by one phase."""
        cat = phase.category
        if cat == "bus":
            ua = self.bus_match_ua if phase.mode is BusMode.MATCH else self.bus_storage_ua
            return "bus_active", self.bus_mv, ua
        if cat == "sim_match":
            return "sim_match", self.bus_mv, self.sim_match_ua
        if cat == "nand_read":
            return cat, self.nand_mv, self.nand_read_ua
        if cat == "nand_program":
            return cat, self.nand_mv, self.nand_program_ua
        if cat == "nand_erase":
            return cat, self.nand_mv, self.nand_erase_ua
        raise ValueError(f"unknown phase category {cat!r}")

    def peak_ua(self, phases):
        return max((self.phase_power(p)[2] for p in phases if p.duration_ns > 0), default=0)


class EnergyLedger:
    """Energy per category in integer attojoules (exact sums)."""

    def __init__(self):
        self.aj = dict.fromkeys(ENERGY_CATEGORIES, 0)

    def add(self, category, mv, ua, ns):
        self.aj[category] += mv * ua * ns

    def copy(self):
        other = EnergyLedger()
        other.aj = dict(self.aj)
        return other

    def minus(self, other):
        out = EnergyLedger()
        out.aj = {k: self.aj[k] - other.aj[k] for k in ENERGY_CATEGORIES}
        return out

    def joules(self):
        return {k: v / AJ_PER_J for k, v in self.aj.items()}

    @property
    def total_aj(self):
        return sum(self.aj.values())

    @property
    def total_j(self):
        return self.total_aj / AJ_PER_J


def phase_energy_aj(voltage_mv, current_ua, duration_ns):
    return voltage_mv * current_ua * duration_ns


# -- address map ---------------------------------------------------------------

class AddressMap:
    """Logical page -> (package, PageAddress), with out-of-place updates.

    Pages never leave their plane, so a logical page keeps its channel and
    die for life; within the plane free pages are handed out in block order
    and blocks are reclaimed greedily (fewest valid pages first).
    """

    def __init__(self, geometry, provisioned):
        if not 0 < provisioned <= geometry.total_pages:
            raise ValueError("provisioned pages must fit the geometry")
        self.geometry = geometry
        self.provisioned = provisioned
        g = geometry
        self.l2p = [self.map_logical(i) for i in range(provisioned)]
        self.p2l = {loc: i for i, loc in enumerate(self.l2p)}
        self.write_time = [0] * provisioned
        nplanes = g.planes_per_package
        self.valid = {}
        self.free = {}
        used = {}
        for pkg, addr in self.l2p:
            used.setdefault((pkg, addr.die * g.planes + addr.plane), set()).add(
                (addr.block, addr.page))
        for pkg in range(g.packages):
            for plane in range(nplanes):
                taken = used.get((pkg, plane), set())
                counts = [0] * g.blocks
                for b, _ in taken:
                    counts[b] += 1
                self.valid[(pkg, plane)] = counts
                self.free[(pkg, plane)] = deque(
                    (b, p) for b in range(g.blocks) for p in range(g.pages_per_block)
                    if (b, p) not in taken)
        self.free_in_block = {
            key: self._free_counts(q) for key, q in self.free.items()}

    def _free_counts(self, q):
        counts = [0] * self.geometry.blocks
        for b, _ in q:
            counts[b] += 1
        return counts

    def map_logical(self, page_id):
        """Initial placement: stripe over channels, then dies, then blocks."""
        g = self.geometry
        if not 0 <= page_id < self.provisioned:
            raise OutOfRange(f"logical page {page_id} outside provisioned range")
        per_channel = g.packages_per_channel * g.dies * g.planes
        ch = page_id % g.channels
        rest = page_id // g.channels
        slot = rest % per_channel
        rest //= per_channel
        block = rest % g.blocks
        page = rest // g.blocks
        pkg = ch * g.packages_per_channel + slot // (g.dies * g.planes)
        within = slot % (g.dies * g.planes)
        return pkg, PageAddress(within // g.planes, within % g.planes, block, page)

    def lookup(self, page_id):
        if not 0 <= page_id < self.provisioned:
            raise OutOfRange(f"logical page {page_id} outside provisioned range")
        return self.l2p[page_id]

    def plane_of(self, page_id):
        pkg, addr = self.lookup(page_id)
        return pkg, addr.die * self.geometry.planes + addr.plane

    def free_pages(self, pkg, plane):
        return len(self.free[(pkg, plane)])

    def allocate(self, pkg, plane):
        q = self.free[(pkg, plane)]
        if not q:
            raise RuntimeError(f"plane {(pkg, plane)} has no free page")
        b, p = q.popleft()
        self.free_in_block[(pkg, plane)][b] -= 1
        g = self.geometry
        return PageAddress(plane // g.planes, plane % g.planes, b, p)

    def remap(self, page_id, pkg, addr, now):
        old = self.l2p[page_id]
        plane = addr.die * self.geometry.planes + addr.plane
        opkg, oaddr = old
        oplane = oaddr.die * self.geometry.planes + oaddr.plane
        self.valid[(opkg, oplane)][oaddr.block] -= 1
        del self.p2l[old]
        self.l2p[page_id] = (pkg, addr)
        self.p2l[(pkg, addr)] = page_id
        self.valid[(pkg, plane)][addr.block] += 1
        self.write_time[page_id] = now

    def gc_victim(self, pkg, plane):
        """Fully written block with the fewest valid pages, or None."""
        valid = self.valid[(pkg, plane)]
        free = self.free_in_block[(pkg, plane)]
        ppb = self.geometry.pages_per_block
        best = None
        for b in range(self.geometry.blocks):
            if free[b] == 0 and valid[b] < ppb and (best is None or valid[b] < valid[best]):
                best = b
        return best

    def valid_pages(self, pkg, plane, block):
        g = self.geometry
        die, pl = plane // g.planes, plane % g.planes
        out = []
        for p in range(g.pages_per_block):
            addr = PageAddress(die, pl, block, p)
            lid = self.p2l.get((pkg, addr))
            if lid is not None:
                out.append((lid, addr))
        return out

    def release_block(self, pkg, plane, block):
        g = self.geometry
        q = self.free[(pkg, plane)]
        q.extend((block, p) for p in range(g.pages_per_block))
        self.free_in_block[(pkg, plane)][block] = g.pages_per_block


# -- commands and sessions -------------------------------------------------------

COMMAND_KINDS = ("open", "open_cache", "close", "search", "gather", "full_read", "program",
                 "erase")


@dataclass
class Command:
    """A directly submitted unit of chip work.

    ``target`` is a logical page id (erase: ``(package, plane, block)``).
    ``payload`` is ``(key, mask)`` for search, a chunk bitmap for gather, the
    4096-byte logical image for program.
    """

    kind: str
    target: object
    payload: object = None
    submit_time: int = None
    deadline: int = None
    phases: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in COMMAND_KINDS:
            raise ValueError(f"unknown command kind {self.kind!r}")


class Ticket:
    """Handle of a submitted command: dispatch/completion times and result."""

    def __init__(self, command, process):
        self.command = command
        self.process = process
        self.dispatch_time = None
        self.complete_time = None

    @property
    def result(self):
        return self.process.value


@dataclass
class PointResult:
    bitmap: int
    chunk_bitmap: int
    data: bytes
    latency_ns: int


class _Plane:
    __slots__ = ("array", "regs", "order")

    def __init__(self, env):
        self.array = simpy.Resource(env, 1)
        self.regs = simpy.Resource(env, 2)
        self.order = deque()


class _Handle:
    """A page held in a plane register for the duration of a session."""

    __slots__ = ("pkg", "plane", "addr", "ppn", "logical", "open", "reg", "active", "slot")

    def __init__(self, pkg, plane, addr, ppn, logical, open_resp, reg, active, slot):
        self.pkg, self.plane, self.addr, self.ppn = pkg, plane, addr, ppn
        self.logical, self.open, self.reg, self.active, self.slot = (
            logical, open_resp, reg, active, slot)


class _Batch:
    """Requests sharing one open of one page."""

    __slots__ = ("kind", "logical", "members", "created", "tickets", "queue")

    def __init__(self, env, kind, logical):
        self.kind = kind
        self.logical = logical
        self.members = []
        self.created = env.now
        self.tickets = []
        self.queue = simpy.Store(env) if kind == "gather" else None


class _GatherMember:
    """One gather slot in a value-page session; fed once the bitmap is known."""

    __slots__ = ("queue", "sent", "done")

    def __init__(self, env, queue):
        self.queue = queue
        self.sent = False
        self.done = env.event()

    def submit(self, chunk_bitmap):
        if not self.sent:
            self.sent = True
            self.queue.put((self, chunk_bitmap))

    def cancel(self):
        self.submit(None)


@dataclass
class ControllerStats:
    opens: int = 0
    searches: int = 0
    merged_searches: int = 0
    search_batches: int = 0
    gathers: int = 0
    full_reads: int = 0
    programs: int = 0
    erases: int = 0
    gc_runs: int = 0
    gc_copies: int = 0
    ecc_fallbacks: int = 0
    chunk_fallbacks: int = 0
    read_retries: int = 0
    refreshes: int = 0
    internal_bytes: int = 0
    bus_active_ns: list = None

    def as_dict(self):
        d = dict(self.__dict__)
        d.pop("bus_active_ns")
        return d


class Controller:
    def __init__(self, geometry=ChipGeometry(), timing=ChipTiming(), power=PowerConfig(),
                 rconfig=reliability.DEFAULT_CONFIG, provisioned=None, scheduler="fcfs",
                 deadline_ns=4000, gc_low_water=None, seed=0, log_events=False, env=None):
        if scheduler not in ("fcfs", "deadline"):
            raise ValueError(f"unknown scheduler {scheduler!r}")
        self.env = env if env is not None else simpy.Environment()
        self.geometry = geometry
        self.timing = timing
        self.power = power
        self.rconfig = rconfig
        self.scheduler = scheduler
        self.deadline_ns = deadline_ns
        self.map = AddressMap(geometry, provisioned or geometry.total_pages // 4)
        self.gc_low_water = geometry.pages_per_block if gc_low_water is None else gc_low_water
        self.chips = [SimChip(geometry, timing, package=i, reliability_config=rconfig)
                      for i in range(geometry.packages)]
        self.planes = {(p, i): _Plane(self.env) for p in range(geometry.packages)
                       for i in range(geometry.planes_per_package)}
        self.bus = [simpy.Resource(self.env, 1) for _ in range(geometry.channels)]
        budget = power.budget_ua
        self.budget = ([simpy.Container(self.env, capacity=budget, init=budget)
                        for _ in range(geometry.packages)] if budget else None)
        self.in_flight_ua = [0] * geometry.packages
        self.max_in_flight_ua = [0] * geometry.packages
        self.ledger = EnergyLedger()
        self.stats = ControllerStats(bus_active_ns=[0] * geometry.channels)
        self.log_events = log_events
        self.events = []
        self.dispatches = []
        self.refresh_queue = reliability.RefreshQueue(rconfig.age_margin_ns)
        self.rng = np.random.default_rng(seed)
        self._pending = {}

    # -- helpers ---------------------------------------------------------------
    @property
    def now(self):
        return self.env.now

    def channel_of(self, pkg):
        return pkg // self.geometry.packages_per_channel

    def die_in_channel(self, pkg, plane):
        g = self.geometry
        return (pkg % g.packages_per_channel) * g.dies + plane // g.planes

    def map_logical(self, page_id):
        return self.map.map_logical(page_id)

    def physical(self, page_id):
        pkg, addr = self.map.lookup(page_id)
        return pkg, addr, self.chips[pkg].ppn(addr)

    def stored_page(self, page_id):
        pkg, addr = self.map.lookup(page_id)
        return self.chips[pkg].pages.get(addr)

    def _record(self, start, pkg, plane, command, phase):
        cat, mv, ua = self.power.phase_power(phase)
        self.ledger.add(cat, mv, ua, phase.duration_ns)
        if phase.category == "bus":
            ch = self.channel_of(pkg)
            self.stats.internal_bytes += phase.nbytes
            self.stats.bus_active_ns[ch] += phase.duration_ns
        if self.log_events:
            self.events.append((start, self.channel_of(pkg), self.die_in_channel(pkg, plane),
                                command, phase.label, ua / 1000, phase.nbytes,
                                phase.duration_ns, mv))

    def _exec(self, pkg, plane, label, phases, release=None, tickets=()):
        """Run one command's phases under the power budget.

        ``release`` is a (resource, request) pair freed after the first phase
        (the array is released once an open's array read has finished).
        """
        peak = self.power.peak_ua(phases)
        pool = self.budget[pkg] if self.budget else None
        if pool is not None and peak:
            if peak > pool.capacity:
                raise ValueError(f"{label}: peak {peak} uA exceeds the power budget")
            yield pool.get(peak)
        self.in_flight_ua[pkg] += peak
        self.max_in_flight_ua[pkg] = max(self.max_in_flight_ua[pkg], self.in_flight_ua[pkg])
        self.dispatches.append((self.env.now, label, pkg, plane))
        for t in tickets:
            if t.dispatch_time is None:
                t.dispatch_time = self.env.now
        env = self.env
        for i, ph in enumerate(phases):
            if ph.duration_ns > 0:
                if ph.category == "bus":
                    bus = self.bus[self.channel_of(pkg)]
                    req = bus.request()
                    yield req
                    start = env.now
                    yield env.timeout(ph.duration_ns)
                    bus.release(req)
                else:
                    start = env.now
                    yield env.timeout(ph.duration_ns)
                self._record(start, pkg, plane, label, ph)
            if i == 0 and release is not None:
                release[0].release(release[1])
        self.in_flight_ua[pkg] -= peak
        if pool is not None and peak:
            yield pool.put(peak)

    # -- register sessions -------------------------------------------------------
    def _load(self, logical, verify, tickets=(), on_dispatch=None):
        """Open ``logical`` into a register of its plane; returns a handle.

        ``on_dispatch`` runs once the plane's array is granted, just before
        the open is issued.
        """
        pkg, plane = self.map.plane_of(logical)
        P = self.planes[(pkg, plane)]
        reg = P.regs.request()
        yield reg
        arr = P.array.request()
        yield arr
        if on_dispatch is not None:
            on_dispatch()
        pkg, addr = self.map.lookup(logical)
        chip = self.chips[pkg]
        chip.set_mode(BusMode.MATCH)
        resp = chip.page_open(addr, self.env.now, verify)
        active = self.env.event()
        P.order.append(active)
        if len(P.order) == 1:
            active.succeed()
        self.stats.opens += 1
        label = "open" if resp.register == "active" else "open_cache"
        h = _Handle(pkg, plane, addr, chip.ppn(addr), logical, resp, reg, active, resp.register)
        # the array read and the verify transfer are separate chip operations, so the
        # read current is retired before the transfer is admitted
        yield from self._exec(pkg, plane, label, resp.phases[:1], release=(P.array, arr),
                              tickets=tickets)
        if len(resp.phases) > 1:
            yield from self._exec(pkg, plane, "verify_out", resp.phases[1:])
        return h

    def _close(self, h):
        P = self.planes[(h.pkg, h.plane)]
        self.chips[h.pkg].page_close(h.plane)
        P.order.popleft()
        if P.order:
            P.order[0].succeed()
        P.regs.release(h.reg)
        self.dispatches.append((self.env.now, "close", h.pkg, h.plane))

    def _full_read_loaded(self, h):
        """Stream the active page in storage mode and run page-level ECC."""
        chip = self.chips[h.pkg]
        chip.set_mode(BusMode.STORAGE)
        resp = chip.full_page_read(h.plane, self.env.now)
        self.stats.full_reads += 1
        yield from self._exec(h.pkg, h.plane, "full_read", resp.phases)
        if chip.is_erased(h.addr):
            chip.set_mode(BusMode.MATCH)
            return ERASED_PAYLOAD  # nothing was randomized
        corr = reliability.correct_full_page(resp.payload, resp.error_bits, h.ppn, self.rng,
                                             self.rconfig)
        for _ in range(corr.retries):
            self.stats.read_retries += 1
            retry = (Phase("array_read", self.timing.read_ns, "nand_read", 0, None),) + resp.phases
            yield from self._exec(h.pkg, h.plane, "read_retry", retry)
        chip.set_mode(BusMode.MATCH)
        return corr.payload

    def _stale(self, logical):
        return self.env.now - self.map.write_time[logical] > self.rconfig.age_margin_ns

    # -- batching ------------------------------------------------------------------
    def _batch(self, kind, logical):
        if self.scheduler == "fcfs":
            b = _Batch(self.env, kind, logical)
            self.env.process(self._dispatch(b))
            return b
        key = (kind, logical)
        b = self._pending.get(key)
        if b is None:
            b = _Batch(self.env, kind, logical)
            self._pending[key] = b
            self.env.process(self._expire(b, key))
        return b

    def _expire(self, b, key):
        yield self.env.timeout(self.deadline_ns)

        def close():
            # requests that queued up behind a busy plane still join this batch
            if self._pending.get(key) is b:
                del self._pending[key]
        yield from self._dispatch(b, close)

    def _dispatch(self, b, on_dispatch=None):
        if b.kind == "search":
            yield from self._search_session(b, on_dispatch)
        else:
            yield from self._gather_session(b, on_dispatch)

    def _search_session(self, b, on_dispatch=None):
        h = yield from self._load(b.logical, verify=True, tickets=b.tickets,
                                  on_dispatch=on_dispatch)
        n = len(b.members)
        self.stats.searches += n
        self.stats.search_batches += 1
        if n > 1:
            self.stats.merged_searches += n
        yield h.active
        try:
            status = reliability.verify_on_open(h.open.header, h.open.first_chunk, h.ppn,
                                                self.env.now, self.rconfig)
            if status is reliability.OpenStatus.CLEAN:
                chip = self.chips[h.pkg]
                for key, mask, done in b.members:
                    resp = chip.search(h.plane, key, mask, self.env.now)
                    yield from self._exec(h.pkg, h.plane, "search", resp.phases)
                    done.succeed(resp.bitmap)
            else:
                self.stats.ecc_fallbacks += 1
                if status is reliability.OpenStatus.STALE:
                    self.refresh_queue.add(b.logical, self.env.now)
                try:
                    payload = yield from self._full_read_loaded(h)
                except reliability.ReadFailure as exc:
                    for _, _, done in b.members:
                        done.fail(exc)
                else:
                    for key, mask, done in b.members:
                        done.succeed(match_page(payload, key, mask))
        finally:
            self._close(h)

    def _gather_session(self, b, on_dispatch=None):
        h = yield from self._load(b.logical, verify=False, tickets=b.tickets,
                                  on_dispatch=on_dispatch)
        yield h.active
        if self._stale(b.logical):
            self.refresh_queue.add(b.logical, self.env.now)
        chip = self.chips[h.pkg]
        try:
            for _ in b.members:
                m, bm = yield b.queue.get()
                if bm is None:
                    continue
                try:
                    resp = chip.gather(h.plane, bm, self.env.now)
                except ChunkUncorrectable:
                    self.stats.chunk_fallbacks += 1
                    try:
                        payload = yield from self._full_read_loaded(h)
                    except reliability.ReadFailure as exc:
                        m.done.fail(exc)
                        continue
                    m.done.succeed(page_chunks(payload, bm))
                    continue
                self.stats.gathers += 1
                yield from self._exec(h.pkg, h.plane, "gather", resp.phases)
                m.done.succeed(resp.data)
        finally:
            self._close(h)

    # -- match-path entry points -----------------------------------------------------
    def search(self, logical, key, mask=FULL_MASK):
        """Process: slot bitmap of ``key`` on page ``logical`` (no gather)."""
        self.map.lookup(logical)
        done = self.env.event()
        self._batch("search", logical).members.append((key, mask, done))
        bitmap = yield done
        return bitmap

    def point_query(self, key_page, value_page, key, mask=FULL_MASK):
        """Process: search the key page, gather the matching chunks of the value page.

        The value page is opened alongside the key page so its array read
        overlaps the key-page open and search.
        """
        self.map.lookup(key_page)
        self.map.lookup(value_page)
        t0 = self.env.now
        done = self.env.event()
        self._batch("search", key_page).members.append((key, mask, done))
        vb = self._batch("gather", value_page)
        member = _GatherMember(self.env, vb.queue)
        vb.members.append(member)
        try:
            bitmap = yield done
        except Exception:
            member.cancel()
            raise
        if not bitmap:
            member.cancel()
            raise KeyNotFound(f"key {key:#x} not on page {key_page}")
        chunk_bm = slot_to_chunk_bitmap(bitmap)
        member.submit(chunk_bm)
        data = yield member.done
        return PointResult(bitmap, chunk_bm, data, self.env.now - t0)

    def filter_page(self, logical, key, mask=FULL_MASK):
        """Process: search one page and gather its matching chunks in the same session.

        Returns ``(bitmap, chunk_bitmap, data)``; a bad header or an
        uncorrectable chunk falls back to a full read and host-side matching.
        """
        self.map.lookup(logical)
        h = yield from self._load(logical, verify=True)
        try:
            yield h.active
            status = reliability.verify_on_open(h.open.header, h.open.first_chunk, h.ppn,
                                                self.env.now, self.rconfig)
            chip = self.chips[h.pkg]
            if status is reliability.OpenStatus.CLEAN:
                resp = chip.search(h.plane, key, mask, self.env.now)
                self.stats.searches += 1
                self.stats.search_batches += 1
                yield from self._exec(h.pkg, h.plane, "search", resp.phases)
                bitmap = resp.bitmap
                chunk_bm = slot_to_chunk_bitmap(bitmap)
                if not chunk_bm:
                    return bitmap, 0, b""
                try:
                    g = chip.gather(h.plane, chunk_bm, self.env.now)
                except ChunkUncorrectable:
                    self.stats.chunk_fallbacks += 1
                    payload = yield from self._full_read_loaded(h)
                    return bitmap, chunk_bm, page_chunks(payload, chunk_bm)
                self.stats.gathers += 1
                yield from self._exec(h.pkg, h.plane, "gather", g.phases)
                return bitmap, chunk_bm, g.data
            self.stats.ecc_fallbacks += 1
            if status is reliability.OpenStatus.STALE:
                self.refresh_queue.add(logical, self.env.now)
            payload = yield from self._full_read_loaded(h)
            bitmap = match_page(payload, key, mask)
            chunk_bm = slot_to_chunk_bitmap(bitmap)
            return bitmap, chunk_bm, page_chunks(payload, chunk_bm)
        finally:
            self._close(h)

    # -- storage-path entry points -----------------------------------------------------
    def read_page(self, logical, tickets=()):
        """Process: full page read (storage mode); returns the logical payload."""
        self.map.lookup(logical)
        h = yield from self._load(logical, verify=False, tickets=tickets)
        try:
            yield h.active
            payload = yield from self._full_read_loaded(h)
        finally:
            self._close(h)
        return payload

    def write_page(self, logical, payload, tickets=()):
        """Process: program a fresh copy of ``logical`` (out of place, same plane)."""
        if len(payload) != PAGE_BYTES:
            raise ValueError("payload must be 4096 bytes")
        pkg, plane = self.map.plane_of(logical)
        P = self.planes[(pkg, plane)]
        arr = P.array.request()
        yield arr
        try:
            if self.map.free_pages(pkg, plane) <= self.gc_low_water:
                yield from self._collect(pkg, plane)
            addr = self.map.allocate(pkg, plane)
            chip = self.chips[pkg]
            img = reliability.page_image(payload, chip.ppn(addr), self.env.now, self.rconfig)
            resp = chip.program_page(addr, img, self.env.now)
            self.stats.programs += 1
            yield from self._exec(pkg, plane, "program", resp.phases, tickets=tickets)
            self.map.remap(logical, pkg, addr, img.write_time)
        finally:
            P.array.release(arr)
        return addr

    def _collect(self, pkg, plane):
        """Greedy GC on one plane; caller holds the plane's array."""
        victim = self.map.gc_victim(pkg, plane)
        if victim is None:
            return
        self.stats.gc_runs += 1
        chip = self.chips[pkg]
        g = self.geometry
        for lid, src in self.map.valid_pages(pkg, plane, victim):
            dst = self.map.allocate(pkg, plane)
            page = chip.pages[src]
            logical = reliability.logical_payload(page, chip.ppn(src), self.rconfig)
            img = reliability.page_image(logical, chip.ppn(dst), self.env.now, self.rconfig)
            chip.pages[dst] = img
            phases = (Phase("array_read", self.timing.read_ns, "nand_read", 0, None),
                      Phase("program", self.timing.program_ns, "nand_program", 0, None))
            self.stats.gc_copies += 1
            yield from self._exec(pkg, plane, "copyback", phases)
            self.map.remap(lid, pkg, dst, img.write_time)
        resp = chip.erase_block(plane // g.planes, plane % g.planes, victim, self.env.now)
        self.stats.erases += 1
        yield from self._exec(pkg, plane, "erase", resp.phases)
        self.map.release_block(pkg, plane, victim)

    def erase(self, pkg, plane, block, tickets=()):
        """Process: erase a block that holds no valid pages."""
        if self.map.valid[(pkg, plane)][block]:
            raise ValueError("block still holds valid pages")
        P = self.planes[(pkg, plane)]
        arr = P.array.request()
        yield arr
        try:
            g = self.geometry
            resp = self.chips[pkg].erase_block(plane // g.planes, plane % g.planes, block,
                                               self.env.now)
            self.stats.erases += 1
            yield from self._exec(pkg, plane, "erase", resp.phases, tickets=tickets)
            self.map.free[(pkg, plane)] = deque(
                x for x in self.map.free[(pkg, plane)] if x[0] != block)
            self.map.release_block(pkg, plane, block)
        finally:
            P.array.release(arr)

    def preload(self, logical, payload, now=0):
        """Place an image without simulated time (bulk load)."""
        pkg, addr = self.map.lookup(logical)
        chip = self.chips[pkg]
        chip.pages[addr] = reliability.page_image(payload, chip.ppn(addr), now, self.rconfig)
        self.map.write_time[logical] = now

    # -- direct command submission ---------------------------------------------------
    def submit(self, cmd, now=None):
        """Queue a single command; returns a :class:`Ticket` (a simpy process)."""
        now = self.env.now if now is None else now
        if now < self.env.now:
            raise ValueError("cannot submit in the past")
        if cmd.kind == "erase":
            pkg, plane, block = cmd.target
            if not (0 <= pkg < self.geometry.packages
                    and 0 <= plane < self.geometry.planes_per_package
                    and 0 <= block < self.geometry.blocks):
                raise InvalidAddress(f"block {cmd.target} outside geometry")
        else:
            self.map.lookup(cmd.target)
        cmd.submit_time = now
        ticket = Ticket(cmd, None)
        ticket.process = self.env.process(self._run_command(cmd, ticket, now))
        return ticket

    def _run_command(self, cmd, ticket, at):
        if at > self.env.now:
            yield self.env.timeout(at - self.env.now)
        kind = cmd.kind
        tickets = (ticket,)
        if kind in ("open", "open_cache"):
            h = yield from self._load(cmd.target, verify=True, tickets=tickets)
            yield h.active
            self._close(h)
            result = h.open
        elif kind == "close":
            raise ValueError("close is only meaningful inside a session")
        elif kind == "search":
            key, mask = cmd.payload
            done = self.env.event()
            b = self._batch("search", cmd.target)
            b.members.append((key, mask, done))
            b.tickets.append(ticket)
            result = yield done
        elif kind == "gather":
            h = yield from self._load(cmd.target, verify=False, tickets=tickets)
            try:
                yield h.active
                resp = self.chips[h.pkg].gather(h.plane, cmd.payload, self.env.now)
                self.stats.gathers += 1
                yield from self._exec(h.pkg, h.plane, "gather", resp.phases)
            finally:
                self._close(h)
            result = resp.data
        elif kind == "full_read":
            result = yield from self.read_page(cmd.target, tickets)
        elif kind == "program":
            result = yield from self.write_page(cmd.target, cmd.payload, tickets)
        else:
            result = yield from self.erase(*cmd.target, tickets=tickets)
        ticket.complete_time = self.env.now
        return result

    def run_until(self, event_or_time=None):
        return self.env.run(until=event_or_time)

    def call(self, process_gen):
        """Run one process to completion from the current time; returns its value."""
        proc = self.env.process(process_gen)
        return self.env.run(until=proc)

    # -- refresh ----------------------------------------------------------------------
    def refresh_tick(self):
        """Process: rewrite every queued page; returns the program addresses issued."""
        issued = []
        for logical in list(self.refresh_queue.entries):
            payload = yield from self.read_page(logical)
            addr = yield from self.write_page(logical, payload)
            self.stats.refreshes += 1
            issued.append((logical, addr))
            del self.refresh_queue.entries[logical]
        return issued

    # -- energy -------------------------------------------------------------------------
    def bus_idle_aj(self, elapsed_ns, active_ns=None):
        active = self.stats.bus_active_ns if active_ns is None else active_ns
        p = self.power
        return sum(p.bus_mv * p.bus_idle_ua * (elapsed_ns - a) for a in active)

    def ledger_with_idle(self, elapsed_ns=None, since=None):
        """Ledger including bus idle energy over ``elapsed_ns`` (defaults to now)."""
        elapsed = self.env.now if elapsed_ns is None else elapsed_ns
        led = self.ledger.copy()
        active = list(self.stats.bus_active_ns)
        if since is not None:
            led = led.minus(since[0])
            active = [a - b for a, b in zip(active, since[1])]
        led.aj["bus_idle"] = self.bus_idle_aj(elapsed, active)
        return led

    def snapshot(self):
        return self.ledger.copy(), list(self.stats.bus_active_ns), len(self.events)

    def export_events(self, path, start=0):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(EVENT_COLUMNS)
            for row in self.events[start:]:
                w.writerow(row)


def recompute_energy(events, channels, elapsed_ns, power=PowerConfig()):
    """Independent energy pass over an event log; returns attojoules per category."""
    out = dict.fromkeys(ENERGY_CATEGORIES, 0)
    active = [0] * channels
    for time_ns, ch, die, command, phase, current_ma, nbytes, dur, mv in events:
        ua = round(current_ma * 1000)
        if phase in ("verify_out", "bitmap_out", "gather_out", "page_out", "data_in"):
            out["bus_active"] += mv * ua * dur
            active[ch] += dur
        elif phase == "match":
            out["sim_match"] += mv * ua * dur
        elif phase == "array_read":
            out["nand_read"] += mv * ua * dur
        elif phase == "program":
            out["nand_program"] += mv * ua * dur
        elif phase == "erase":
            out["nand_erase"] += mv * ua * dur
        else:
            raise ValueError(f"unknown phase {phase!r}")
    out["bus_idle"] = sum(power.bus_mv * power.bus_idle_ua * (elapsed_ns - a) for a in active)
    return out


def page_chunks(payload, chunk_bitmap):
    return b"".join(chunk_bytes(payload, j) for j in bit_indices(chunk_bitmap & ((1 << CHUNKS) - 1)))


__all__ = ["Controller", "Command", "Ticket", "PowerConfig", "EnergyLedger", "AddressMap",
           "KeyNotFound", "OutOfRange", "PointResult", "recompute_energy", "CHUNK_BYTES"]
