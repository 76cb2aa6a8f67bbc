"""Host side of the index: leaf layout, top-level index, page cache and the two query paths.

Leaf ``i`` is a pair of logical pages: keys in page ``2i`` and the matching
values, slot-aligned, in page ``2i + 1``.  Both hosts drive the same
:class:`~simflash.controller.Controller`; every method that touches the
device is a simpy process generator.
"""
import bisect
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import simpy

from simflash.chip import slot_to_chunk_bitmap
from simflash.controller import KeyNotFound
from simflash.layout import CHUNK_BYTES, FULL_MASK, PAGE_BYTES, SLOT_BYTES, SLOTS, bit_indices

PAD_KEY = (1 << 64) - 1
RECORD = np.dtype([("key", ">u8"), ("value", ">u8")])


# -- layout --------------------------------------------------------------------

@dataclass
class LeafSet:
    """Sorted keys and values packed 512 per leaf (last leaf padded)."""

    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.uint64)
        self.values = np.asarray(self.values, dtype=np.uint64)
        if self.keys.shape != self.values.shape or self.keys.ndim != 1 or not len(self.keys):
            raise ValueError("need equally long, non-empty key and value arrays")
        if np.any(self.keys[1:] <= self.keys[:-1]):
            raise ValueError("keys must be strictly increasing")
        if self.keys[-1] == np.uint64(PAD_KEY):
            raise ValueError("key 2**64-1 is reserved for padding")

    @property
    def leaves(self):
        return -(-len(self.keys) // SLOTS)

    @property
    def pages(self):
        return 2 * self.leaves

    def leaf_arrays(self, leaf):
        lo = leaf * SLOTS
        k = np.full(SLOTS, PAD_KEY, dtype=np.uint64)
        v = np.zeros(SLOTS, dtype=np.uint64)
        part = self.keys[lo:lo + SLOTS]
        k[:len(part)] = part
        v[:len(part)] = self.values[lo:lo + SLOTS]
        return k, v

    def leaf_pages(self, leaf):
        k, v = self.leaf_arrays(leaf)
        return k.astype(">u8").tobytes(), v.astype(">u8").tobytes()

    def first_keys(self):
        return self.keys[::SLOTS]


def load_records(path):
    """Read a sorted binary file of big-endian ``(key, value)`` 8-byte pairs."""
    raw = np.fromfile(path, dtype=RECORD)
    return LeafSet(raw["key"].astype(np.uint64), raw["value"].astype(np.uint64))


def write_records(path, keys, values):
    rec = np.empty(len(keys), dtype=RECORD)
    rec["key"] = keys
    rec["value"] = values
    rec.tofile(path)


def random_leafset(n_keys, rng):
    """Sorted unique random 63-bit keys with random values."""
    keys = np.unique(rng.integers(0, 1 << 63, size=n_keys + n_keys // 64 + 16, dtype=np.uint64))
    if len(keys) < n_keys:
        raise RuntimeError("too many key collisions")
    keys = np.sort(rng.choice(keys, size=n_keys, replace=False))
    values = rng.integers(0, 1 << 63, size=n_keys, dtype=np.uint64)
    return LeafSet(keys, values)


def preload(controller, leafset):
    """Write every leaf into the controller's flash without simulated time."""
    for leaf in range(leafset.leaves):
        kp, vp = leafset.leaf_pages(leaf)
        controller.preload(2 * leaf, kp)
        controller.preload(2 * leaf + 1, vp)


class TopLevelIndex:
    """In-memory map from a key to its leaf: the first key of each leaf, bisected."""

    def __init__(self, first_keys):
        self.first = [int(k) for k in first_keys]

    def leaf_of(self, key):
        i = bisect.bisect_right(self.first, key) - 1
        if i < 0:
            raise KeyNotFound(f"key {key:#x} below the smallest indexed key")
        return i

    def pages_of(self, key):
        leaf = self.leaf_of(key)
        return 2 * leaf, 2 * leaf + 1


def find_slot(key_page, key):
    """Slot of ``key`` in a key page, or None (host-side scan)."""
    arr = np.frombuffer(key_page, dtype=">u8")
    hits = np.flatnonzero(arr == np.uint64(key))
    return int(hits[0]) if len(hits) else None


def slot_word(page, slot):
    off = slot * SLOT_BYTES
    return int.from_bytes(page[off:off + SLOT_BYTES], "big")


# -- page cache ------------------------------------------------------------------

@dataclass
class Frame:
    data: bytearray
    dirty: bool = False
    slots: dict = field(default_factory=dict)  # key -> slot, learned from searches


class PageCache:
    """LRU frames with dirty flags; ``insert`` returns the evicted frames."""

    def __init__(self, capacity):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.frames = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self.frames)

    def __contains__(self, page):
        return page in self.frames

    def peek(self, page):
        return self.frames.get(page)

    def get(self, page):
        fr = self.frames.get(page)
        if fr is None:
            self.misses += 1
            return None
        self.hits += 1
        self.frames.move_to_end(page)
        return fr

    def insert(self, page, frame):
        if page in self.frames:
            raise ValueError(f"page {page} already cached")
        self.frames[page] = frame
        evicted = []
        while len(self.frames) > self.capacity:
            evicted.append(self.frames.popitem(last=False))
        return evicted

    def dirty_pages(self):
        return [p for p, f in self.frames.items() if f.dirty]


# -- hosts -----------------------------------------------------------------------

@dataclass
class OpResult:
    value: int = None
    host_bytes: int = 0
    device_ops: int = 0


class _Host:
    """Shared plumbing: single-flight fetches and write-back bookkeeping."""

    def __init__(self, controller, top, cache_pages):
        self.ctl = controller
        self.env = controller.env
        self.top = top
        self.cache = PageCache(cache_pages)
        self.fetching = {}   # page -> event carrying the payload
        self.writing = {}    # page -> event fired when its write-back lands
        self.locks = {}
        self.programs = 0
        self.write_bytes = 0

    def _settled(self, page):
        """Wait until ``page`` has no write-back in flight."""
        while page in self.writing:
            yield self.writing[page]

    def _read_once(self, page):
        """Full read of ``page``, shared by concurrent callers."""
        ev = self.fetching.get(page)
        if ev is not None:
            data = yield ev
            return data
        ev = self.env.event()
        self.fetching[page] = ev
        try:
            yield from self._settled(page)
            data = yield from self.ctl.read_page(page)
        except BaseException as exc:
            del self.fetching[page]
            ev.fail(exc)
            ev.defused = True
            raise
        del self.fetching[page]
        ev.succeed(data)
        return data

    def _lock(self, page):
        """Per-page mutex held across a put's read-modify-write."""
        lk = self.locks.get(page)
        if lk is None:
            lk = self.locks[page] = simpy.Resource(self.env, 1)
        return lk

    def _start_write_back(self, page, data):
        """Register the write-back now (so readers see it) and run it in order."""
        prev = self.writing.get(page)
        done = self.env.event()
        self.writing[page] = done
        return self.env.process(self._write_back(page, bytes(data), prev, done))

    def _write_back(self, page, data, prev, done):
        if prev is not None:
            yield prev  # programs of one page land in eviction order
        try:
            yield from self.ctl.write_page(page, data)
        finally:
            if self.writing.get(page) is done:
                del self.writing[page]
            done.succeed()
        self.programs += 1
        self.write_bytes += PAGE_BYTES

    def _begin_evict(self, evicted):
        """Start write-backs of the dirty victims; returns an event to wait on, or None."""
        procs = [self._start_write_back(p, f.data) for p, f in evicted if f.dirty]
        return self.env.all_of(procs) if procs else None

    def _evict(self, evicted):
        ev = self._begin_evict(evicted)
        if ev is not None:
            yield ev

    def _parallel(self, *gens):
        procs = [self.env.process(g) for g in gens]
        yield self.env.all_of(procs)
        return [p.value for p in procs]

    def flush(self):
        """Process: write back every dirty frame (not used by the experiments)."""
        evicted = [(p, f) for p, f in self.cache.frames.items() if f.dirty]
        for _, f in evicted:
            f.dirty = False
        yield from self._evict([(p, Frame(f.data, True)) for p, f in evicted])


class BaselineHost(_Host):
    """CPU-centric path: whole pages through the page cache, scans on the host."""

    def _frame(self, page):
        """Resident frame of ``page``, fetching on a miss.

        Victims are handed to write-back at eviction time; the returned event
        (or None) fires when those write-backs land.
        """
        fr = self.cache.get(page)
        if fr is not None:
            return fr, 0, None
        data = yield from self._read_once(page)
        fr = self.cache.peek(page)  # a concurrent fetch may have inserted it
        if fr is not None:
            return fr, PAGE_BYTES, None
        fr = Frame(bytearray(data))
        return fr, PAGE_BYTES, self._begin_evict(self.cache.insert(page, fr))

    def _leaf(self, key):
        kp, vp = self.top.pages_of(key)
        (kf, kb, ke), (vf, vb, ve) = yield from self._parallel(self._frame(kp), self._frame(vp))
        return kp, vp, kf, vf, kb + vb, [e for e in (ke, ve) if e is not None]

    def _wait(self, events):
        if events:
            yield self.env.all_of(events)

    def get(self, key):
        kp, vp, kf, vf, nbytes, pending = yield from self._leaf(key)
        slot = find_slot(kf.data, key)
        yield from self._wait(pending)
        if slot is None:
            raise KeyNotFound(f"key {key:#x} not indexed")
        return OpResult(slot_word(vf.data, slot), nbytes, nbytes // PAGE_BYTES)

    def full_page_read(self, key):
        kp, vp, kf, vf, nbytes, pending = yield from self._leaf(key)
        yield from self._wait(pending)
        return OpResult(None, nbytes, nbytes // PAGE_BYTES)

    def put(self, key, value):
        kp, vp = self.top.pages_of(key)
        nbytes = 0
        pending = []
        word = value.to_bytes(SLOT_BYTES, "big")
        with self._lock(vp).request() as lock:
            yield lock
            while True:
                yield from self._settled(vp)
                kp, vp, kf, vf, nb, ev = yield from self._leaf(key)
                nbytes += nb
                pending += ev
                slot = find_slot(kf.data, key)
                if slot is None:
                    break
                if self.cache.capacity == 0:
                    vf.data[slot * SLOT_BYTES:(slot + 1) * SLOT_BYTES] = word
                    pending.append(self._begin_evict([(vp, Frame(vf.data, True))]))
                    break
                if self.cache.peek(vp) is vf and vp not in self.writing:
                    vf.data[slot * SLOT_BYTES:(slot + 1) * SLOT_BYTES] = word
                    vf.dirty = True
                    break
                # lost the frame to a concurrent eviction; retry
        # write-backs are registered before unlocking, so the next writer waits for them
        yield from self._wait(pending)
        if slot is None:
            raise KeyNotFound(f"key {key:#x} not indexed")
        return OpResult(None, nbytes, nbytes // PAGE_BYTES)


class SimHost(_Host):
    """Search/gather path: reads bypass the cache, which only buffers dirty value pages."""

    def _slot(self, kp, key):
        bitmap = yield from self.ctl.search(kp, key)
        if not bitmap:
            raise KeyNotFound(f"key {key:#x} not indexed")
        return (bitmap & -bitmap).bit_length() - 1

    def get(self, key):
        kp, vp = self.top.pages_of(key)
        yield from self._settled(vp)
        fr = self.cache.peek(vp)
        if fr is not None:
            slot = fr.slots.get(key)
            if slot is None:
                slot = yield from self._slot(kp, key)
                fr.slots[key] = slot
                return OpResult(slot_word(fr.data, slot), SLOTS // 8, 1)
            return OpResult(slot_word(fr.data, slot), 0, 0)
        res = yield from self.ctl.point_query(kp, vp, key)
        slot = (res.bitmap & -res.bitmap).bit_length() - 1
        chunks = bit_indices(res.chunk_bitmap)
        off = chunks.index(slot // 8) * CHUNK_BYTES + (slot % 8) * SLOT_BYTES
        value = int.from_bytes(res.data[off:off + SLOT_BYTES], "big")
        return OpResult(value, SLOTS // 8 + len(res.data), 2)

    def full_page_read(self, key):
        kp, vp = self.top.pages_of(key)
        gens = [self._read_once(kp)]
        if self.cache.peek(vp) is None:
            gens.append(self._read_once(vp))
        yield from self._parallel(*gens)
        return OpResult(None, PAGE_BYTES * len(gens), len(gens))

    def put(self, key, value):
        kp, vp = self.top.pages_of(key)
        with self._lock(vp).request() as lock:
            yield lock
            res, pending = yield from self._put_locked(key, value, kp, vp)
        if pending is not None:
            yield pending
        return res

    def _put_locked(self, key, value, kp, vp):
        nbytes = ops = 0
        word = value.to_bytes(SLOT_BYTES, "big")
        while True:
            yield from self._settled(vp)
            fr = self.cache.get(vp)
            if fr is not None and key in fr.slots:
                slot = fr.slots[key]
                fr.data[slot * SLOT_BYTES:(slot + 1) * SLOT_BYTES] = word
                fr.dirty = True
                return OpResult(None, nbytes, ops), None
            gens = [self._slot(kp, key)]
            if fr is None:
                gens.append(self._read_once(vp))
            out = yield from self._parallel(*gens)
            nbytes += SLOTS // 8 + (PAGE_BYTES if fr is None else 0)
            ops += len(gens)
            slot = out[0]
            if vp in self.writing:
                continue
            cur = self.cache.peek(vp)
            if cur is not None:
                cur.slots[key] = slot  # resident (again): next pass updates in place
                continue
            if fr is not None:
                continue  # our frame was evicted meanwhile; refetch
            fr = Frame(bytearray(out[1]), True, {key: slot})
            fr.data[slot * SLOT_BYTES:(slot + 1) * SLOT_BYTES] = word
            return OpResult(None, nbytes, ops), self._begin_evict(self.cache.insert(vp, fr))


def partition_gather(controller, page_ids, field, partition_id):
    """Process: per page, the chunks holding at least one member of a partition.

    Returns ``[(page_id, chunk_bitmap, data), ...]``.
    """
    key = field.place(partition_id)
    out = []
    for pid in page_ids:
        _, chunk_bm, data = yield from controller.filter_page(pid, key, field.mask)
        out.append((pid, chunk_bm, data))
    return out


def point_lookup_oracle(leafset, key):
    i = int(np.searchsorted(leafset.keys, np.uint64(key)))
    if i == len(leafset.keys) or int(leafset.keys[i]) != key:
        raise KeyNotFound(key)
    return int(leafset.values[i])


__all__ = ["LeafSet", "TopLevelIndex", "PageCache", "Frame", "BaselineHost", "SimHost",
           "partition_gather", "preload", "load_records", "write_records", "random_leafset",
           "find_slot", "slot_to_chunk_bitmap", "FULL_MASK", "KeyNotFound"]
