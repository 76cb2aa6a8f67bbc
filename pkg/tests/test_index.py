import numpy as np
import pytest
import simpy

from simflash.controller import Controller, KeyNotFound
from simflash.index import (PAD_KEY, BaselineHost, Frame, LeafSet, PageCache, SimHost,
                            TopLevelIndex, find_slot, load_records, partition_gather,
                            point_lookup_oracle, preload, random_leafset, write_records)
from simflash.layout import CHUNKS, PAGE_BYTES
from simflash.oracles import naive_gather
from simflash.rows import FieldSpec


def system(mode, cache_pages, n_keys=4 * 512, seed=0, **kw):
    leaves = random_leafset(n_keys, np.random.default_rng(seed))
    ctl = Controller(provisioned=leaves.pages, seed=seed, **kw)
    preload(ctl, leaves)
    cls = SimHost if mode == "sim" else BaselineHost
    return leaves, ctl, cls(ctl, TopLevelIndex(leaves.first_keys()), cache_pages)


def test_leafset_layout():
    ls = LeafSet(np.arange(1, 600), np.arange(1, 600) * 10)
    assert ls.leaves == 2 and ls.pages == 4
    k, v = ls.leaf_arrays(1)
    assert int(k[86]) == 599 and int(k[87]) == PAD_KEY and int(v[87]) == 0
    kp, vp = ls.leaf_pages(0)
    assert find_slot(kp, 5) == 4 and int.from_bytes(vp[32:40], "big") == 50
    with pytest.raises(ValueError):
        LeafSet([3, 2], [0, 0])
    with pytest.raises(ValueError):
        LeafSet([PAD_KEY], [0])


def test_record_file_roundtrip(tmp_path):
    p = tmp_path / "rec.bin"
    write_records(p, np.array([1, 5, 9], dtype=np.uint64), np.array([7, 8, 9], dtype=np.uint64))
    ls = load_records(p)
    assert ls.keys.tolist() == [1, 5, 9] and ls.values.tolist() == [7, 8, 9]
    assert point_lookup_oracle(ls, 5) == 8
    with pytest.raises(KeyNotFound):
        point_lookup_oracle(ls, 6)


def test_top_level_index():
    top = TopLevelIndex([10, 20, 30])
    assert top.pages_of(10) == (0, 1) and top.pages_of(29) == (2, 3)
    assert top.leaf_of(99) == 2
    with pytest.raises(KeyNotFound):
        top.leaf_of(9)


def test_page_cache_lru():
    c = PageCache(2)
    assert c.insert(1, Frame(bytearray(1))) == []
    c.insert(2, Frame(bytearray(1), dirty=True))
    c.get(1)
    ev = c.insert(3, Frame(bytearray(1)))
    assert [p for p, _ in ev] == [2] and ev[0][1].dirty
    assert c.get(2) is None and (c.hits, c.misses) == (1, 1)
    with pytest.raises(ValueError):
        c.insert(3, Frame(bytearray(1)))
    with pytest.raises(ValueError):
        PageCache(-1)
    assert PageCache(0).insert(1, Frame(bytearray(1)))[0][0] == 1


@pytest.mark.parametrize("mode", ["baseline", "sim"])
def test_single_get_costs(mode):
    leaves, ctl, host = system(mode, 0)
    key = int(leaves.keys[700])
    res = ctl.call(host.get(key))
    assert res.value == int(leaves.values[700])
    assert res.host_bytes == (128 if mode == "sim" else 8192)


@pytest.mark.parametrize("mode", ["baseline", "sim"])
@pytest.mark.parametrize("cache_pages", [0, 1, 3])
@pytest.mark.parametrize("clients", [1, 6])
def test_hosts_match_reference_map(mode, cache_pages, clients):
    """Clients own disjoint keys that share pages, so every result is checkable exactly."""
    leaves, ctl, host = system(mode, cache_pages)
    ref = {int(k): int(v) for k, v in zip(leaves.keys, leaves.values)}
    rng = np.random.default_rng(cache_pages * 10 + clients)
    hot = [int(k) for k in rng.choice(leaves.keys, size=48, replace=False)]
    env = ctl.env
    errors = []

    def client(cid):
        mine = hot[cid::clients]
        for _ in range(60):
            key = mine[rng.integers(0, len(mine))]
            if rng.random() < 0.5:
                val = int(rng.integers(0, 1 << 63))
                ref[key] = val
                yield from host.put(key, val)
            else:
                res = yield from host.get(key)
                if res.value != ref[key]:
                    errors.append((key, res.value, ref[key]))
            assert len(host.cache) <= cache_pages
            if mode == "sim":
                assert all(f.dirty for f in host.cache.frames.values())

    env.run(until=env.all_of([env.process(client(i)) for i in range(clients)]))
    assert not errors
    ctl.call(host.flush())
    for key in hot:
        kp, vp = host.top.pages_of(key)
        slot = find_slot(ctl.call(ctl.read_page(kp)), key)
        assert int.from_bytes(ctl.call(ctl.read_page(vp))[slot * 8:slot * 8 + 8], "big") == ref[key]


def test_each_dirty_eviction_programs_once():
    leaves, ctl, host = system("sim", 1)
    keys = [int(leaves.keys[i * 512]) for i in range(4)]
    for k in keys:
        ctl.call(host.put(k, 1))
    # three evictions of distinct dirty frames
    assert host.programs == 3 and ctl.stats.programs == 3
    ctl.call(host.flush())
    assert host.programs == 4


def test_sim_get_prefers_dirty_buffer():
    leaves, ctl, host = system("sim", 2)
    key = int(leaves.keys[3])
    ctl.call(host.put(key, 42))
    before = ctl.stats.opens
    res = ctl.call(host.get(key))
    assert res.value == 42 and res.host_bytes == 0 and ctl.stats.opens == before
    other = int(leaves.keys[4])  # same leaf, slot not learned yet
    res = ctl.call(host.get(other))
    assert res.value == int(leaves.values[4]) and res.host_bytes == 64


def test_missing_key_raises():
    leaves, ctl, host = system("baseline", 2)
    with pytest.raises(KeyNotFound):
        ctl.call(host.get(int(leaves.keys[0]) + 1 if int(leaves.keys[1]) != int(leaves.keys[0]) + 1
                          else int(leaves.keys[0]) - 1))


def test_partition_gather_completeness(rng):
    ctl = Controller(provisioned=4)
    f = FieldSpec(10, 2)
    pages = []
    for lid in range(4):
        words = rng.integers(0, 1 << 63, size=512, dtype=np.uint64)
        words[rng.random(512) < 0.5] = np.uint64(0)  # sparse: many chunks single-partition
        page = words.astype(">u8").tobytes()
        pages.append(page)
        ctl.preload(lid, page)
    seen = {lid: 0 for lid in range(4)}
    for pid in range(4):
        out = ctl.call(partition_gather(ctl, range(4), f, pid))
        for lid, cbm, data in out:
            assert data == naive_gather(pages[lid], cbm)
            seen[lid] |= cbm
    assert all(v == (1 << CHUNKS) - 1 for v in seen.values())
    empty = ctl.call(partition_gather(ctl, [0], FieldSpec(0, 64), 12345))
    assert empty == [(0, 0, b"")]
