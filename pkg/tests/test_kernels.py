import os

import numpy as np
import pytest

from simflash import kernels
from simflash.layout import CHUNKS, FULL_MASK, SLOTS
from simflash.oracles import naive_fold, naive_match, random_page

from conftest import golden

BACKENDS = kernels.backends()


@pytest.fixture(params=sorted(BACKENDS))
def impl(request):
    return BACKENDS[request.param]


def test_compiled_backend_is_selected_when_built():
    if "cython" in BACKENDS and not os.environ.get("SIMFLASH_PURE_PYTHON"):
        assert kernels.BACKEND == "cython"
    else:
        assert kernels.BACKEND == "python"


def test_crc64_golden(impl):
    for v in golden("vectors.json")["crc64_xz"]:
        assert impl.crc64(bytes.fromhex(v["hex"])) == int(v["crc"], 16)


def test_keystream_golden(impl):
    for v in golden("vectors.json")["keystream"]:
        words = impl.keystream_words(v["page"])
        assert int(words[v["chunk"] * 8 + v["word"]]) == int(v["value"], 16)
        one = impl.keystream(v["page"], v["chunk"], 1)
        off = v["word"] * 8
        assert int.from_bytes(one[off:off + 8], "big") == int(v["value"], 16)


def test_keystream_is_page_stream_prefix(impl):
    whole = impl.keystream(77)
    assert len(whole) == 4096
    assert impl.keystream(77, 5, 3) == whole[5 * 64:8 * 64]
    assert impl.keystream_words(77).astype(">u8").tobytes() == whole


def test_xor_bytes(impl):
    a, b = os.urandom(4096), os.urandom(4096)
    out = impl.xor_bytes(a, b)
    assert out == bytes(x ^ y for x, y in zip(a, b))
    assert impl.xor_bytes(out, b) == a
    with pytest.raises(ValueError):
        impl.xor_bytes(a, b[:-1])


def test_match_slots_against_scan(impl, rng):
    for _ in range(50):
        key = int(rng.integers(0, 1 << 63))
        page = random_page(rng, {3, 100, 511}, key)
        for mask in (FULL_MASK, 0, 0xFFFF << 48, int(rng.integers(0, 1 << 63))):
            assert impl.match_slots(page, key, mask) == naive_match(page, key, mask)


def test_match_slots_per_slot_keys(impl, rng):
    page = random_page(rng)
    keys = np.frombuffer(page, dtype=">u8").astype(np.uint64)
    assert impl.match_slots(page, keys, FULL_MASK) == (1 << SLOTS) - 1
    keys = keys.copy()
    keys[7] ^= np.uint64(1)
    assert impl.match_slots(page, keys, FULL_MASK) == ((1 << SLOTS) - 1) & ~(1 << 7)


def test_fold_chunks(impl, rng):
    assert impl.fold_chunks(1 << 9) == 1 << 1
    assert impl.fold_chunks(0) == 0
    assert impl.fold_chunks((1 << SLOTS) - 1) == (1 << CHUNKS) - 1
    for _ in range(100):
        bm = int.from_bytes(rng.bytes(64), "little") & int.from_bytes(rng.bytes(64), "little")
        assert impl.fold_chunks(bm) == naive_fold(bm)


def test_backends_agree(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    for _ in range(20):
        page = random_page(rng)
        key, mask = int(rng.integers(0, 1 << 63)), int(rng.integers(0, 1 << 63))
        addr = int(rng.integers(0, 1 << 50))
        assert py.match_slots(page, key, mask) == cy.match_slots(page, key, mask)
        assert py.keystream(addr) == cy.keystream(addr)
        assert py.crc64(page) == cy.crc64(page)
