import numpy as np
import pytest

from simflash import reliability as rel
from simflash.layout import (CHUNK_BYTES, HEADER_BIT_BASE, MAGIC, PAGE_BYTES, PAYLOAD_BITS,
                             RAW_BITS, FlashPage, VerificationHeader, flip_bits, split_chunks)
from simflash.oracles import naive_crc64, naive_keystream_word

from conftest import GOLDEN, page_of

import os


def image(logical, ppn=11, now=0, config=rel.DEFAULT_CONFIG):
    return rel.build_page_image(split_chunks(logical), ppn, now, config)


def test_config_validation():
    with pytest.raises(ValueError):
        rel.ReliabilityConfig(chunk_t=-1)
    with pytest.raises(ValueError):
        rel.ReliabilityConfig(p_retry=1.5)


def test_header_layout():
    h = VerificationHeader(write_timestamp=7, magic=MAGIC, crc=0xAB)
    raw = h.to_bytes()
    assert raw[:8] == (0xAB).to_bytes(8, "big") and raw[16:] == b"SiM-MAGC"
    assert VerificationHeader.from_bytes(raw) == h
    with pytest.raises(ValueError):
        VerificationHeader.from_bytes(raw[:-1])


def test_header_crc_matches_reference():
    chunk = bytes(range(64))
    ref = naive_crc64(chunk + (99).to_bytes(8, "big") + MAGIC.to_bytes(8, "big"))
    assert rel.header_crc(chunk, 99) == ref


def test_randomized_storage_differs_but_derandomizes(rng):
    logical = rng.bytes(PAGE_BYTES)
    img = image(logical, ppn=3)
    assert img.payload != logical
    assert rel.logical_payload(img, 3) == logical
    word0 = int.from_bytes(img.payload[:8], "big") ^ int.from_bytes(logical[:8], "big")
    assert word0 == naive_keystream_word(3, 0, 0)
    plain = image(logical, config=rel.ReliabilityConfig(randomize=False))
    assert plain.payload == logical


def test_randomize_key_copies():
    copies = rel.randomize_key(5, 9)
    assert copies.shape == (512,)
    assert int(copies[10]) == 5 ^ naive_keystream_word(9, 1, 2)
    assert set(rel.randomize_key(5, 9, enabled=False).tolist()) == {5}


def test_open_statuses():
    img = image(page_of([1, 2]), ppn=4, now=1000)
    chunk0 = img.raw_payload()[:CHUNK_BYTES]
    cfg = rel.ReliabilityConfig(age_margin_ns=500)
    assert rel.verify_on_open(img.raw_header(), chunk0, 4, 1500, cfg) is rel.OpenStatus.CLEAN
    assert rel.verify_on_open(img.raw_header(), chunk0, 4, 1501, cfg) is rel.OpenStatus.STALE
    assert rel.verify_on_open(img.raw_header(), chunk0, 5, 1000) is rel.OpenStatus.CRC_MISMATCH


def test_every_single_header_region_flip_is_detected():
    img = image(page_of(range(512)), ppn=21, now=123456)
    chunk0 = img.raw_payload()[:CHUNK_BYTES]
    hdr = img.raw_header()
    for bit in range(64 * 8):  # chunk 0
        assert rel.verify_on_open(hdr, flip_bits(chunk0, [bit]), 21, 123456) \
            is rel.OpenStatus.CRC_MISMATCH
    for bit in range(24 * 8):  # crc, timestamp, magic
        assert rel.verify_on_open(flip_bits(hdr, [bit]), chunk0, 21, 123456) \
            is rel.OpenStatus.CRC_MISMATCH


def test_verify_chunk_thresholds():
    chunk = bytes(range(64))
    parity = rel.chunk_parity(chunk)
    assert rel.verify_chunk(chunk, parity, []).status is rel.ChunkStatus.OK
    for n in range(1, 4):
        bad = flip_bits(chunk, list(range(n)))
        res = rel.verify_chunk(bad, parity, list(range(n)))
        assert res.status is rel.ChunkStatus.CORRECTED and res.data == chunk and res.corrected == n
    bad = flip_bits(chunk, [0, 1, 2, 3])
    assert rel.verify_chunk(bad, parity, [0, 1, 2, 3]).status is rel.ChunkStatus.UNCORRECTABLE
    # corruption the ledger does not know about is still detected by the parity
    assert rel.verify_chunk(flip_bits(chunk, [9]), parity, []).status \
        is rel.ChunkStatus.UNCORRECTABLE


def test_full_page_correction_and_retries(rng):
    logical = rng.bytes(PAGE_BYTES)
    img = image(logical, ppn=8)
    rel.inject_errors(img, count=72, rng=rng)
    res = rel.correct_full_page(img.raw_payload(), img.error_bits, 8, rng)
    assert res.payload == logical and res.retries == 0 and res.errors == 72
    rel.inject_errors(img, count=8, rng=rng)
    res = rel.correct_full_page(img.raw_payload(), img.error_bits, 8, rng)
    assert res.payload == logical and res.retries >= 1
    hopeless = rel.ReliabilityConfig(p_retry=0.0)
    with pytest.raises(rel.ReadFailure) as exc:
        rel.correct_full_page(img.raw_payload(), img.error_bits, 8, rng, hopeless)
    assert exc.value.retries == 5


def test_expected_retries_matches_simulation():
    rng = np.random.default_rng(5)
    cfg = rel.ReliabilityConfig(page_t=10, retry_budget=5)
    n = 24
    total = 0
    trials = 4000
    errs = list(range(n))
    for _ in range(trials):
        try:
            total += rel.correct_full_page(bytes(PAGE_BYTES), errs, 0, rng, cfg).retries
        except rel.ReadFailure as exc:
            total += exc.retries
    assert abs(total / trials - rel.expected_retries(n, cfg)) < 0.1
    assert rel.expected_retries(10, cfg) == 0.0


def test_inject_errors_validation(rng):
    img = image(bytes(PAGE_BYTES))
    with pytest.raises(ValueError):
        rel.inject_errors(img)
    with pytest.raises(ValueError):
        rel.inject_errors(img, positions=[RAW_BITS])
    assert rel.inject_errors(img, positions=[HEADER_BIT_BASE]) == [HEADER_BIT_BASE]
    assert img.payload_errors() == []


def test_error_free_chunks_untouched(rng):
    logical = rng.bytes(PAGE_BYTES)
    img = image(logical, ppn=2)
    rel.inject_errors(img, positions=[64 * 8 * 5 + 1])
    raw = img.raw_payload()
    for j in range(64):
        if j == 5:
            continue
        data = rel.derandomize_chunk(raw[j * 64:(j + 1) * 64], 2, j)
        res = rel.verify_chunk(data, img.parities[j], img.chunk_errors(j))
        assert res.status is rel.ChunkStatus.OK and res.data == logical[j * 64:(j + 1) * 64]


def test_fault_scenarios_file(tmp_path):
    sc = rel.load_fault_scenarios(os.path.join(GOLDEN, "faults.json"))
    assert sc[0] == (4, [32768]) and len(sc) == 4
    bad = tmp_path / "bad.json"
    bad.write_text('[{"page": 1}]')
    with pytest.raises(ValueError):
        rel.load_fault_scenarios(bad)
    bad.write_text('{"page": 1}')
    with pytest.raises(ValueError):
        rel.load_fault_scenarios(bad)


def test_refresh_queue_and_tick():
    q = rel.RefreshQueue(10)
    assert q.add(3, 0) and not q.add(3, 5)
    assert len(q) == 1 and 3 in q
    assert rel.refresh_tick(rel.RefreshQueue(), None, None, 0) == []
    issued = rel.refresh_tick(q, lambda p: b"x", lambda p, d, now: ("program", p, now), 77)
    assert issued == [("program", 3, 77)] and len(q) == 0

    def failing(page):
        raise rel.ReadFailure(page, 100, 5)
    q.add(4, 0)
    with pytest.raises(rel.ReadFailure):
        rel.refresh_tick(q, failing, None, 0)
    assert 4 in q


def test_flash_page_validation():
    with pytest.raises(ValueError):
        FlashPage(b"\0", VerificationHeader(0, MAGIC, 0), (0,) * 64, 0)
    assert PAYLOAD_BITS == 4096 * 8
