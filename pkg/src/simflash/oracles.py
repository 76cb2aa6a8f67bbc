"""Brute-force reference implementations and self-check suites.

The references here are deliberately naive (per-slot Python loops, per-bit
arithmetic) so they share no code with the kernels they check.  Each suite
returns ``(passed, detail)``; ``simflash oracle --check <suite>`` runs them.
"""
import numpy as np

from simflash import kernels
from simflash.chip import match_page, slot_to_chunk_bitmap
from simflash.layout import CHUNK_BYTES, CHUNKS, FULL_MASK, PAGE_BYTES, SLOTS

CRC64_CHECK = 0x995DC9BBDF1939FA  # CRC-64/XZ of b"123456789"


def naive_match(payload, key, mask):
    bm = 0
    for i in range(SLOTS):
        v = int.from_bytes(payload[8 * i:8 * i + 8], "big")
        if (v ^ key) & mask == 0:
            bm |= 1 << i
    return bm


def naive_fold(bitmap):
    out = 0
    for j in range(CHUNKS):
        if any(bitmap >> (8 * j + k) & 1 for k in range(8)):
            out |= 1 << j
    return out


def naive_gather(payload, chunk_bitmap):
    return b"".join(payload[CHUNK_BYTES * j:CHUNK_BYTES * (j + 1)]
                    for j in range(CHUNKS) if chunk_bitmap >> j & 1)


def naive_crc64(data):
    crc = FULL_MASK
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xC96C5795D7870F42 if crc & 1 else 0)
    return crc ^ FULL_MASK


def naive_keystream_word(page_address, chunk, j):
    m = FULL_MASK
    z = ((page_address * 0xD1B54A32D192ED03) + chunk + (j + 1) * 0x9E3779B97F4A7C15) & m
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
    return z ^ (z >> 31)


def random_page(rng, plant=None, key=None):
    words = rng.integers(0, 1 << 63, size=SLOTS, dtype=np.uint64) * np.uint64(2) + \
        rng.integers(0, 2, size=SLOTS, dtype=np.uint64)
    if plant is not None:
        words[list(plant)] = np.uint64(key)
    return words.astype(">u8").tobytes()


def random_mask(rng):
    kind = rng.integers(0, 4)
    if kind == 0:
        return FULL_MASK
    if kind == 1:
        return 0
    if kind == 2:  # one contiguous field
        width = int(rng.integers(1, 65))
        off = int(rng.integers(0, 65 - width))
        return ((1 << width) - 1) << (64 - off - width)
    return int(rng.integers(0, 1 << 63)) << 1 | int(rng.integers(0, 2))


# -- suites --------------------------------------------------------------------------

def check_match(n=10_000, seed=1):
    rng = np.random.default_rng(seed)
    for t in range(n):
        key = int(rng.integers(0, 1 << 63))
        plant = set(rng.choice(SLOTS, size=int(rng.integers(0, 5)), replace=False).tolist())
        page = random_page(rng, plant, key)
        mask = random_mask(rng)
        # derive the key from a slot half the time so masked matches are common
        if t % 2:
            key = int.from_bytes(page[8 * int(rng.integers(0, SLOTS)):][:8], "big") ^ (
                int(rng.integers(0, 1 << 63)) & ~mask & FULL_MASK)
        if match_page(page, key, mask) != naive_match(page, key, mask):
            return False, f"instance {t}: bitmap differs"
    return True, f"{n} instances"


def check_chunks(n=10_000, seed=2):
    rng = np.random.default_rng(seed)
    for t in range(n):
        density = rng.random() ** 3
        bits = rng.random(SLOTS) < density
        bm = sum(1 << i for i in np.flatnonzero(bits).tolist())
        if slot_to_chunk_bitmap(bm) != naive_fold(bm):
            return False, f"instance {t}: fold differs"
    return True, f"{n} instances"


def check_gather(n=10_000, seed=3):
    from simflash import reliability
    from simflash.chip import SimChip, PageAddress
    from simflash.layout import split_chunks
    rng = np.random.default_rng(seed)
    chip = SimChip()
    for t in range(n):
        addr = PageAddress(int(rng.integers(0, 2)), 0, int(rng.integers(0, 32)),
                           int(rng.integers(0, 128)))
        logical = rng.bytes(PAGE_BYTES)
        chip.pages[addr] = reliability.build_page_image(split_chunks(logical), chip.ppn(addr), 0)
        chip.registers[addr.die].active = None
        chip.array_busy_until[addr.die] = 0
        chip.page_open(addr, 0, verify=False)
        cbm = int(rng.integers(0, 1 << 63)) << 1 | int(rng.integers(0, 2))
        cbm &= int(rng.integers(0, 1 << 63)) << 1 | 1  # vary density
        got = chip.gather(addr.die, cbm, 0).data
        chip.page_close(addr.die)
        if got != naive_gather(logical, cbm):
            return False, f"instance {t}: gather differs"
    return True, f"{n} instances"


def check_randomization(n=1000, seed=4):
    from simflash import reliability
    from simflash.chip import SimChip, PageAddress
    from simflash.layout import split_chunks
    rng = np.random.default_rng(seed)
    chip = SimChip()
    for t in range(n):
        addr = PageAddress(0, 0, int(rng.integers(0, 32)), int(rng.integers(0, 128)))
        key = int(rng.integers(0, 1 << 63))
        logical = random_page(rng, set(rng.choice(SLOTS, 3, replace=False).tolist()), key)
        mask = random_mask(rng)
        chip.pages[addr] = reliability.build_page_image(split_chunks(logical), chip.ppn(addr), 0)
        chip.registers[0].active = None
        chip.array_busy_until[0] = 0
        chip.page_open(addr, 0, verify=False)
        got = chip.search(0, key, mask, 0).bitmap
        chip.page_close(0)
        if got != naive_match(logical, key, mask):
            return False, f"instance {t}: randomized search differs"
    return True, f"{n} instances"


def check_rows(n=10_000, seed=5):
    from simflash.rows import FieldSpec, decode_row, encode_row
    rng = np.random.default_rng(seed)
    for t in range(n):
        widths = []
        left = 64
        while left and rng.random() < 0.8:
            w = int(rng.integers(1, left + 1))
            widths.append(w)
            left -= w
        if not widths:
            widths = [64]
        fields, off = [], 0
        for w in widths:
            fields.append(FieldSpec(off, w))
            off += w
        vals = [int(rng.integers(0, 1 << min(w, 62))) << max(0, w - 62) for w in widths]
        key = encode_row(vals, fields)
        ref, pos = 0, 0
        for v, w in zip(vals, widths):
            for b in range(w):  # bit by bit, MSB first
                if v >> (w - 1 - b) & 1:
                    ref |= 1 << (63 - pos - b)
            pos += w
        if key != ref or decode_row(key, fields) != vals:
            return False, f"instance {t}: encoding differs"
    return True, f"{n} instances"


def _admitted(plan, values):
    """Boolean array: which field values survive both chip sub-queries (mask semantics)."""
    v = values.astype(np.uint64) << np.uint64(plan.field.shift)
    uk, um = (np.uint64(x) for x in plan.upper)
    lk, lm = (np.uint64(x) for x in plan.lower)
    return (((v ^ uk) & um) == 0) & (((v ^ lk) & lm) != 0)


def check_range(width=12, samples=2000, seed=6):
    """Superset over every ``low < high`` of a ``width``-bit field; refinement and the
    second chip pass exact on every value for ``samples`` random bounds and every
    bound pair of an 8-bit field."""
    from simflash.rows import (FieldSpec, decompose_range, refine_range,
                               second_pass_queries)
    f = FieldSpec(64 - width, width)
    size = 1 << width
    values = np.arange(size, dtype=np.int64)
    plans = {}
    pairs = 0
    for lo in range(1, size):
        b = lo.bit_length() - 1
        his = np.arange(lo + 1, size)
        for a in range(width + 1):
            sel = his[((his - 1) >> a == 0) & ((his - 1) >> max(a - 1, 0) >= (1 if a else 0))]
            if not len(sel):
                continue
            key = (a, b)
            if key not in plans:
                plan = decompose_range(lo, int(sel[0]), f)
                adm = _admitted(plan, values)
                plans[key] = np.concatenate(([0], np.cumsum(adm)))
            cum = plans[key]
            # admitted count strictly inside (lo, hi) must equal hi - lo - 1
            inside = cum[sel] - cum[lo + 1]
            if np.any(inside != sel - lo - 1):
                bad = int(sel[np.flatnonzero(inside != sel - lo - 1)[0]])
                return False, f"({lo},{bad}): plan drops a value in range"
            pairs += len(sel)
    if pairs != (size - 1) * (size - 2) // 2:
        return False, f"covered {pairs} bound pairs"

    def exact_checks(fs, lo, hi):
        plan = decompose_range(lo, hi, fs)
        vals = np.arange(1 << fs.width, dtype=np.int64)
        first = _admitted(plan, vals)
        exact = (vals > lo) & (vals < hi)
        rows = [(int(v), int(v) << fs.shift) for v in np.flatnonzero(first)]
        refined = [k >> fs.shift for _, k in refine_range(plan, rows)]
        if refined != np.flatnonzero(exact).tolist():
            return f"({lo},{hi}): refine is not exact"
        hits = np.zeros(len(vals), dtype=bool)
        shifted = vals.astype(np.uint64) << np.uint64(fs.shift)
        for k, m in second_pass_queries(plan):
            hits |= ((shifted ^ np.uint64(k)) & np.uint64(m)) == 0
        if np.any((first & hits) != exact):
            return f"({lo},{hi}): second pass is not exact"
        return None

    rng = np.random.default_rng(seed)
    for _ in range(samples):
        lo, hi = sorted(rng.choice(np.arange(1, size), 2, replace=False).tolist())
        err = exact_checks(f, lo, hi)
        if err:
            return False, err
    f8 = FieldSpec(20, 8)
    for lo in range(1, 256):
        for hi in range(lo + 1, 256):
            err = exact_checks(f8, lo, hi)
            if err:
                return False, err
    return True, f"{pairs} bound pairs superset, {samples} + all 8-bit pairs exact"


def check_range_example():
    from simflash.rows import FieldSpec, decompose_range, refine_range, rows_of, run_plan
    salary = FieldSpec(0, 16, "salary")
    rows = [800, 4000, 9000]
    words = [salary.place(v) | 7 for v in rows] + [0xFFFFFFFFFFFFFFFF] * (SLOTS - 3)
    page = np.array(words, dtype=np.uint64).astype(">u8").tobytes()
    plan = decompose_range(2000, 7000, salary)
    up = match_page(page, *plan.upper) & 0b111
    lo = match_page(page, *plan.lower) & 0b111
    final = run_plan(plan, page) & 0b111
    as_str = lambda bm: "".join("1" if bm >> i & 1 else "0" for i in range(3))
    got = (as_str(up), as_str(~lo & 0b111), as_str(final))
    exact = [salary.extract(k) for _, k in refine_range(plan, rows_of(page, final))]
    ok = got == ("110", "011", "010") and plan.upper_limit == 8191 and plan.lower_limit == 1023
    return ok and exact == [4000], f"bitmaps {got}, refined {exact}"


def check_partition(n=10_000, seed=7):
    from simflash.rows import FieldSpec
    rng = np.random.default_rng(seed)
    for t in range(n):
        width = int(rng.integers(1, 7))
        f = FieldSpec(int(rng.integers(0, 64 - width + 1)), width)
        page = random_page(rng)
        pid = int(rng.integers(0, 1 << width))
        bm = match_page(page, f.place(pid), f.mask)
        data = naive_gather(page, slot_to_chunk_bitmap(bm))
        ref = b""
        for j in range(CHUNKS):
            chunk = page[CHUNK_BYTES * j:CHUNK_BYTES * (j + 1)]
            if any(f.extract(int.from_bytes(chunk[8 * k:8 * k + 8], "big")) == pid
                   for k in range(8)):
                ref += chunk
        if data != ref:
            return False, f"instance {t}: partition chunks differ"
    return True, f"{n} instances"


def check_kernels(seed=8):
    rng = np.random.default_rng(seed)
    if kernels.crc64(b"123456789") != CRC64_CHECK:
        return False, "crc64 check value"
    for _ in range(50):
        data = rng.bytes(int(rng.integers(0, 200)))
        if kernels.crc64(data) != naive_crc64(data):
            return False, "crc64 differs from bitwise reference"
        page = int(rng.integers(0, 1 << 40))
        words = kernels.keystream_words(page)
        ref = [naive_keystream_word(page, c, j) for c in range(CHUNKS) for j in range(8)]
        if [int(w) for w in words] != ref:
            return False, "keystream differs"
    return True, f"backend {kernels.BACKEND}"


def check_zipf(draws=10_000_000, seed=9):
    """Fit N to a 17.00% top rank at alpha 0.9 and compare ranks 2-4 with 2.54/1.53/1.08%."""
    from simflash.workload import ZipfSampler, fit_zipf_n
    n = fit_zipf_n(0.9, 0.17)
    z = ZipfSampler(n, 0.9)
    ranks = z.sample(np.random.default_rng(seed), draws)
    freq = np.bincount(ranks, minlength=6)[1:6] / draws * 100
    target = [17.00, 2.54, 1.53, 1.08]
    ok = abs(freq[0] - 17.00) <= 0.2 and all(abs(freq[i] - target[i]) <= 0.2 for i in (1, 2, 3))
    return ok, f"N={n} ranks1-4 %: " + ", ".join(f"{x:.2f}" for x in freq[:4])


SUITES = {
    "match": check_match,
    "chunks": check_chunks,
    "gather": check_gather,
    "randomization": check_randomization,
    "rows": check_rows,
    "range": check_range,
    "range_example": check_range_example,
    "partition": check_partition,
    "kernels": check_kernels,
    "zipf": check_zipf,
}
